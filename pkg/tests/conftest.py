# tests/conftest.py
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
import pytest

from app.models.data_models import SynthSpec
from app.processing.descriptor import JointHistogram
from app.processing.synth import synth_texture
from app.services.classify import LabeledDescriptor
from app.storage.video_io import write_raw


def random_histogram(rng: np.random.Generator, n_cells: int = 4096, n_nonempty: int = 40, M: int = 12) -> JointHistogram:
    """Normalized sparse histogram with random support and weights."""
    keys = np.sort(rng.choice(n_cells, size=n_nonempty, replace=False)).astype(np.uint64)
    values = rng.random(n_nonempty) + 1e-3
    values /= values.sum()
    return JointHistogram.from_items(M, 2, keys, values, total=1000, normalized=True)


def clustered_dataset(n_classes: int = 3, per_class: int = 6, seed: int = 0,
                      instances_per_class: int = 1) -> List[LabeledDescriptor]:
    """Histograms concentrated on disjoint cell ranges per class."""
    rng = np.random.default_rng(seed)
    dataset = []
    video_id = 0
    for label in range(n_classes):
        for i in range(per_class):
            keys = np.arange(label * 100, label * 100 + 20, dtype=np.uint64)
            values = 1.0 + 0.2 * rng.random(keys.size)
            values /= values.sum()
            hist = JointHistogram.from_items(12, 2, keys, values, total=500, normalized=True)
            dataset.append(LabeledDescriptor(histogram=hist, label=f"class{label}", label_index=label,
                                             video_id=video_id, instance=f"c{label}i{i % instances_per_class}",
                                             n_nonempty=int(keys.size)))
            video_id += 1
    return dataset


def write_synthetic_manifest(root: Path, specs: Sequence[Tuple[str, SynthSpec]], fps: float = 25.0) -> Path:
    """Raw containers for each (label, spec) plus a manifest listing them, one instance per video."""
    lines = ["# name: synthetic", f"# fps: {fps}"]
    for i, (label, spec) in enumerate(specs):
        path = root / f"{label}_{i:03d}.strfvid"
        write_raw(synth_texture(spec), path)
        lines.append(f"{path.name}\t{label}\t{label}-{i}")
    manifest = root / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def three_class_specs(per_class: int, width: int = 64, height: int = 64, frames: int = 128) -> List[Tuple[str, SynthSpec]]:
    specs = []
    for i in range(per_class):
        common: Dict = dict(width=width, height=height, frames=frames, fps=25.0, seed=100 + i)
        specs.append(("sine", SynthSpec(kind="translating-sine", wavelength=8.0, velocity=1.0, **common)))
        specs.append(("flicker", SynthSpec(kind="flicker", flicker_period=8, **common)))
        specs.append(("static", SynthSpec(kind="static-noise", **common)))
    return specs


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_manifest(tmp_path: Path) -> Path:
    return write_synthetic_manifest(tmp_path, three_class_specs(per_class=3, width=32, height=32, frames=40))
