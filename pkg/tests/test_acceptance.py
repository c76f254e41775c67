# tests/test_acceptance.py
"""End-to-end behaviour on synthetic textures, plus optional runs on user-supplied benchmarks."""
import os

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter
from sklearn.metrics.pairwise import additive_chi2_kernel

from app.core.presets import get_preset
from app.main_processor import (
    FoldDescriptors,
    build_binnings,
    describe_stream,
    extract_descriptors,
    fit_pca_for_manifest,
    iter_features,
)
from app.models.data_models import CVScheme, DescriptorConfig, SynthSpec
from app.processing.descriptor import fit_pca
from app.processing.scalespace import MultiScaleState
from app.processing.synth import rescale_video, synth_texture
from app.services.evaluation import run_cv
from app.storage.manifest import load_manifest
from app.storage.video_io import FrameStream
from tests.conftest import three_class_specs, write_synthetic_manifest

DESK_CONFIG = DescriptorConfig(fieldset="STRF-Njet", sigma_s=[2.0, 4.0], sigma_tau=[50.0, 100.0], n_comp=10, n_bins=2)
LOO = CVScheme(kind="leave-one-out")


def median_relative_error(reference: np.ndarray, other: np.ndarray) -> float:
    reference, other = np.ravel(reference), np.ravel(other)
    keep = np.abs(reference) > 1e-12
    return float(np.median(np.abs(other[keep] - reference[keep]) / np.abs(reference[keep])))


class TestScaleCovariance:

    def test_spatial_upsampling(self):
        rng = np.random.default_rng(7)
        field = gaussian_filter(rng.normal(size=(48, 48)), 4.0, mode="wrap")
        original = FrameStream.from_array(field[None], fps=25.0)
        upsampled = rescale_video(original, S_s=2.0, S_tau=1.0)
        assert upsampled.shape == (96, 96)

        small = MultiScaleState((48, 48), [(2.0, None)], fps=25.0, dtype="float64")
        large = MultiScaleState((96, 96), [(4.0, None)], fps=25.0, dtype="float64")
        small.update(next(iter(original)))
        large.update(next(iter(upsampled)))
        for m1, m2 in [(1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]:
            a = small.derivative(2.0, None, m1, m2, 0)[10:38, 10:38]
            b = large.derivative(4.0, None, m1, m2, 0)[20:76:2, 20:76:2]
            assert median_relative_error(a, b) < 0.03, (m1, m2)

    def test_temporal_replication(self):
        rng = np.random.default_rng(8)
        phase = rng.uniform(0, 2 * np.pi, size=(16, 16))
        video = np.stack([np.sin(2 * np.pi * t / 800.0 + phase) for t in range(200)])
        original = FrameStream.from_array(video, fps=25.0)
        replicated = rescale_video(original, S_s=1.0, S_tau=2.0, c=2.0)
        assert replicated.fps == 50.0 and len(replicated) == 400

        def responses(stream):
            state = MultiScaleState(stream.shape, [(1.0, 80.0)], fps=stream.fps, dtype="float64")
            out = []
            for frame in stream:
                state.update(frame)
                out.append(state.derivative(1.0, 80.0, 0, 0, 1) if state.warm else np.full(stream.shape, np.nan))
            return np.array(out)

        slow, fast = responses(original), responses(replicated)
        t = np.arange(40, 190)
        paired = 0.5 * (fast[2 * t] + fast[2 * t + 1])
        assert median_relative_error(slow[t], paired) < 0.05


def test_binary_histogram_ignores_brightness():
    spec = SynthSpec(kind="advected-noise", width=48, height=48, frames=40, fps=25.0, velocity=0.7, seed=3)
    base = synth_texture(spec).to_array().astype(np.float64)
    config = DescriptorConfig(sigma_s=[1.0, 2.0], sigma_tau=[50.0], n_comp=8, n_bins=2,
                              threshold_rule="zero", precision="float64")

    def stream(scale: float) -> FrameStream:
        frames = base * scale
        return FrameStream(48, 48, 25.0, frames.shape[0], lambda: iter(list(frames)))

    samples = []
    for _, rows in iter_features(stream(1.0), config):
        samples.append(rows)
    model = fit_pca(np.concatenate(samples), 8)
    model = model.model_copy(update={"mean": np.zeros_like(model.mean), "proj_mean": np.zeros_like(model.proj_mean)})
    binnings = build_binnings(model, config, [8])

    reference = describe_stream(stream(1.0), config, binnings, model)[8][0]
    keys, counts = reference.items()
    assert keys.size > 1
    for scale in (0.5, 3.7):
        hist = describe_stream(stream(scale), config, binnings, model)[8][0]
        np.testing.assert_array_equal(hist.items()[0], keys)
        np.testing.assert_array_equal(hist.items()[1], counts)


@pytest.fixture(scope="module")
def desk_set(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    manifest = load_manifest(str(write_synthetic_manifest(root, three_class_specs(per_class=10))))
    model = fit_pca_for_manifest(manifest, DESK_CONFIG, seed=0)
    return manifest, model


@pytest.fixture(scope="module")
def windowed():
    """Windowed descriptor sets and their distances, shared by both classifiers."""
    return {}


def dense_chi2(dataset) -> np.ndarray:
    vectors = np.stack([d.histogram.to_dense() for d in dataset])
    distances = np.maximum(-additive_chi2_kernel(vectors), 0.0)
    np.fill_diagonal(distances, 0.0)
    return distances


@pytest.mark.slow
class TestDeskScale:
    """Three separable synthetic classes, ten videos each."""

    def test_leave_one_out_is_perfect(self, desk_set):
        manifest, model = desk_set
        dataset = extract_descriptors(manifest, DESK_CONFIG, model)[10]
        assert len(dataset) == 30
        for classifier in ("nn", "svm"):
            result = run_cv(dataset, LOO, classifier, class_names=manifest.classes)
            assert result.mean_accuracy == 1.0, classifier

    def test_random_halves_with_pca_fitted_per_fold(self, desk_set):
        manifest, _ = desk_set
        folds = FoldDescriptors(manifest, DESK_CONFIG)
        scheme = CVScheme(kind="random-split", trials=3, train_fraction=0.5)
        for classifier in ("nn", "svm"):
            result = run_cv(manifest.video_records(), scheme, classifier, fold_data=folds)
            assert result.mean_accuracy >= 0.95, classifier
            assert result.n_train_per_class == [5, 5, 5]

    @pytest.mark.parametrize("classifier", ["nn", "svm"])
    @pytest.mark.parametrize("window", [1, 4, 16])
    def test_windowed_protocol(self, desk_set, windowed, window, classifier):
        if window not in windowed:
            manifest, model = desk_set
            dataset = extract_descriptors(manifest, DESK_CONFIG.model_copy(update={"window": window}), model)[10]
            windowed[window] = dataset, dense_chi2(dataset)
        dataset, distances = windowed[window]
        # 128 frames tiled from frame 0; frames before 13 are warm-up
        assert len(dataset) == 30 * (128 // window - 13 // window)
        result = run_cv(dataset, LOO, classifier, distances=distances)
        assert result.mean_accuracy >= 0.95


def _benchmark(env: str, preset_name: str, scheme: CVScheme, per_fold: bool):
    path = os.environ.get(env)
    if not path:
        pytest.skip(f"set {env} to a manifest of the benchmark videos")
    preset = get_preset(preset_name)
    config = preset.descriptor()
    manifest = load_manifest(path)
    if per_fold:
        folds = FoldDescriptors(manifest, config)
        result = run_cv(manifest.video_records(), scheme, preset.classifier, class_names=manifest.classes,
                        fold_data=folds)
        return preset, folds, result
    model = fit_pca_for_manifest(manifest, config)
    by_m = extract_descriptors(manifest, config, model, n_comps=sorted({config.n_comp, 10}))
    return preset, by_m, run_cv(by_m[config.n_comp], scheme, preset.classifier, class_names=manifest.classes)


@pytest.mark.slow
def test_ucla50_instance_folds():
    _, _, result = _benchmark("STRF_UCLA_MANIFEST", "appendix-b:ucla50-svm", CVScheme.for_benchmark("ucla50"),
                              per_fold=True)
    assert result.mean_accuracy >= 0.99


@pytest.mark.slow
def test_dyntex_gamma():
    # leave-one-out over the whole set: one PCA on every video keeps this to a single extraction
    _, by_m, result = _benchmark("STRF_DYNTEX_MANIFEST", "appendix-b:gamma-svm", LOO, per_fold=False)
    assert result.mean_accuracy >= 0.93
    size = np.mean([d.n_nonempty for d in by_m[10]])
    assert 500 <= size <= 2000
