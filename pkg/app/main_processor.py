# app/main_processor.py
"""Per-video extraction jobs: PCA sampling, descriptor accumulation, caching and the worker pool."""
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import logger, settings
from app.core.exceptions import DimensionMismatch, EmptyHistogram, EmptyTrainingSet, InsufficientHistory, InsufficientSamples
from app.models.data_models import DatasetManifest, DescriptorConfig, ManifestEntry
from app.processing.descriptor import (
    BinningSpec,
    JointHistogram,
    PCAModel,
    ReservoirSampler,
    accumulate,
    fit_pca,
    make_binning,
    normalize,
    project,
)
from app.processing.rfields import assemble_field_set, compute_njet_frame, interior_pixels
from app.processing.scalespace import MultiScaleState
from app.services.classify import LabeledDescriptor
from app.storage.descriptor_store import DescriptorCache
from app.storage.video_io import FrameStream, read_frames


# --- Helpers ---------------------------------------------------------------

def border_margin(config: DescriptorConfig) -> int:
    if config.border_margin is not None:
        return config.border_margin
    return int(np.ceil(4.0 * max(config.sigma_s))) + 1


def open_entry(entry: ManifestEntry, manifest_fps: Optional[float]) -> FrameStream:
    return read_frames(entry.path, fps=manifest_fps, crop=entry.crop)


def iter_features(stream: FrameStream, config: DescriptorConfig) -> Iterator[Tuple[int, np.ndarray]]:
    """(frame index, interior feature rows) for each frame after warm-up."""
    spec = assemble_field_set(config.fieldset, config.scale_grid())
    fps = config.fps if config.fps is not None else stream.fps
    state = MultiScaleState(stream.shape, spec.scale_grid, fps, c=config.c, K=config.K,
                            tau_distribution=config.tau_distribution, dtype=config.precision)
    margin = border_margin(config)
    for t, frame in enumerate(stream):
        state.update(frame)
        if not state.warm:
            continue
        jet = compute_njet_frame(state, spec, t, config.gamma_s, config.gamma_tau)
        yield t, interior_pixels(jet, margin)
    if not state.warm:
        raise InsufficientHistory(
            f"{stream.source}: {state.frames_seen} frame(s) do not outlast the {state.warmup}-frame warm-up")


def extraction_digest(config: DescriptorConfig, manifest: DatasetManifest, seed: int) -> str:
    """Key for a PCA model: per-pixel feature parameters plus the videos it was fitted on."""
    payload = {
        "extraction": config.extraction_key(),
        "videos": [[e.path, list(e.crop) if e.crop else None] for e in manifest.entries],
        "manifest_fps": manifest.fps,
        "seed": seed,
        "samples_per_video": settings.pca_samples_per_video,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def model_fingerprint(model: PCAModel) -> str:
    h = hashlib.sha256()
    for array in (model.mean, model.components, model.proj_mean, model.proj_std):
        h.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    return h.hexdigest()


def descriptor_digest(config: DescriptorConfig, manifest: DatasetManifest, model: PCAModel) -> str:
    """Key for cached descriptors: the full config, the PCA model and the video list."""
    payload = {
        "config": config.digest(),
        "model": model_fingerprint(model),
        "videos": [[e.path, list(e.crop) if e.crop else None] for e in manifest.entries],
        "manifest_fps": manifest.fps,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_pool(func: Callable, jobs: Sequence, workers: Optional[int] = None) -> List:
    """Map func over jobs in a process pool; results come back in job order."""
    workers = settings.workers if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        return [func(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(func, jobs))


# --- PCA fitting -----------------------------------------------------------

def sample_video(job: Tuple[ManifestEntry, Optional[float], DescriptorConfig, int, List[int]]) -> np.ndarray:
    entry, manifest_fps, config, n_samples, seed = job
    sampler = ReservoirSampler(n_samples, seed)
    for _, rows in iter_features(open_entry(entry, manifest_fps), config):
        sampler.add(np.asarray(rows, dtype=np.float64))
    logger.debug(f"Sampled {min(sampler.seen, n_samples)} of {sampler.seen} feature vector(s) from {entry.path}")
    return sampler.sample()


def sample_manifest(manifest: DatasetManifest, config: DescriptorConfig, seed: int = 0,
                    workers: Optional[int] = None) -> List[np.ndarray]:
    """Reservoir samples of interior feature vectors, one array per manifest video in order."""
    jobs = [(entry, manifest.fps, config, settings.pca_samples_per_video, [seed, i])
            for i, entry in enumerate(manifest.entries)]
    return run_pool(sample_video, jobs, workers)


def fit_pca_on_samples(samples: Sequence[np.ndarray], config: DescriptorConfig, seed: int = 0) -> PCAModel:
    spec = assemble_field_set(config.fieldset, config.scale_grid())
    kept = [s for s in samples if s.size]
    if not kept:
        raise InsufficientSamples("No interior feature vectors were sampled")
    stacked = np.concatenate(kept, axis=0)
    model = fit_pca(stacked, spec.dimension, seed=seed, fieldset=spec.name, order_hash=spec.order_hash())
    logger.info(f"Fitted PCA for {spec.name} (N={spec.dimension}, kept {model.max_components}) on "
                f"{stacked.shape[0]} sample(s) from {len(kept)} video(s)")
    return model


def fit_pca_for_manifest(manifest: DatasetManifest, config: DescriptorConfig, seed: int = 0,
                         cache: Optional[DescriptorCache] = None, workers: Optional[int] = None) -> PCAModel:
    """Fit (or fetch from cache) the PCA model for one field set and scale combination."""
    start = time.time()
    digest = extraction_digest(config, manifest, seed)
    if cache is not None:
        cached = cache.load_pca(digest)
        if cached is not None:
            return cached

    model = fit_pca_on_samples(sample_manifest(manifest, config, seed, workers), config, seed)
    logger.debug(f"Whole-manifest PCA took {time.time() - start:.2f}s")
    if cache is not None:
        path = cache.store_pca(digest, model)
        logger.success(f"PCA model stored at {path}")
    return model


# --- Descriptors -----------------------------------------------------------

def describe_stream(stream: FrameStream, config: DescriptorConfig, binnings: Dict[int, BinningSpec],
                    model: PCAModel) -> Dict[int, List[JointHistogram]]:
    """Histograms of one stream for several n_comp values in a single filtering pass.

    Without a window each n_comp gets one histogram of all post-warm-up
    frames. A window of n frames tiles the stream at absolute positions
    [k·n, (k+1)·n) and counts only its post-warm-up frames. Windows with no
    such frame are skipped, as is a trailing partial window.
    """
    M_max = max(binnings)
    finished: Dict[int, List[JointHistogram]] = {m: [] for m in binnings}
    current = {m: JointHistogram.for_binning(b) for m, b in binnings.items()}
    window_index: Optional[int] = None
    last_t = -1
    for t, rows in iter_features(stream, config):
        if config.window is not None:
            k = t // config.window
            if window_index is not None and k != window_index:
                for m, binning in binnings.items():
                    finished[m].append(current[m])
                    current[m] = JointHistogram.for_binning(binning)
            window_index = k
        coords = project(model, rows, M_max)
        for m, binning in binnings.items():
            accumulate(current[m], binning, coords[:, :m])
        last_t = t
    if config.window is None or (window_index is not None and last_t == (window_index + 1) * config.window - 1):
        for m in binnings:
            finished[m].append(current[m])
    if not finished[M_max]:
        raise EmptyHistogram(f"{stream.source}: no complete window of {config.window} frame(s) after warm-up")
    return finished


def _describe_job(job: Tuple[ManifestEntry, Optional[float], DescriptorConfig, Dict[int, BinningSpec], PCAModel]):
    entry, manifest_fps, config, binnings, model = job
    start = time.time()
    hists = describe_stream(open_entry(entry, manifest_fps), config, binnings, model)
    logger.debug(f"Described {entry.path} in {time.time() - start:.2f}s")
    return hists


def build_binnings(model: PCAModel, config: DescriptorConfig, n_comps: Sequence[int]) -> Dict[int, BinningSpec]:
    return {m: make_binning(model, m, config.n_bins, config.d, threshold_rule=config.threshold_rule)
            for m in sorted(set(n_comps))}


def extract_descriptors(manifest: DatasetManifest, config: DescriptorConfig, model: PCAModel,
                        n_comps: Optional[Sequence[int]] = None, cache: Optional[DescriptorCache] = None,
                        workers: Optional[int] = None) -> Dict[int, List[LabeledDescriptor]]:
    """Labeled, normalized descriptors of every manifest video for each requested n_comp.

    Cached descriptors are reused; only videos missing for some n_comp are
    filtered again.
    """
    spec = assemble_field_set(config.fieldset, config.scale_grid())
    if model.order_hash and model.order_hash != spec.order_hash():
        raise DimensionMismatch(f"PCA model was fitted on a different channel order than {spec.name} over {spec.scale_grid}")
    start = time.time()
    n_comps = sorted(set(n_comps or [config.n_comp]))
    configs = {m: config.model_copy(update={"n_comp": m}) for m in n_comps}
    digests = {m: descriptor_digest(c, manifest, model) for m, c in configs.items()}

    found: Dict[Tuple[int, int], List[JointHistogram]] = {}
    missing: List[int] = []
    for i in range(len(manifest.entries)):
        complete = True
        for m in n_comps:
            hists = None
            if cache is not None:
                if config.window is None:
                    single = cache.load_descriptor(digests[m], i)
                    hists = None if single is None else [single]
                else:
                    hists = cache.load_windows(digests[m], i)
            if hists is None:
                complete = False
                break
            found[(i, m)] = hists
        if not complete:
            missing.append(i)
    logger.info(f"{len(manifest.entries) - len(missing)} video(s) cached, {len(missing)} to extract "
                f"for {config.fieldset} σ_s={config.sigma_s} σ_τ={config.sigma_tau} n_comp={n_comps}")

    if missing:
        binnings = build_binnings(model, config, n_comps)
        jobs = [(manifest.entries[i], manifest.fps, config, binnings, model) for i in missing]
        for i, hists_by_m in zip(missing, run_pool(_describe_job, jobs, workers)):
            for m in n_comps:
                normalized = [normalize(h) for h in hists_by_m[m]]
                found[(i, m)] = normalized
                if cache is not None:
                    if config.window is None:
                        cache.store_descriptor(digests[m], i, hists_by_m[m][0], config.binary)
                    else:
                        cache.store_windows(digests[m], i, hists_by_m[m], config.binary)

    out: Dict[int, List[LabeledDescriptor]] = {}
    for m in n_comps:
        labeled = []
        for i, entry in enumerate(manifest.entries):
            for w, hist in enumerate(found[(i, m)]):
                labeled.append(LabeledDescriptor(
                    histogram=hist, label=entry.label, label_index=manifest.class_index(entry.label),
                    video_id=i, instance=entry.instance, window=None if config.window is None else w,
                    n_nonempty=hist.n_nonempty))
        out[m] = labeled
    logger.info(f"Descriptors ready for {len(manifest.entries)} video(s) in {time.time() - start:.2f}s")
    return out


def mean_nonempty(dataset: Sequence[LabeledDescriptor]) -> float:
    return float(np.mean([d.n_nonempty for d in dataset])) if dataset else float("nan")


class FoldDescriptors:
    """Descriptors whose PCA model is fitted on one fold's training videos only.

    Each video is sampled once, with the same per-video seeds as
    fit_pca_for_manifest, so a fold holding every video reproduces the
    whole-manifest model. Descriptor sets are memoized per training set,
    which lets several classifiers and n_comp values share one extraction.
    """

    def __init__(self, manifest: DatasetManifest, config: DescriptorConfig, seed: int = 0,
                 n_comps: Optional[Sequence[int]] = None, workers: Optional[int] = None):
        self.manifest = manifest
        self.config = config
        self.seed = seed
        self.n_comps = sorted(set(n_comps or [config.n_comp]))
        self.workers = workers
        self._samples: Optional[List[np.ndarray]] = None
        self._built: Dict[Tuple[int, ...], Dict[int, List[LabeledDescriptor]]] = {}

    def _key(self, train_videos: Sequence[int]) -> Tuple[int, ...]:
        key = tuple(sorted({int(i) for i in train_videos}))
        if not key:
            raise EmptyTrainingSet("A fold without training videos cannot fit PCA")
        return key

    def samples(self) -> List[np.ndarray]:
        if self._samples is None:
            self._samples = sample_manifest(self.manifest, self.config, self.seed, self.workers)
        return self._samples

    def model(self, train_videos: Sequence[int]) -> PCAModel:
        samples = self.samples()
        return fit_pca_on_samples([samples[i] for i in self._key(train_videos)], self.config, self.seed)

    def descriptors(self, train_videos: Sequence[int]) -> Dict[int, List[LabeledDescriptor]]:
        key = self._key(train_videos)
        if key not in self._built:
            model = self.model(key)
            wanted = [m for m in self.n_comps if m <= model.max_components]
            logger.debug(f"Fold PCA on {len(key)} of {len(self.manifest.entries)} video(s), n_comp={wanted}")
            self._built[key] = extract_descriptors(self.manifest, self.config, model, wanted, workers=self.workers)
        return self._built[key]

    def select(self, train_videos: Sequence[int], n_comp: int) -> List[LabeledDescriptor]:
        built = self.descriptors(train_videos)
        if n_comp not in built:
            raise DimensionMismatch(f"The fold's PCA model keeps fewer than {n_comp} components")
        return built[n_comp]

    def for_n_comp(self, n_comp: int) -> Callable[[np.ndarray], List[LabeledDescriptor]]:
        return lambda train_videos: self.select(train_videos, n_comp)

    def __call__(self, train_videos: np.ndarray) -> List[LabeledDescriptor]:
        return self.select(train_videos, self.config.n_comp)

    def mean_nonempty(self, n_comp: Optional[int] = None) -> float:
        """Mean non-empty cells over every descriptor built so far."""
        m = self.config.n_comp if n_comp is None else n_comp
        counts = [d.n_nonempty for built in self._built.values() for d in built.get(m, [])]
        return float(np.mean(counts)) if counts else float("nan")
