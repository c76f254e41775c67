# app/processing/descriptor.py
"""Per-pixel feature vectors → PCA projection → joint histogram of bin indices."""
import hashlib
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core.config import logger
from app.core.exceptions import (
    BadParams,
    DegenerateCovariance,
    DimensionMismatch,
    EmptyHistogram,
    IncompatibleHistograms,
    InsufficientSamples,
    NormalizedHistogramWrite,
)
from app.models.data_models import ThresholdRule

DENSE_LIMIT = 1 << 16
_DEGENERATE_RTOL = 1e-12


# --- PCA -------------------------------------------------------------------

class PCAModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    input_dim: int
    mean: np.ndarray  # (N,)
    components: np.ndarray  # (M_max, N), rows orthonormal, variance descending
    eigenvalues: np.ndarray  # (M_max,)
    proj_mean: np.ndarray  # (M_max,)
    proj_std: np.ndarray  # (M_max,)
    seed: int = 0
    fieldset: str = ""
    order_hash: str = ""

    @property
    def max_components(self) -> int:
        return int(self.components.shape[0])


def fit_pca(samples: np.ndarray, M_max: int, seed: int = 0, fieldset: str = "", order_hash: str = "") -> PCAModel:
    """Principal axes of the sample covariance, largest variance first.

    Each axis is oriented so its first non-negligible coordinate is positive.
    Axes with (numerically) zero variance are dropped, so the model may hold
    fewer than M_max components.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionMismatch(f"Samples must be a 2-D array, got shape {x.shape}")
    n, dim = x.shape
    if M_max < 1:
        raise BadParams(f"Number of components must be at least 1, got {M_max}")
    if M_max > dim:
        raise DimensionMismatch(f"Cannot keep {M_max} components of {dim}-dimensional features")
    if n < M_max + 1:
        raise InsufficientSamples(f"Need at least {M_max + 1} samples for {M_max} components, got {n}")

    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues, kind="stable")[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]

    top = float(eigenvalues[0]) if eigenvalues.size else 0.0
    if top <= 0.0 or not np.isfinite(top):
        raise DegenerateCovariance("Sample covariance has no positive variance")
    keep = int(np.sum(eigenvalues[:M_max] > _DEGENERATE_RTOL * top))
    if keep < M_max:
        logger.warning(f"Dropping {M_max - keep} degenerate principal component(s)")

    components = eigenvectors[:, :keep].T.copy()
    for row in components:
        significant = np.flatnonzero(np.abs(row) > 1e-12)
        if significant.size and row[significant[0]] < 0:
            row *= -1.0

    projected = centered @ components.T
    proj_std = projected.std(axis=0)
    logger.debug(f"PCA over {n} samples of dim {dim}: kept {keep}, top variances {eigenvalues[:min(keep, 3)]}")
    return PCAModel(input_dim=dim, mean=mean, components=components, eigenvalues=eigenvalues[:keep].copy(),
                    proj_mean=projected.mean(axis=0), proj_std=proj_std, seed=seed,
                    fieldset=fieldset, order_hash=order_hash)


def project(model: PCAModel, x: np.ndarray, M: Optional[int] = None) -> np.ndarray:
    """Coordinates of x (…, N) on the first M principal axes; no whitening."""
    M = model.max_components if M is None else M
    x = np.asarray(x)
    if x.shape[-1] != model.input_dim:
        raise DimensionMismatch(f"Feature dimension {x.shape[-1]} does not match model dimension {model.input_dim}")
    if M < 1 or M > model.max_components:
        raise DimensionMismatch(f"Model holds {model.max_components} components, {M} requested")
    comps = model.components[:M]
    mean = model.mean
    if x.dtype == np.float32:
        comps = comps.astype(np.float32)
        mean = mean.astype(np.float32)
    return (x - mean) @ comps.T


class ReservoirSampler:
    """Uniform sample of at most `size` rows from a stream, via bottom-k random keys.

    The sample depends only on the seed and the stream contents, not on how
    the stream is chunked.
    """

    def __init__(self, size: int, seed: Union[int, Sequence[int]]):
        if size < 1:
            raise BadParams(f"Sample size must be at least 1, got {size}")
        self.size = size
        self.rng = np.random.default_rng(seed)
        self.keys = np.empty(0)
        self.rows: Optional[np.ndarray] = None
        self.seen = 0

    def add(self, rows: np.ndarray) -> None:
        if rows.shape[0] == 0:
            return
        keys = self.rng.random(rows.shape[0])
        self.seen += rows.shape[0]
        if self.rows is None:
            all_keys, all_rows = keys, rows
        else:
            all_keys = np.concatenate([self.keys, keys])
            all_rows = np.concatenate([self.rows, rows])
        if all_keys.size > self.size:
            keep = np.argpartition(all_keys, self.size - 1)[:self.size]
            all_keys, all_rows = all_keys[keep], all_rows[keep]
        self.keys, self.rows = all_keys, np.array(all_rows, copy=True)

    def sample(self) -> np.ndarray:
        if self.rows is None:
            return np.empty((0, 0))
        return self.rows[np.argsort(self.keys, kind="stable")]


# --- Binning ---------------------------------------------------------------

class BinningSpec(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    n_bins: int
    d: float
    M: int
    edges: np.ndarray  # (M, n_bins + 1); outer edges only mark the clamping range
    binary_mode: bool
    threshold_rule: ThresholdRule = "zero"

    @property
    def binning_id(self) -> str:
        payload = f"{self.n_bins}|{self.d}|{self.binary_mode}|{self.threshold_rule}|".encode() + \
            np.ascontiguousarray(self.edges, dtype=np.float64).tobytes()
        return hashlib.sha256(payload).hexdigest()[:16]

    @property
    def n_cells(self) -> int:
        return self.n_bins ** self.M


def make_binning(model: PCAModel, M: int, n_bins: int, d: float = 5.0, binary_mode: Optional[bool] = None,
                 threshold_rule: ThresholdRule = "zero") -> BinningSpec:
    """Equidistant bins over [mean − d·std, mean + d·std] of each projected coordinate.

    Binary mode (n_bins = 2) thresholds at zero, or at the projected mean
    when threshold_rule is "mean".
    """
    if n_bins < 2:
        raise BadParams(f"Need at least 2 bins, got {n_bins}")
    if d <= 0:
        raise BadParams(f"Bin range half-width must be positive, got {d}")
    if M < 1 or M > model.max_components:
        raise DimensionMismatch(f"Model holds {model.max_components} components, {M} requested")
    if M * np.log2(n_bins) > 63:
        raise BadParams(f"{n_bins}^{M} cells do not fit a 64-bit cell index")
    binary_mode = (n_bins == 2) if binary_mode is None else binary_mode
    if binary_mode and n_bins != 2:
        raise BadParams("Binary mode needs exactly 2 bins")

    mean = model.proj_mean[:M]
    std = model.proj_std[:M]
    lo, hi = mean - d * std, mean + d * std
    if binary_mode:
        middle = np.zeros(M) if threshold_rule == "zero" else mean
        edges = np.stack([np.minimum(lo, middle), middle, np.maximum(hi, middle)], axis=1)
    else:
        edges = np.linspace(lo, hi, n_bins + 1, axis=1)
    return BinningSpec(n_bins=n_bins, d=d, M=M, edges=edges, binary_mode=binary_mode, threshold_rule=threshold_rule)


def bin_indices(binning: BinningSpec, v: np.ndarray) -> np.ndarray:
    """Per-coordinate bin of each row of v (n, M); values outside the range clamp to the end bins."""
    v = np.atleast_2d(np.asarray(v))
    if v.shape[-1] != binning.M:
        raise DimensionMismatch(f"Vector dimension {v.shape[-1]} does not match binning dimension {binning.M}")
    bins = np.empty(v.shape, dtype=np.int64)
    for i in range(binning.M):
        bins[:, i] = np.searchsorted(binning.edges[i, 1:-1], v[:, i], side="right")
    return bins


def cell_indices(binning: BinningSpec, v: np.ndarray) -> np.ndarray:
    """Mixed-radix cell index Σ bin_i · n_bins^i."""
    bins = bin_indices(binning, v).astype(np.uint64)
    radix = np.uint64(binning.n_bins) ** np.arange(binning.M, dtype=np.uint64)
    return (bins * radix).sum(axis=1, dtype=np.uint64)


# --- Joint histogram -------------------------------------------------------

class JointHistogram:
    """Counts over the n_bins^M joint cells of a binning.

    Stored densely when n_bins^M ≤ 2^16, otherwise as sorted (cell, count)
    arrays. After normalize() the values are probabilities and the histogram
    is read-only.
    """

    def __init__(self, M: int, n_bins: int, binning_id: str = ""):
        self.M = M
        self.n_bins = n_bins
        self.binning_id = binning_id
        self.total = 0
        self.normalized = False
        self.dense = n_bins ** M <= DENSE_LIMIT
        if self.dense:
            self._counts = np.zeros(n_bins ** M, dtype=np.int64)
        else:
            self._keys = np.empty(0, dtype=np.uint64)
            self._values = np.empty(0, dtype=np.int64)
            self._pending: List[np.ndarray] = []
            self._pending_size = 0
        self._probs: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @classmethod
    def for_binning(cls, binning: BinningSpec) -> "JointHistogram":
        return cls(binning.M, binning.n_bins, binning.binning_id)

    @classmethod
    def from_items(cls, M: int, n_bins: int, keys: np.ndarray, values: np.ndarray, total: int,
                   binning_id: str = "", normalized: bool = True) -> "JointHistogram":
        """Rebuild a histogram from sorted (cell, value) pairs."""
        hist = cls(M, n_bins, binning_id)
        keys = np.asarray(keys, dtype=np.uint64)
        hist.total = int(total)
        if normalized:
            hist.normalized = True
            hist._probs = (keys, np.asarray(values, dtype=np.float64))
        else:
            counts = np.asarray(values, dtype=np.int64)
            if hist.dense:
                hist._counts[keys.astype(np.int64)] = counts
            else:
                hist._keys, hist._values = keys, counts
        return hist

    @property
    def n_cells(self) -> int:
        return self.n_bins ** self.M

    def _flush(self) -> None:
        if self.dense or not self._pending:
            return
        merged = np.concatenate([self._keys] + self._pending)
        weights = np.concatenate([self._values, np.ones(self._pending_size, dtype=np.int64)])
        keys, inverse = np.unique(merged, return_inverse=True)
        self._keys = keys
        self._values = np.bincount(inverse, weights=weights).astype(np.int64)
        self._pending, self._pending_size = [], 0

    def add_cells(self, cells: np.ndarray) -> None:
        if self.normalized:
            raise NormalizedHistogramWrite("Cannot accumulate into a normalized histogram")
        cells = np.asarray(cells, dtype=np.uint64).ravel()
        if cells.size == 0:
            return
        if self.dense:
            self._counts += np.bincount(cells.astype(np.int64), minlength=self._counts.size)
        else:
            self._pending.append(cells)
            self._pending_size += cells.size
            if self._pending_size > (1 << 20):
                self._flush()
        self.total += int(cells.size)

    def items(self) -> Tuple[np.ndarray, np.ndarray]:
        """Non-empty cells in ascending index order with their counts (or probabilities)."""
        if self.normalized:
            return self._probs
        if self.dense:
            keys = np.flatnonzero(self._counts)
            return keys.astype(np.uint64), self._counts[keys]
        self._flush()
        return self._keys, self._values

    def to_dense(self) -> np.ndarray:
        keys, values = self.items()
        out = np.zeros(self.n_cells, dtype=np.float64 if self.normalized else np.int64)
        out[keys.astype(np.int64)] = values
        return out

    @property
    def n_nonempty(self) -> int:
        return int(self.items()[0].size)

    def __repr__(self) -> str:
        state = "normalized" if self.normalized else "counts"
        return f"JointHistogram(M={self.M}, n_bins={self.n_bins}, total={self.total}, nonempty={self.n_nonempty}, {state})"


def accumulate(hist: JointHistogram, binning: BinningSpec, v: np.ndarray) -> JointHistogram:
    """Add one projected vector (M,) or a batch (n, M) to hist, in place."""
    if hist.normalized:
        raise NormalizedHistogramWrite("Cannot accumulate into a normalized histogram")
    if binning.M != hist.M or binning.n_bins != hist.n_bins:
        raise DimensionMismatch(f"Binning ({binning.M}, {binning.n_bins}) does not match histogram ({hist.M}, {hist.n_bins})")
    hist.add_cells(cell_indices(binning, v))
    return hist


def normalize(hist: JointHistogram) -> JointHistogram:
    """Probability version of hist: each non-empty cell divided by the total count."""
    if hist.normalized:
        return hist
    if hist.total == 0:
        raise EmptyHistogram("Cannot normalize an empty histogram")
    keys, counts = hist.items()
    probs = counts.astype(np.float64) / float(hist.total)
    return JointHistogram.from_items(hist.M, hist.n_bins, keys.copy(), probs, hist.total,
                                     binning_id=hist.binning_id, normalized=True)


def merge(h1: JointHistogram, h2: JointHistogram) -> JointHistogram:
    """Cell-wise sum of two count histograms built with the same binning."""
    if h1.normalized or h2.normalized:
        raise IncompatibleHistograms("Only count histograms can be merged")
    if (h1.M, h1.n_bins, h1.binning_id) != (h2.M, h2.n_bins, h2.binning_id):
        raise IncompatibleHistograms(
            f"Histograms differ: ({h1.M}, {h1.n_bins}, {h1.binning_id}) vs ({h2.M}, {h2.n_bins}, {h2.binning_id})")
    k1, v1 = h1.items()
    k2, v2 = h2.items()
    keys, inverse = np.unique(np.concatenate([k1, k2]), return_inverse=True)
    counts = np.bincount(inverse, weights=np.concatenate([v1, v2]).astype(np.float64)).astype(np.int64)
    return JointHistogram.from_items(h1.M, h1.n_bins, keys, counts, h1.total + h2.total,
                                     binning_id=h1.binning_id, normalized=False)


HistogramLike = Union[JointHistogram, np.ndarray, Tuple[np.ndarray, np.ndarray]]


def as_sparse(h: HistogramLike) -> Tuple[np.ndarray, np.ndarray]:
    """(sorted cell indices, values) of the non-zero entries of any histogram form."""
    if isinstance(h, JointHistogram):
        keys, values = h.items()
        return keys, np.asarray(values, dtype=np.float64)
    if isinstance(h, tuple):
        keys, values = h
        return np.asarray(keys, dtype=np.uint64), np.asarray(values, dtype=np.float64)
    dense = np.asarray(h, dtype=np.float64).ravel()
    keys = np.flatnonzero(dense)
    return keys.astype(np.uint64), dense[keys]
