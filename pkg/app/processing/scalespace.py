# app/processing/scalespace.py
"""Time-causal spatio-temporal scale-space, one frame at a time.

Temporal smoothing is a cascade of K first-order recursive filters (the
discrete counterpart of truncated exponentials coupled in cascade); spatial
smoothing is a separable sampled Gaussian. Derivatives are small-support
difference stencils applied to the smoothed data, backward in time so the
representation never looks at future frames.
"""
from math import ceil, sqrt
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.ndimage import correlate1d
from scipy.signal import lfilter

from app.core.config import logger
from app.core.exceptions import (
    BadRatio,
    BadParams,
    DimensionMismatch,
    EmptyGrid,
    InsufficientHistory,
    NonPositiveScale,
    NonPositiveVariance,
    UninitializedState,
)
from app.models.data_models import KernelSpec, SpatialScaleSpec, TauDistribution

HISTORY_LENGTH = 3
BOUNDARY_MODE = "reflect"  # symmetric extension: d c b a | a b c d

_FIRST_ORDER = np.array([-0.5, 0.0, 0.5])
_SECOND_ORDER = np.array([1.0, -2.0, 1.0])


# --- Temporal kernel -------------------------------------------------------

def compute_time_constants(tau_K: float, c: float, K: int,
                           tau_distribution: TauDistribution = "linear-in-c") -> KernelSpec:
    """Time constants μ_k whose intermediate variances follow a logarithmic distribution.

    linear-in-c:    τ_k = c^(k−K) τ_K
    quadratic-in-c: τ_k = c^(2(k−K)) τ_K
    μ_1 = √τ_1 and μ_k = √(τ_k − τ_(k−1)), so Σ μ_k² = τ_K.
    """
    if tau_K <= 0:
        raise NonPositiveVariance(f"Temporal variance must be positive, got {tau_K}")
    if c <= 1:
        raise BadRatio(f"Distribution parameter c must exceed 1, got {c}")
    if K < 1:
        raise BadParams(f"Number of cascade stages must be at least 1, got {K}")

    power = 1.0 if tau_distribution == "linear-in-c" else 2.0
    taus = [c ** (power * (k - K)) * tau_K for k in range(1, K + 1)]
    taus[-1] = float(tau_K)
    mu = []
    previous = 0.0
    for tau in taus:
        mu.append(sqrt(tau - previous))
        previous = tau
    return KernelSpec(tau_K=float(tau_K), c=float(c), K=int(K), mu=tuple(mu),
                      tau_levels=tuple(taus), tau_distribution=tau_distribution)


def ms_to_frame_variance(sigma_tau_ms: float, fps: float) -> float:
    """Temporal variance in frames² for a standard deviation given in milliseconds."""
    if sigma_tau_ms <= 0:
        raise NonPositiveScale(f"Temporal scale must be positive, got {sigma_tau_ms} ms")
    if fps <= 0:
        raise BadParams(f"Frame rate must be positive, got {fps}")
    sigma_frames = sigma_tau_ms * fps / 1000.0
    return sigma_frames * sigma_frames


def warmup_frames(tau_frames: float) -> int:
    """Frames discarded before a recursive cascade of variance tau_frames is settled."""
    return max(HISTORY_LENGTH, int(ceil(5.0 * sqrt(tau_frames))))


def temporal_delay(spec: KernelSpec) -> float:
    """Mean of the composed kernel, Σ μ_k."""
    return float(sum(spec.mu))


def temporal_kernel_explicit(spec: KernelSpec, t_grid: Sequence[float],
                             oversample: int = 50) -> np.ndarray:
    """Sample h(t; τ) by numerically convolving the K truncated exponentials.

    Stages are chained on a fine uniform grid with the exact first-order
    response to piecewise-linear input, then interpolated onto t_grid.
    """
    t = np.asarray(t_grid, dtype=np.float64)
    if t.size == 0:
        raise EmptyGrid("Temporal grid is empty")
    if np.any(np.diff(t) < 0):
        raise BadParams("Temporal grid must be ascending")

    out = np.zeros_like(t)
    t_max = float(t.max())
    if t_max < 0:
        return out

    step = min(spec.mu) / oversample
    n = int(ceil(t_max / step)) + 2
    fine = np.arange(n) * step

    mu0 = spec.mu[0]
    h = np.exp(-fine / mu0) / mu0
    for mu in spec.mu[1:]:
        a = step / mu
        decay = np.exp(-a)
        w_prev = mu * (1.0 - decay - a * decay) / step
        w_curr = (1.0 - decay) - w_prev
        # y[i] = decay·y[i-1] + w_prev·h[i-1] + w_curr·h[i], starting from y[0] = 0
        h, _ = lfilter([w_curr, w_prev], [1.0, -decay], h, zi=[-w_curr * h[0]])

    positive = t >= 0
    out[positive] = np.interp(t[positive], fine, h)
    return out


def composed_kernel_fourier(omega: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Frequency response of the finite cascade, Π 1 / (1 + i μ_k ω)."""
    w = np.asarray(omega, dtype=np.float64)
    response = np.ones_like(w, dtype=np.complex128)
    for mu in spec.mu:
        response /= (1.0 + 1j * mu * w)
    return response


def limit_kernel_fourier(omega: np.ndarray, tau: float, c: float, n_terms: int = 200) -> np.ndarray:
    """Truncated product for the scale-invariant limit kernel.

    Π_{k≥1} 1 / (1 + i c^(−k) √(c² − 1) √τ ω); the finite cascade with the
    quadratic-in-c distribution converges to this as K grows.
    """
    if tau <= 0:
        raise NonPositiveVariance(f"Temporal variance must be positive, got {tau}")
    if c <= 1:
        raise BadRatio(f"Distribution parameter c must exceed 1, got {c}")
    w = np.asarray(omega, dtype=np.float64)
    response = np.ones_like(w, dtype=np.complex128)
    base = sqrt(c * c - 1.0) * sqrt(tau)
    for k in range(1, n_terms + 1):
        response /= (1.0 + 1j * c ** (-k) * base * w)
    return response


# --- Streaming temporal state ---------------------------------------------

class TemporalScaleState(BaseModel):
    """ Recursive memory of one stream at one temporal scale. """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    shape: Tuple[int, int]
    dtype: str = "float32"
    levels: List[np.ndarray] = []
    prev_levels: List[np.ndarray] = []
    history: List[np.ndarray] = []  # newest last, at most HISTORY_LENGTH frames of level K
    frames_seen: int = 0

    @property
    def initialized(self) -> bool:
        return len(self.levels) > 0

    @property
    def K(self) -> int:
        return len(self.levels) - 1


def initialize_state(shape: Tuple[int, int], spec: KernelSpec, first_frame: Optional[np.ndarray] = None,
                     dtype: str = "float32") -> TemporalScaleState:
    """Create a state whose past is constant: first_frame, or zeros when None."""
    shape = (int(shape[0]), int(shape[1]))
    if first_frame is None:
        fill = np.zeros(shape, dtype=dtype)
    else:
        if first_frame.shape != shape:
            raise DimensionMismatch(f"Frame shape {first_frame.shape} does not match state shape {shape}")
        fill = np.asarray(first_frame, dtype=dtype)
    levels = [fill.copy() for _ in range(spec.K + 1)]
    prev = [fill.copy() for _ in range(spec.K + 1)]
    return TemporalScaleState(shape=shape, dtype=dtype, levels=levels, prev_levels=prev)


def temporal_smooth_step(state: TemporalScaleState, spec: KernelSpec, frame: np.ndarray) -> TemporalScaleState:
    """Advance every level of the cascade by one frame, in place.

    L_k(t) = L_k(t−1) + (L_(k−1)(t) − L_k(t−1)) / (1 + μ̂_k), k = 1..K, with
    L_0(t) the input frame and μ̂_k the discrete time constants of spec.
    """
    if not state.initialized:
        raise UninitializedState("Temporal state has no buffers; call initialize_state first")
    if frame.shape != state.shape:
        raise DimensionMismatch(f"Frame shape {frame.shape} does not match state shape {state.shape}")
    if state.K != spec.K:
        raise DimensionMismatch(f"State holds {state.K} levels but kernel has {spec.K} stages")

    for prev, cur in zip(state.prev_levels, state.levels):
        np.copyto(prev, cur)

    levels = state.levels
    np.copyto(levels[0], frame, casting="same_kind")
    for k, m in enumerate(spec.discrete_mu, start=1):
        gain = levels[k].dtype.type(1.0 / (1.0 + m))
        delta = levels[k - 1] - levels[k]
        delta *= gain
        levels[k] += delta

    state.history.append(levels[-1].copy())
    if len(state.history) > HISTORY_LENGTH:
        del state.history[0]
    state.frames_seen += 1
    logger.trace(f"Temporal step {state.frames_seen} over {spec.K} levels")
    return state


# --- Spatial smoothing and derivatives ------------------------------------

def gaussian_kernel_1d(spec: SpatialScaleSpec) -> np.ndarray:
    """Normalized sampled Gaussian truncated at kernel_radius."""
    if spec.sigma_s <= 0:
        raise NonPositiveScale(f"Spatial scale must be positive, got {spec.sigma_s}")
    x = np.arange(-spec.kernel_radius, spec.kernel_radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / spec.sigma_s) ** 2)
    return kernel / kernel.sum()


def spatial_smooth(frame: np.ndarray, spec: SpatialScaleSpec) -> np.ndarray:
    """Separable row/column pass with a normalized sampled Gaussian."""
    kernel = gaussian_kernel_1d(spec).astype(frame.dtype, copy=False)
    tmp = correlate1d(frame, kernel, axis=0, mode=BOUNDARY_MODE)
    return correlate1d(tmp, kernel, axis=1, mode=BOUNDARY_MODE)


def _spatial_derivative(image: np.ndarray, m1: int, m2: int) -> np.ndarray:
    out = image
    if m1:
        stencil = _FIRST_ORDER if m1 == 1 else _SECOND_ORDER
        out = correlate1d(out, stencil.astype(out.dtype), axis=1, mode=BOUNDARY_MODE)
    if m2:
        stencil = _FIRST_ORDER if m2 == 1 else _SECOND_ORDER
        out = correlate1d(out, stencil.astype(out.dtype), axis=0, mode=BOUNDARY_MODE)
    return out


def derivative_response(state: TemporalScaleState, smoothed: Sequence[np.ndarray],
                        m1: int, m2: int, n: int) -> np.ndarray:
    """Discrete derivative L_{x^m1 y^m2 t^n} of the newest smoothed frame.

    smoothed holds the most recent smoothed frames, newest last. Spatial
    stencils are applied to each frame first, then backward differences in
    time ([1, −1] and [1, −2, 1] over t, t−1, t−2).
    """
    if n < 0 or n > 2 or m1 < 0 or m2 < 0 or m1 + m2 > 2:
        raise BadParams(f"Unsupported derivative orders ({m1}, {m2}, {n})")
    if state.frames_seen < n + 1 or len(smoothed) < n + 1:
        raise InsufficientHistory(
            f"Temporal order {n} needs {n + 1} frames, have {min(state.frames_seen, len(smoothed))}")

    frames = [_spatial_derivative(smoothed[-1 - i], m1, m2) for i in range(n + 1)]
    if n == 0:
        return frames[0]
    if n == 1:
        return frames[0] - frames[1]
    return frames[0] - 2 * frames[1] + frames[2]


def scale_normalize(raw: np.ndarray, s: float, tau: Optional[float], m1: int, m2: int, n: int,
                    gamma_s: float = 1.0, gamma_tau: float = 1.0) -> np.ndarray:
    """Multiply by s^((m1+m2)γ_s/2) τ^(nγ_τ/2)."""
    if s <= 0:
        raise NonPositiveScale(f"Spatial variance must be positive, got {s}")
    if n > 0 and (tau is None or tau <= 0):
        raise NonPositiveScale(f"Temporal variance must be positive, got {tau}")
    factor = s ** ((m1 + m2) * gamma_s / 2.0)
    if n > 0:
        factor *= tau ** (n * gamma_tau / 2.0)
    if factor == 1.0:
        return raw
    return raw * raw.dtype.type(factor)


# --- Multi-scale bundle used by the descriptor pipeline -------------------

class MultiScaleState:
    """Per-stream scale-space at every (σ_s, σ_τ) pair of a receptive-field set.

    One temporal cascade per temporal scale runs on the raw frames; each
    spatial scale then smooths the cascade output into its own three-frame
    stack. Purely spatial pairs (σ_τ is None) smooth the input frame.
    """

    def __init__(self, shape: Tuple[int, int], scale_grid: Sequence[Tuple[float, Optional[float]]],
                 fps: float, c: float = 2.0, K: int = 7,
                 tau_distribution: TauDistribution = "linear-in-c", dtype: str = "float32"):
        self.shape = (int(shape[0]), int(shape[1]))
        self.fps = float(fps)
        self.dtype = dtype
        self.scale_grid = [(float(s), None if t is None else float(t)) for s, t in scale_grid]
        self.kernels: Dict[float, KernelSpec] = {}
        self.temporal: Dict[float, TemporalScaleState] = {}
        self.spatial: Dict[float, SpatialScaleSpec] = {}
        self.stacks: Dict[Tuple[float, Optional[float]], List[np.ndarray]] = {}
        self.frames_seen = 0

        for sigma_s, sigma_tau in self.scale_grid:
            if sigma_s <= 0:
                raise NonPositiveScale(f"Spatial scale must be positive, got {sigma_s}")
            self.spatial.setdefault(sigma_s, SpatialScaleSpec.from_sigma(sigma_s))
            if sigma_tau is not None and sigma_tau not in self.kernels:
                tau_frames = ms_to_frame_variance(sigma_tau, self.fps)
                self.kernels[sigma_tau] = compute_time_constants(tau_frames, c, K, tau_distribution)
            self.stacks[(sigma_s, sigma_tau)] = []

        self.warmup = 0
        for sigma_tau, spec in self.kernels.items():
            self.warmup = max(self.warmup, warmup_frames(spec.tau_K))
            logger.debug(f"σ_τ={sigma_tau} ms → τ={spec.tau_K:.4f} frames², delay {temporal_delay(spec):.2f} frames")

    @property
    def border(self) -> int:
        return max(spec.kernel_radius for spec in self.spatial.values()) + 1

    @property
    def warm(self) -> bool:
        return self.frames_seen > self.warmup

    def tau_frames(self, sigma_tau: Optional[float]) -> Optional[float]:
        return None if sigma_tau is None else self.kernels[sigma_tau].tau_K

    def update(self, frame: np.ndarray) -> None:
        frame = np.asarray(frame, dtype=self.dtype)
        if frame.shape != self.shape:
            raise DimensionMismatch(f"Frame shape {frame.shape} does not match stream shape {self.shape}")
        for sigma_tau, spec in self.kernels.items():
            state = self.temporal.get(sigma_tau)
            if state is None:
                state = initialize_state(self.shape, spec, first_frame=frame, dtype=self.dtype)
                self.temporal[sigma_tau] = state
            temporal_smooth_step(state, spec, frame)

        for (sigma_s, sigma_tau), stack in self.stacks.items():
            source = frame if sigma_tau is None else self.temporal[sigma_tau].levels[-1]
            stack.append(spatial_smooth(source, self.spatial[sigma_s]))
            if len(stack) > HISTORY_LENGTH:
                del stack[0]
        self.frames_seen += 1

    def derivative(self, sigma_s: float, sigma_tau: Optional[float], m1: int, m2: int, n: int,
                   gamma_s: float = 1.0, gamma_tau: float = 1.0) -> np.ndarray:
        """Scale-normalized derivative at one scale pair for the newest frame."""
        if n > 0 and sigma_tau is None:
            raise BadParams("Temporal derivatives need a temporal scale")
        stack = self.stacks[(sigma_s, sigma_tau)]
        if sigma_tau is None:
            state = TemporalScaleState(shape=self.shape, frames_seen=self.frames_seen)
        else:
            state = self.temporal[sigma_tau]
        raw = derivative_response(state, stack, m1, m2, n)
        return scale_normalize(raw, sigma_s * sigma_s, self.tau_frames(sigma_tau), m1, m2, n,
                               gamma_s, gamma_tau)

