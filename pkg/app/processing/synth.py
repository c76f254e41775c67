# app/processing/synth.py
"""Deterministic synthetic dynamic textures and rescaling harnesses."""
from math import isclose, log
from typing import Iterator, Optional

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates, shift

from app.core.config import logger
from app.core.exceptions import BadParams, NonIntegerTemporalFactor
from app.models.data_models import SynthSpec
from app.storage.video_io import FrameStream


def _noise_field(spec: SynthSpec, seed: int) -> np.ndarray:
    """Seeded noise in [0, 1], Gaussian-smoothed with periodic wrap."""
    rng = np.random.default_rng(seed)
    field = rng.random((spec.height, spec.width))
    if spec.noise_smoothing > 0:
        field = gaussian_filter(field, spec.noise_smoothing, mode="wrap")
    lo, hi = field.min(), field.max()
    if hi > lo:
        field = (field - lo) / (hi - lo)
    return field


def _validate(spec: SynthSpec) -> None:
    if spec.wavelength <= 0:
        raise BadParams(f"Wavelength must be positive, got {spec.wavelength}")
    if spec.kind == "flicker" and spec.flicker_period < 2:
        raise BadParams(f"Flicker period must be at least 2 frames, got {spec.flicker_period}")
    if spec.noise_smoothing < 0:
        raise BadParams(f"Noise smoothing must be non-negative, got {spec.noise_smoothing}")


def synth_texture(spec: SynthSpec, seed: Optional[int] = None) -> FrameStream:
    """Frame stream for one synthetic texture; a pure function of (spec, seed).

    translating-sine  0.5 + 0.5·sin(2π(x − v·t)/λ)
    flicker           noise field × square wave of period flicker_period (levels 1 and 0.5)
    advected-noise    noise field shifted v px/frame along x, bilinear with wrap-around
    static-noise      the noise field in every frame
    """
    _validate(spec)
    seed = spec.seed if seed is None else seed
    x = np.arange(spec.width, dtype=np.float64)[None, :]
    height, width = spec.height, spec.width
    field = None if spec.kind == "translating-sine" else _noise_field(spec, seed)

    def frames() -> Iterator[np.ndarray]:
        for t in range(spec.frames):
            if spec.kind == "translating-sine":
                row = 0.5 + 0.5 * np.sin(2.0 * np.pi * (x - spec.velocity * t) / spec.wavelength)
                frame = np.broadcast_to(row, (height, width))
            elif spec.kind == "flicker":
                on = (t % spec.flicker_period) < spec.flicker_period / 2.0
                frame = field * (1.0 if on else 0.5)
            elif spec.kind == "advected-noise":
                frame = shift(field, (0.0, spec.velocity * t), order=1, mode="grid-wrap")
            else:
                frame = field
            yield np.asarray(frame, dtype=np.float32).copy()

    logger.debug(f"Synthetic {spec.kind} {width}x{height}x{spec.frames} at {spec.fps} fps, seed {seed}")
    return FrameStream(width, height, spec.fps, spec.frames, frames, f"synth:{spec.kind}:{seed}")


def _temporal_exponent(S_tau: float, c: float) -> int:
    j = log(S_tau) / log(c)
    if not isclose(j, round(j), abs_tol=1e-9):
        raise NonIntegerTemporalFactor(f"Temporal factor {S_tau} is not an integer power of c={c}")
    return int(round(j))


def rescale_video(stream: FrameStream, S_s: float, S_tau: float, c: Optional[float] = None) -> FrameStream:
    """Spatially and temporally rescaled copy of stream.

    Space: bilinear resampling to round(S_s·w) × round(S_s·h), output pixel X
    sampled at input position X / S_s. Time: each frame repeated S_tau times
    when S_tau ≥ 1, every (1/S_tau)-th frame kept otherwise; the declared fps
    scales by S_tau. Passing c requires S_tau = c^j for an integer j.
    """
    if S_s <= 0 or S_tau <= 0:
        raise BadParams(f"Rescaling factors must be positive, got S_s={S_s}, S_tau={S_tau}")
    if c is not None:
        _temporal_exponent(S_tau, c)
    if S_tau >= 1:
        repeat, stride = int(round(S_tau)), 1
        if not isclose(S_tau, repeat):
            raise NonIntegerTemporalFactor(f"Frame replication needs an integer factor, got {S_tau}")
    else:
        repeat, stride = 1, int(round(1.0 / S_tau))
        if not isclose(1.0 / S_tau, stride):
            raise NonIntegerTemporalFactor(f"Frame subsampling needs an integer 1/S_tau, got {S_tau}")

    spatial_identity = isclose(S_s, 1.0)
    width = stream.width if spatial_identity else int(round(stream.width * S_s))
    height = stream.height if spatial_identity else int(round(stream.height * S_s))
    if width < 1 or height < 1:
        raise BadParams(f"Rescaling by {S_s} leaves an empty frame")
    coords = None
    if not spatial_identity:
        yy, xx = np.meshgrid(np.arange(height) / S_s, np.arange(width) / S_s, indexing="ij")
        coords = np.stack([yy, xx])

    def frames() -> Iterator[np.ndarray]:
        for i, frame in enumerate(stream):
            if i % stride:
                continue
            if coords is not None:
                frame = map_coordinates(frame, coords, order=1, mode="nearest").astype(np.float32)
            for _ in range(repeat):
                yield frame

    count = None
    if stream.frames is not None:
        count = stream.frames * repeat if stride == 1 else (stream.frames + stride - 1) // stride
    return FrameStream(width, height, stream.fps * S_tau, count, frames, f"{stream.source}*({S_s},{S_tau})")
