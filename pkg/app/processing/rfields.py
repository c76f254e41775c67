# app/processing/rfields.py
"""Receptive-field sets: which derivative channels, at which scales, in which order.

Channel order inside one scale pair: spatial order ascending, then temporal
order ascending, x before y among channels of equal orders. Invariants follow
the same rule through the spatial order of the operator and the temporal order
of the smoothed signal it is applied to. Scale pairs are outermost, in
scale-grid order. The ordering is frozen by CHANNEL_ORDER_VERSION since PCA
models depend on it.
"""
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.core.config import logger
from app.core.exceptions import (
    BadParams,
    EmptyGrid,
    EmptyInterior,
    InsufficientHistory,
    MissingChannels,
    NonPositiveScale,
    UnknownFieldSet,
)
from app.models.data_models import FIELDSET_NAMES, ChannelSpec, FieldSetSpec, InvariantId
from app.processing.scalespace import MultiScaleState

# name -> (m1, m2, n): orders in x, y and t
DERIVATIVES: Dict[str, Tuple[int, int, int]] = {
    "Lx": (1, 0, 0), "Ly": (0, 1, 0), "Lxx": (2, 0, 0), "Lxy": (1, 1, 0), "Lyy": (0, 2, 0),
    "Lt": (0, 0, 1), "Lxt": (1, 0, 1), "Lyt": (0, 1, 1),
    "Lxxt": (2, 0, 1), "Lxyt": (1, 1, 1), "Lyyt": (0, 2, 1),
    "Ltt": (0, 0, 2), "Lxtt": (1, 0, 2), "Lytt": (0, 1, 2),
    "Lxxtt": (2, 0, 2), "Lxytt": (1, 1, 2), "Lyytt": (0, 2, 2),
}

_SPATIAL = ("Lx", "Ly", "Lxx", "Lxy", "Lyy")
_SUFFIX = {"L": "", "L_t": "t", "L_tt": "tt"}

_INVARIANT_OPS = ("grad-magnitude", "laplacian", "det-hessian-signed-sqrt")

FIELDSET_CHANNELS: Dict[str, Tuple[str, ...]] = {
    "RF-Spatial": _SPATIAL,
    "STRF-Njet": ("Lt", "Ltt",
                  "Lx", "Ly", "Lxt", "Lyt", "Lxtt", "Lytt",
                  "Lxx", "Lxy", "Lyy", "Lxxt", "Lxyt", "Lyyt", "Lxxtt", "Lxytt", "Lyytt"),
    "STRF-Njet-previous": ("Lt", "Ltt", "Lx", "Ly", "Lxt", "Lyt", "Lxx", "Lxy", "Lyy", "Lxxt", "Lxyt", "Lyyt"),
    "STRF-RotInv": tuple(f"{op}({base})" for op in _INVARIANT_OPS for base in _SUFFIX),
}


class JetResponse(BaseModel):
    """ Per-pixel responses of one frame, channels last. """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    data: np.ndarray  # (H, W, C)
    channels: Tuple[ChannelSpec, ...]
    frame_index: int

    @property
    def names(self) -> List[str]:
        return [_channel_key(c) for c in self.channels]


def _channel_key(channel: ChannelSpec) -> str:
    return f"{channel.name}@{channel.sigma_s}/{channel.sigma_tau}"


def _invariant_channel(name: str, sigma_s: float, sigma_tau: Optional[float]) -> ChannelSpec:
    op, base = name[:-1].split("(")
    return ChannelSpec(name=name, invariant=InvariantId(base=base, op=op), sigma_s=sigma_s, sigma_tau=sigma_tau)


def assemble_field_set(name: str, scale_grid: Sequence[Tuple[float, Optional[float]]]) -> FieldSetSpec:
    """Fix the feature channels of a receptive-field set over a grid of scale pairs."""
    if name not in FIELDSET_NAMES:
        raise UnknownFieldSet(f"Unknown receptive-field set '{name}'; expected one of {', '.join(FIELDSET_NAMES)}")
    if not scale_grid:
        raise EmptyGrid(f"Receptive-field set '{name}' needs at least one scale pair")

    grid: List[Tuple[float, Optional[float]]] = []
    for sigma_s, sigma_tau in scale_grid:
        if sigma_s is None or sigma_s <= 0 or (sigma_tau is not None and sigma_tau <= 0):
            raise NonPositiveScale(f"Scales must be positive, got ({sigma_s}, {sigma_tau})")
        if name == "RF-Spatial":
            sigma_tau = None
        elif sigma_tau is None:
            raise BadParams(f"Receptive-field set '{name}' needs a temporal scale for σ_s={sigma_s}")
        pair = (float(sigma_s), None if sigma_tau is None else float(sigma_tau))
        if pair not in grid:
            grid.append(pair)

    names = FIELDSET_CHANNELS[name]
    channels: List[ChannelSpec] = []
    for sigma_s, sigma_tau in grid:
        for channel in names:
            if name == "STRF-RotInv":
                channels.append(_invariant_channel(channel, sigma_s, sigma_tau))
            else:
                channels.append(ChannelSpec(name=channel, orders=DERIVATIVES[channel],
                                            sigma_s=sigma_s, sigma_tau=sigma_tau))
    spec = FieldSetSpec(name=name, channels=names, scale_grid=tuple(grid), feature_channels=tuple(channels))
    logger.debug(f"Assembled {name} over {len(grid)} scale pair(s): N={spec.dimension}")
    return spec


def directional_channels(spec: FieldSetSpec) -> List[ChannelSpec]:
    """Derivative channels to evaluate before invariants are formed."""
    if spec.name != "STRF-RotInv":
        return list(spec.feature_channels)
    out: List[ChannelSpec] = []
    for sigma_s, sigma_tau in spec.scale_grid:
        for suffix in ("", "t", "tt"):
            for base in _SPATIAL:
                name = base + suffix
                out.append(ChannelSpec(name=name, orders=DERIVATIVES[name], sigma_s=sigma_s, sigma_tau=sigma_tau))
    return out


def compute_njet_frame(state: MultiScaleState, spec: FieldSetSpec, frame_index: int,
                       gamma_s: float = 1.0, gamma_tau: float = 1.0) -> JetResponse:
    """Scale-normalized responses of every channel of spec for the newest frame."""
    if not state.warm:
        raise InsufficientHistory(
            f"Scale-space has seen {state.frames_seen} frame(s); the first {state.warmup} are warm-up")

    channels = directional_channels(spec)
    h, w = state.shape
    data = np.empty((h, w, len(channels)), dtype=state.dtype)
    for i, channel in enumerate(channels):
        m1, m2, n = channel.orders
        data[..., i] = state.derivative(channel.sigma_s, channel.sigma_tau, m1, m2, n, gamma_s, gamma_tau)

    jet = JetResponse(data=data, channels=tuple(channels), frame_index=frame_index)
    if spec.name == "STRF-RotInv":
        return rotinv_features(jet)
    return jet


def signed_sqrt(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.sqrt(np.abs(x))


def rotinv_features(njet: JetResponse) -> JetResponse:
    """Gradient magnitude, Laplacian and signed-sqrt Hessian determinant of L, L_t and L_tt."""
    index = {key: i for i, key in enumerate(njet.names)}
    pairs: List[Tuple[float, Optional[float]]] = []
    for channel in njet.channels:
        pair = (channel.sigma_s, channel.sigma_tau)
        if pair not in pairs:
            pairs.append(pair)

    def take(name: str, sigma_s: float, sigma_tau: Optional[float]) -> np.ndarray:
        key = f"{name}@{sigma_s}/{sigma_tau}"
        if key not in index:
            raise MissingChannels(f"Channel {name} at ({sigma_s}, {sigma_tau}) missing from jet")
        return njet.data[..., index[key]]

    out_channels: List[ChannelSpec] = []
    planes: List[np.ndarray] = []
    for sigma_s, sigma_tau in pairs:
        computed: Dict[str, np.ndarray] = {}
        for base, suffix in _SUFFIX.items():
            lx = take("Lx" + suffix, sigma_s, sigma_tau)
            ly = take("Ly" + suffix, sigma_s, sigma_tau)
            lxx = take("Lxx" + suffix, sigma_s, sigma_tau)
            lxy = take("Lxy" + suffix, sigma_s, sigma_tau)
            lyy = take("Lyy" + suffix, sigma_s, sigma_tau)
            computed[f"grad-magnitude({base})"] = np.sqrt(lx * lx + ly * ly)
            computed[f"laplacian({base})"] = lxx + lyy
            computed[f"det-hessian-signed-sqrt({base})"] = signed_sqrt(lxx * lyy - lxy * lxy)
        for name in FIELDSET_CHANNELS["STRF-RotInv"]:
            planes.append(computed[name])
            out_channels.append(_invariant_channel(name, sigma_s, sigma_tau))

    data = np.stack(planes, axis=-1).astype(njet.data.dtype, copy=False)
    return JetResponse(data=data, channels=tuple(out_channels), frame_index=njet.frame_index)


def interior_slices(shape: Tuple[int, int], margin: int) -> Tuple[slice, slice]:
    """Rows/columns at least margin pixels from every edge."""
    h, w = shape
    if margin < 0:
        raise BadParams(f"Border margin must be non-negative, got {margin}")
    if h - 2 * margin <= 0 or w - 2 * margin <= 0:
        raise EmptyInterior(f"Border margin {margin} leaves no interior in a {w}x{h} frame")
    return slice(margin, h - margin), slice(margin, w - margin)


def interior_pixels(jet: JetResponse, margin: int) -> np.ndarray:
    """Flatten interior pixels of a jet to (n_pixels, C)."""
    rows, cols = interior_slices(jet.data.shape[:2], margin)
    block = jet.data[rows, cols, :]
    return block.reshape(-1, block.shape[-1])
