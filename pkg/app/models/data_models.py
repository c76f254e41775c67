# app/models/data_models.py
import hashlib
import json
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.exceptions import BadParams

# Bumped whenever channel ordering changes; PCA models are order-sensitive.
CHANNEL_ORDER_VERSION = 2

FIELDSET_NAMES = ("RF-Spatial", "STRF-Njet", "STRF-RotInv", "STRF-Njet-previous")

FieldSetName = Literal["RF-Spatial", "STRF-Njet", "STRF-RotInv", "STRF-Njet-previous"]
TauDistribution = Literal["linear-in-c", "quadratic-in-c"]
ThresholdRule = Literal["zero", "mean"]
Precision = Literal["float32", "float64"]
ClassifierName = Literal["svm", "nn", "both"]
SchemeKind = Literal["k-fold-by-instance", "random-split", "leave-one-out"]
SynthKind = Literal["translating-sine", "flicker", "advected-noise", "static-noise"]


class KernelSpec(BaseModel):
    """ Time constants of a cascade of K truncated exponentials.

    Units are whatever the caller used for tau_K (ms² at the interface, frames²
    inside the streaming pipeline); mu carries the matching linear unit.
    """
    model_config = ConfigDict(frozen=True)

    tau_K: float
    c: float
    K: int
    mu: Tuple[float, ...]
    tau_levels: Tuple[float, ...]
    tau_distribution: TauDistribution = "linear-in-c"

    @property
    def discrete_mu(self) -> Tuple[float, ...]:
        """Per-stage parameters of the discrete first-order recursion.

        A recursive stage with parameter m has variance m² + m, so each
        variance increment Δτ_k = μ_k² maps to m_k = (√(1 + 4Δτ_k) − 1) / 2.
        """
        return tuple((((1.0 + 4.0 * m * m) ** 0.5) - 1.0) / 2.0 for m in self.mu)


class SpatialScaleSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_s: float
    kernel_radius: int

    @classmethod
    def from_sigma(cls, sigma_s: float) -> "SpatialScaleSpec":
        from math import ceil
        return cls(sigma_s=sigma_s, kernel_radius=max(1, int(ceil(4.0 * sigma_s))))


class InvariantId(BaseModel):
    model_config = ConfigDict(frozen=True)

    base: Literal["L", "L_t", "L_tt"]
    op: Literal["grad-magnitude", "laplacian", "det-hessian-signed-sqrt"]


class ChannelSpec(BaseModel):
    """ One feature channel: a derivative (orders) or a differential invariant, at one scale pair. """
    model_config = ConfigDict(frozen=True)

    name: str
    orders: Optional[Tuple[int, int, int]] = None
    invariant: Optional[InvariantId] = None
    sigma_s: float
    sigma_tau: Optional[float] = None  # ms; None for purely spatial channels


class FieldSetSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: FieldSetName
    channels: Tuple[str, ...]
    scale_grid: Tuple[Tuple[float, Optional[float]], ...]
    feature_channels: Tuple[ChannelSpec, ...]

    @property
    def dimension(self) -> int:
        return len(self.feature_channels)

    @property
    def temporal_scales(self) -> Tuple[float, ...]:
        return tuple(sorted({t for _, t in self.scale_grid if t is not None}))

    @property
    def spatial_scales(self) -> Tuple[float, ...]:
        return tuple(sorted({s for s, _ in self.scale_grid}))

    def order_hash(self) -> str:
        text = "|".join(f"{c.name}@{c.sigma_s}/{c.sigma_tau}" for c in self.feature_channels)
        return hashlib.sha256(f"v{CHANNEL_ORDER_VERSION}:{text}".encode("utf-8")).hexdigest()[:16]


class DescriptorConfig(BaseModel):
    """ Numerical parameters of one histogram descriptor family member. """
    fieldset: FieldSetName = "STRF-Njet"
    sigma_s: List[float] = Field(default_factory=lambda: [2.0, 4.0])
    sigma_tau: List[float] = Field(default_factory=lambda: [50.0, 100.0])  # ms
    n_comp: int = Field(default=10, ge=1)
    n_bins: int = Field(default=2, ge=2)
    d: float = Field(default=5.0, gt=0)
    c: float = 2.0
    K: int = 7
    gamma_s: float = 1.0
    gamma_tau: float = 1.0
    threshold_rule: ThresholdRule = "zero"
    tau_distribution: TauDistribution = "linear-in-c"
    fps: Optional[float] = None  # None: manifest-declared rate, then settings.default_fps
    precision: Precision = "float32"
    border_margin: Optional[int] = Field(default=None, ge=0)
    window: Optional[int] = Field(default=None, ge=1)

    @field_validator("sigma_s", "sigma_tau")
    @classmethod
    def sorted_scales(cls, v: List[float]) -> List[float]:
        return sorted(float(x) for x in v)

    @model_validator(mode="after")
    def spatial_needs_no_time(self) -> "DescriptorConfig":
        if self.fieldset == "RF-Spatial":
            self.sigma_tau = []
        return self

    @property
    def binary(self) -> bool:
        return self.n_bins == 2

    def scale_grid(self) -> List[Tuple[float, Optional[float]]]:
        """Cartesian product of the spatial and temporal scale lists, spatial-major."""
        if self.fieldset == "RF-Spatial" or not self.sigma_tau:
            return [(s, None) for s in self.sigma_s]
        return [(s, t) for s in self.sigma_s for t in self.sigma_tau]

    def extraction_key(self) -> dict:
        """Fields that change per-pixel features (everything upstream of PCA)."""
        return {
            "fieldset": self.fieldset, "sigma_s": self.sigma_s, "sigma_tau": self.sigma_tau,
            "c": self.c, "K": self.K, "gamma_s": self.gamma_s, "gamma_tau": self.gamma_tau,
            "tau_distribution": self.tau_distribution, "fps": self.fps, "precision": self.precision,
            "border_margin": self.border_margin, "channel_order_version": CHANNEL_ORDER_VERSION,
            "warmup_rule": "ceil(5*sigma_tau_frames)",
        }

    def canonical_text(self) -> str:
        payload = self.model_dump(mode="json")
        payload["channel_order_version"] = CHANNEL_ORDER_VERSION
        payload["warmup_rule"] = "ceil(5*sigma_tau_frames)"
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


class CVScheme(BaseModel):
    kind: SchemeKind = "leave-one-out"
    folds: int = Field(default=4, ge=2)
    trials: int = Field(default=1000, ge=1)
    train_fraction: float = Field(default=0.5, gt=0, lt=1)

    @classmethod
    def for_benchmark(cls, benchmark: str) -> "CVScheme":
        """ Standard protocols: UCLA50 by instance, UCLA8/9 random halves, DynTex leave-one-out. """
        key = benchmark.lower()
        if key == "ucla50":
            return cls(kind="k-fold-by-instance", folds=4)
        if key in ("ucla8", "ucla9"):
            return cls(kind="random-split", trials=1000, train_fraction=0.5)
        if key in ("alpha", "beta", "gamma", "dyntex"):
            return cls(kind="leave-one-out")
        raise BadParams(f"Unknown benchmark '{benchmark}'")


class RunConfig(BaseModel):
    descriptor: DescriptorConfig = Field(default_factory=DescriptorConfig)
    manifest: Optional[str] = None
    scheme: CVScheme = Field(default_factory=CVScheme)
    classifier: ClassifierName = "both"
    svm_gamma: float = Field(default=0.1, gt=0)
    svm_c: float = Field(default=10_000.0, gt=0)
    seed: int = 0
    out_dir: str = "strf_out"
    cache_dir: Optional[str] = None
    nested: bool = False
    pca_on_manifest: bool = False  # fit PCA once on every video instead of per training fold

    def canonical_text(self) -> str:
        payload = self.model_dump(mode="json", exclude={"out_dir", "cache_dir", "descriptor"})
        payload["descriptor"] = json.loads(self.descriptor.canonical_text())
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


class ParamGrid(BaseModel):
    """ Descriptor parameter grid; scale pairs are adjacent values of the scale lists. """
    fieldsets: List[FieldSetName] = Field(default_factory=lambda: ["STRF-Njet"])
    n_comp: List[int] = Field(default_factory=lambda: list(range(2, 18)))
    n_bins: List[int] = Field(default_factory=lambda: [2])
    sigma_s_grid: List[float] = Field(default_factory=lambda: [1.0, 2.0, 4.0, 8.0, 16.0])
    sigma_tau_grid: List[float] = Field(default_factory=lambda: [50.0, 100.0, 200.0, 400.0])
    singles: bool = True
    pairs: bool = True

    def scale_combinations(self, fieldset: str) -> List[Tuple[List[float], List[float]]]:
        ss = sorted(self.sigma_s_grid)
        tt = [] if fieldset == "RF-Spatial" else sorted(self.sigma_tau_grid)
        s_single = [[s] for s in ss]
        s_pairs = [[a, b] for a, b in zip(ss, ss[1:])]
        t_single = [[t] for t in tt] or [[]]
        t_pairs = [[a, b] for a, b in zip(tt, tt[1:])] or [[]]
        combos: List[Tuple[List[float], List[float]]] = []
        if self.singles:
            combos += [(s, t) for s in s_single for t in t_single]
        if self.pairs:
            combos += [(s, t) for s in s_pairs for t in t_pairs]
        return combos

    def points(self, base: DescriptorConfig) -> List[DescriptorConfig]:
        out: List[DescriptorConfig] = []
        for fs in self.fieldsets:
            for s, t in self.scale_combinations(fs):
                for nb in self.n_bins:
                    for nc in self.n_comp:
                        out.append(base.model_copy(update={
                            "fieldset": fs, "sigma_s": list(s), "sigma_tau": list(t),
                            "n_comp": nc, "n_bins": nb,
                        }))
        return out


class SynthSpec(BaseModel):
    kind: SynthKind = "translating-sine"
    width: int = Field(default=64, gt=0)
    height: int = Field(default=64, gt=0)
    frames: int = Field(default=100, gt=0)
    fps: float = Field(default=25.0, gt=0)
    wavelength: float = 8.0  # px
    velocity: float = 1.0  # px/frame, along x
    flicker_period: int = 8  # frames
    noise_smoothing: float = 1.0  # px; 0 gives white noise
    seed: int = 0


class ManifestEntry(BaseModel):
    path: str
    label: str
    instance: str
    crop: Optional[Tuple[int, int, int, int]] = None  # x, y, w, h


class DatasetManifest(BaseModel):
    name: str
    fps: Optional[float] = None
    entries: List[ManifestEntry]
    classes: List[str]
    instances: List[str]

    def class_index(self, label: str) -> int:
        return self.classes.index(label)

    def instance_index(self, instance: str) -> int:
        return self.instances.index(instance)

    def video_records(self) -> List["VideoRecord"]:
        return [VideoRecord(video_id=i, label=e.label, label_index=self.class_index(e.label), instance=e.instance)
                for i, e in enumerate(self.entries)]


class VideoRecord(BaseModel):
    """ What a cross-validation split needs to know about one video. """
    video_id: int
    label: str
    label_index: int
    instance: str = ""
