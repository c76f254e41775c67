# app/core/presets.py
"""Best-performing published parameter settings, one preset per (benchmark, classifier, field set).

Names are ``appendix-b:<benchmark>-<classifier>-<fieldset>``; the STRF-Njet
rows are also reachable without the field-set suffix. All presets use binary
histograms.
"""
from typing import Dict, List, Tuple

from pydantic import BaseModel

from app.core.exceptions import BadParams
from app.models.data_models import CVScheme, DescriptorConfig

PREFIX = "appendix-b:"
BENCHMARKS = ("ucla8", "ucla9", "ucla50", "alpha", "beta", "gamma")
_SLUGS = {"STRF-Njet": "njet", "STRF-RotInv": "rotinv", "RF-Spatial": "spatial", "STRF-Njet-previous": "njet-previous"}


class Preset(BaseModel):
    benchmark: str
    classifier: str
    fieldset: str
    n_comp: int
    sigma_s: List[float]
    sigma_tau: List[float]
    n_bins: int = 2

    def descriptor(self) -> DescriptorConfig:
        return DescriptorConfig(fieldset=self.fieldset, sigma_s=self.sigma_s, sigma_tau=self.sigma_tau,
                                n_comp=self.n_comp, n_bins=self.n_bins)

    def scheme(self) -> CVScheme:
        return CVScheme.for_benchmark(self.benchmark)


# benchmark -> (svm row, nn row); row = (n_comp, σ_s list, σ_τ list in ms)
_Row = Tuple[int, List[float], List[float]]
_TABLES: Dict[str, Dict[str, Tuple[_Row, _Row]]] = {
    "STRF-Njet": {
        "ucla8": ((16, [4, 8], [100, 200]), (16, [4], [50])),
        "ucla9": ((14, [1, 2], [50, 100]), (14, [1], [50])),
        "ucla50": ((13, [4, 8], [50, 100]), (12, [8, 16], [50, 100])),
        "alpha": ((17, [2], [200]), (11, [1], [400])),
        "beta": ((17, [8], [200]), (13, [2, 4], [200, 400])),
        "gamma": ((16, [4, 8], [50, 100]), (13, [2, 4], [200, 400])),
    },
    "STRF-RotInv": {
        "ucla8": ((14, [4, 8], [50, 100]), (13, [4, 8], [50, 100])),
        "ucla9": ((12, [4, 8], [50, 100]), (13, [1, 2], [100, 200])),
        "ucla50": ((6, [4, 8], [50, 100]), (5, [4, 8], [50, 100])),
        "alpha": ((5, [8, 16], [100, 200]), (5, [8, 16], [100, 200])),
        "beta": ((15, [4, 8], [200, 400]), (17, [8, 16], [100, 200])),
        "gamma": ((15, [2, 4], [100, 200]), (16, [2, 4], [50, 100])),
    },
    "RF-Spatial": {
        "ucla8": ((10, [8, 16], []), (9, [8, 16], [])),
        "ucla9": ((9, [4, 8], []), (6, [4, 8], [])),
        "ucla50": ((5, [4, 8], []), (5, [4, 8], [])),
        "alpha": ((8, [8, 16], []), (5, [4, 8], [])),
        "beta": ((10, [2, 4], []), (10, [4, 8], [])),
        "gamma": ((10, [2, 4], []), (10, [2, 4], [])),
    },
    "STRF-Njet-previous": {
        **{b: ((15, [1, 2], [50, 100]), (15, [1, 2], [50, 100])) for b in ("ucla8", "ucla9", "ucla50")},
        **{b: ((15, [2, 4], [200, 400]), (15, [2, 4], [200, 400])) for b in ("alpha", "beta", "gamma")},
    },
}


def _build() -> Dict[str, Preset]:
    presets: Dict[str, Preset] = {}
    for fieldset, table in _TABLES.items():
        for benchmark, rows in table.items():
            for classifier, (n_comp, sigma_s, sigma_tau) in zip(("svm", "nn"), rows):
                preset = Preset(benchmark=benchmark, classifier=classifier, fieldset=fieldset, n_comp=n_comp,
                                sigma_s=[float(s) for s in sigma_s], sigma_tau=[float(t) for t in sigma_tau])
                presets[f"{PREFIX}{benchmark}-{classifier}-{_SLUGS[fieldset]}"] = preset
                if fieldset == "STRF-Njet":
                    presets[f"{PREFIX}{benchmark}-{classifier}"] = preset
    return presets


PRESETS: Dict[str, Preset] = _build()


def get_preset(name: str) -> Preset:
    key = name.strip().lower()
    if not key.startswith(PREFIX):
        key = PREFIX + key
    if key not in PRESETS:
        raise BadParams(f"Unknown preset '{name}'; try e.g. {PREFIX}ucla50-svm")
    return PRESETS[key]
