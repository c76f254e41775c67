# app/main.py
"""Command-line front end: extract, fit-pca, eval, tune, synth, report.

    python -m app.main eval --manifest ucla50.tsv --preset appendix-b:ucla50-svm --out runs/ucla50
"""
import argparse
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from app.core.config import logger, settings
from app.core.exceptions import BadParams, StrfError
from app.core.presets import get_preset
from app.main_processor import (
    FoldDescriptors,
    extract_descriptors,
    fit_pca_for_manifest,
    mean_nonempty,
)
from app.models.data_models import CVScheme, DescriptorConfig, ParamGrid, RunConfig, SynthSpec
from app.processing.rfields import FIELDSET_CHANNELS
from app.processing.synth import synth_texture
from app.services.classify import LabeledDescriptor
from app.services.evaluation import (
    aggregate_results,
    grid_search,
    nested_cv,
    result_rows,
    run_cv,
    size_vs_accuracy,
    write_confusion_csv,
    write_results_csv,
)
from app.storage.descriptor_store import DescriptorCache, save_descriptor, save_pca
from app.storage.manifest import load_manifest
from app.storage.video_io import write_raw

SCHEME_ALIASES = {"loo": "leave-one-out", "leave-one-out": "leave-one-out", "k-fold": "k-fold-by-instance",
                  "k-fold-by-instance": "k-fold-by-instance", "random-split": "random-split"}


# --- Argument parsing ------------------------------------------------------

def _floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of numbers, got '{text}'") from e


def _int_range(text: str) -> List[int]:
    try:
        if "-" in text:
            lo, hi = (int(v) for v in text.split("-", 1))
            return list(range(lo, hi + 1))
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected 'a-b' or a comma-separated list, got '{text}'") from e


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("descriptor")
    g.add_argument("--manifest", help="tab-separated dataset manifest")
    g.add_argument("--preset", help="named parameter preset, e.g. appendix-b:ucla50-svm")
    g.add_argument("--fieldset", choices=["RF-Spatial", "STRF-Njet", "STRF-RotInv", "STRF-Njet-previous"])
    g.add_argument("--sigma-s", type=_floats, help="spatial scales σ_s in pixels, comma list")
    g.add_argument("--sigma-tau", type=_floats, help="temporal scales σ_τ in ms, comma list")
    g.add_argument("--ncomp", type=int, help="number of principal components")
    g.add_argument("--nbins", type=int, help="bins per component")
    g.add_argument("--binary", action="store_true", help="binary histograms (2 bins, sign threshold)")
    g.add_argument("--threshold-rule", choices=["zero", "mean"])
    g.add_argument("--d", type=float, help="bin range half-width in standard deviations (default 5)")
    g.add_argument("--c", type=float, help="distribution parameter of the temporal cascade (default 2)")
    g.add_argument("--K", type=int, help="number of temporal cascade stages (default 7)")
    g.add_argument("--tau-distribution", choices=["linear-in-c", "quadratic-in-c"])
    g.add_argument("--gamma-s", type=float)
    g.add_argument("--gamma-tau", type=float)
    g.add_argument("--fps", type=float, help="override the frame rate used for ms → frames conversion")
    g.add_argument("--precision", choices=["float32", "float64"])
    g.add_argument("--border-margin", type=int)
    g.add_argument("--window", type=int, help="frames per descriptor (windowed protocol)")

    e = common.add_argument_group("evaluation")
    e.add_argument("--scheme", choices=sorted(SCHEME_ALIASES))
    e.add_argument("--benchmark", choices=["ucla8", "ucla9", "ucla50", "alpha", "beta", "gamma", "dyntex"])
    e.add_argument("--folds", type=int)
    e.add_argument("--trials", type=int)
    e.add_argument("--train-fraction", type=float)
    e.add_argument("--classifier", choices=["svm", "nn", "both"])
    e.add_argument("--svm-gamma", type=float, help="χ² kernel width (default 0.1)")
    e.add_argument("--svm-c", type=float, help="soft-margin constant (default 10000)")
    e.add_argument("--nested", action="store_true", help="nested cross-validation over the tuning grid")
    e.add_argument("--pca-on-manifest", action="store_true",
                   help="fit PCA once on all manifest videos, test folds included (default: per training fold)")
    e.add_argument("--seed", type=int)

    o = common.add_argument_group("output")
    o.add_argument("--cache-dir", help=f"artifact cache (default {settings.cache_dir})")
    o.add_argument("--out", help="output directory")
    o.add_argument("--workers", type=int, help="worker processes")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="strf", description=settings.SERVICE_NAME)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("extract", parents=[common], help="compute descriptors for every manifest video")
    sub.add_parser("fit-pca", parents=[common], help="fit the PCA model on manifest videos")
    sub.add_parser("eval", parents=[common], help="cross-validated classification accuracy")

    tune = sub.add_parser("tune", parents=[common], help="grid search over descriptor parameters")
    tune.add_argument("--ncomp-range", type=_int_range, default=list(range(2, 18)))
    tune.add_argument("--nbins-grid", type=_int_range)
    tune.add_argument("--grid", choices=["singles", "pairs", "both"], default="both")
    tune.add_argument("--fieldsets", type=lambda s: [v.strip() for v in s.split(",") if v.strip()])
    tune.add_argument("--sigma-s-grid", type=_floats)
    tune.add_argument("--sigma-tau-grid", type=_floats)

    synth = sub.add_parser("synth", parents=[common], help="write a synthetic texture as a raw container")
    synth.add_argument("--kind", choices=["translating-sine", "flicker", "advected-noise", "static-noise"],
                       default="translating-sine")
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--height", type=int, default=64)
    synth.add_argument("--frames", type=int, default=100)
    synth.add_argument("--wavelength", type=float, default=8.0)
    synth.add_argument("--velocity", type=float, default=1.0)
    synth.add_argument("--flicker-period", type=int, default=8)
    synth.add_argument("--noise-smoothing", type=float, default=1.0)
    synth.add_argument("--output", required=True, help="raw container path")

    report = sub.add_parser("report", parents=[common], help="aggregate result tables")
    report.add_argument("--results", nargs="+", required=True, help="results CSV files")
    report.add_argument("--size-vs-accuracy", action="store_true")
    return parser


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """Preset first (if any), then explicit flags."""
    descriptor: Dict = {}
    run: Dict = {}
    scheme: Optional[CVScheme] = None
    if args.preset:
        preset = get_preset(args.preset)
        descriptor.update(preset.descriptor().model_dump())
        run["classifier"] = preset.classifier
        scheme = preset.scheme()
    if args.benchmark:
        scheme = CVScheme.for_benchmark(args.benchmark)

    mapping = {"fieldset": "fieldset", "sigma_s": "sigma_s", "sigma_tau": "sigma_tau", "ncomp": "n_comp",
               "nbins": "n_bins", "threshold_rule": "threshold_rule", "d": "d", "c": "c", "K": "K",
               "tau_distribution": "tau_distribution", "gamma_s": "gamma_s", "gamma_tau": "gamma_tau",
               "fps": "fps", "precision": "precision", "border_margin": "border_margin", "window": "window"}
    for flag, field in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            descriptor[field] = value
    if args.binary:
        if args.nbins not in (None, 2):
            raise BadParams("--binary conflicts with --nbins other than 2")
        descriptor["n_bins"] = 2

    scheme = scheme or CVScheme()
    updates = {k: getattr(args, k) for k in ("folds", "trials", "train_fraction") if getattr(args, k) is not None}
    if args.scheme:
        updates["kind"] = SCHEME_ALIASES[args.scheme]
    scheme = CVScheme(**{**scheme.model_dump(), **updates})

    for flag, field in (("classifier", "classifier"), ("svm_gamma", "svm_gamma"), ("svm_c", "svm_c"),
                        ("seed", "seed"), ("out", "out_dir"), ("cache_dir", "cache_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            run[field] = value
    return RunConfig(descriptor=DescriptorConfig(**descriptor), manifest=args.manifest, scheme=scheme,
                     nested=args.nested, pca_on_manifest=args.pca_on_manifest, **run)


# --- Commands --------------------------------------------------------------

def _require_manifest(run: RunConfig):
    if not run.manifest:
        raise BadParams("--manifest is required for this command")
    return load_manifest(run.manifest)


def _cache(run: RunConfig) -> DescriptorCache:
    return DescriptorCache(run.cache_dir or settings.cache_dir)


def _classifiers(run: RunConfig) -> List[str]:
    return ["nn", "svm"] if run.classifier == "both" else [run.classifier]


def cmd_fit_pca(run: RunConfig) -> int:
    manifest = _require_manifest(run)
    model = fit_pca_for_manifest(manifest, run.descriptor, seed=run.seed, cache=_cache(run))
    path = Path(run.out_dir) / "pca.strfpca"
    save_pca(model, path)
    print(f"pca\t{path}\t{model.input_dim}\t{model.max_components}")
    return 0


def _descriptors(run: RunConfig, n_comps: Optional[Sequence[int]] = None) -> Tuple[object, Dict[int, List[LabeledDescriptor]]]:
    manifest = _require_manifest(run)
    cache = _cache(run)
    model = fit_pca_for_manifest(manifest, run.descriptor, seed=run.seed, cache=cache)
    return manifest, extract_descriptors(manifest, run.descriptor, model, n_comps=n_comps, cache=cache)


def cmd_extract(run: RunConfig) -> int:
    manifest, by_m = _descriptors(run)
    dataset = by_m[run.descriptor.n_comp]
    out = Path(run.out_dir) / "descriptors"
    digest = run.descriptor.digest()
    rows = []
    for item in dataset:
        name = f"{item.video_id:05d}" + ("" if item.window is None else f"_w{item.window:04d}")
        path = out / f"{name}.strfhist"
        save_descriptor(item.histogram, path, digest, run.descriptor.binary)
        rows.append({"video_id": item.video_id, "window": item.window, "path": manifest.entries[item.video_id].path,
                     "label": item.label, "instance": item.instance, "n_nonempty": item.n_nonempty,
                     "descriptor": str(path)})
    index = pd.DataFrame(rows)
    index.to_csv(out / "index.csv", index=False)
    logger.success(f"Wrote {len(rows)} descriptor(s) to {out}")
    print(f"descriptors\t{out}\t{len(rows)}")
    return 0


def _write_report(path: Path, run: RunConfig, lines: List[str]) -> None:
    header = [f"# {settings.SERVICE_NAME}", f"config_digest\t{run.digest()}", f"seed\t{run.seed}",
              f"scheme\t{run.scheme.kind}", f"config\t{run.canonical_text()}"]
    path.write_text("\n".join(header + lines) + "\n", encoding="utf-8")


def cmd_eval(run: RunConfig) -> int:
    start = time.time()
    manifest = _require_manifest(run)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = run.descriptor.digest()
    if run.pca_on_manifest:
        dataset = _descriptors(run)[1][run.descriptor.n_comp]
        fold_data = None
    else:
        dataset = manifest.video_records()
        fold_data = FoldDescriptors(manifest, run.descriptor, seed=run.seed)

    groups: Dict[Tuple, FoldDescriptors] = {}
    rows, lines = [], []
    for classifier in _classifiers(run):
        result = run_cv(dataset, run.scheme, classifier, run.svm_gamma, run.svm_c, run.seed,
                        class_names=manifest.classes, fold_data=fold_data)
        size = fold_data.mean_nonempty() if fold_data is not None else mean_nonempty(dataset)
        rows += result_rows(result, run.descriptor, digest, size)
        write_confusion_csv(result, out / f"confusion_{classifier}.csv")
        lines.append(f"{classifier}\taccuracy\t{result.mean_accuracy:.6f}\tstd\t{result.std_accuracy:.6f}"
                     f"\ttrials\t{len(result.accuracies)}\tn_train_per_class\t{result.n_train_per_class}")
        print(f"{classifier}\t{result.mean_accuracy:.4f}")
        if run.nested:
            points = _tuning_points(run)
            if run.pca_on_manifest:
                accuracy, chosen = nested_cv(points, lambda c: _grid_dataset(run, manifest, c), run.scheme,
                                             classifier, run.svm_gamma, run.svm_c, run.seed)
            else:
                n_comps = sorted({p.n_comp for p in points})

                def per_fold(config: DescriptorConfig, train: np.ndarray) -> List[LabeledDescriptor]:
                    return _fold_group(run, manifest, config, n_comps, groups).select(train, config.n_comp)

                accuracy, chosen = nested_cv(points, None, run.scheme, classifier, run.svm_gamma, run.svm_c,
                                             run.seed, fold_data=per_fold, records=manifest.video_records())
            lines.append(f"{classifier}\tnested_accuracy\t{accuracy:.6f}\tselected\t{','.join(d[:12] for d in chosen)}")
            print(f"{classifier}\tnested\t{accuracy:.4f}")
    lines.append(f"pca_fitted_on\t{'manifest' if run.pca_on_manifest else 'training folds'}")
    lines.append(f"mean_nonempty\t{size:.2f}")
    write_results_csv(rows, out / "results.csv")
    _write_report(out / "report.txt", run, lines)
    logger.info(f"Evaluation finished in {time.time() - start:.2f}s; results in {out}")
    return 0


# --- Tuning ----------------------------------------------------------------

_grid_memo: Dict[Tuple, Dict[int, List[LabeledDescriptor]]] = {}
_fold_memo: Dict[Tuple, FoldDescriptors] = {}


def _group_key(run: RunConfig, manifest, config: DescriptorConfig) -> Tuple:
    videos = tuple(e.path for e in manifest.entries)
    return videos, run.seed, config.model_copy(update={"n_comp": 1}).digest()


def _fold_group(run: RunConfig, manifest, config: DescriptorConfig, n_comps: Sequence[int],
                memo: Optional[Dict[Tuple, FoldDescriptors]] = None) -> FoldDescriptors:
    """Per-fold descriptors of one scale group. The shared memo keeps a single group alive."""
    key = _group_key(run, manifest, config)
    if memo is None:
        memo = _fold_memo
        if key not in memo:
            memo.clear()
    if key not in memo:
        wanted = sorted(set(n_comps) | {config.n_comp})
        memo[key] = FoldDescriptors(manifest, config, seed=run.seed, n_comps=wanted)
    return memo[key]


def _grid_dataset(run: RunConfig, manifest, config: DescriptorConfig, n_comps: Optional[Sequence[int]] = None):
    """Descriptors of one grid point; all n_comp values of a scale group come from one filtering pass."""
    key = _group_key(run, manifest, config)
    if key not in _grid_memo:
        _grid_memo.clear()
        cache = _cache(run)
        model = fit_pca_for_manifest(manifest, config, seed=run.seed, cache=cache)
        wanted = [m for m in (n_comps or [config.n_comp]) if m <= model.max_components]
        if config.n_comp not in wanted:
            wanted.append(config.n_comp)
        _grid_memo[key] = extract_descriptors(manifest, config, model, n_comps=wanted, cache=cache)
    groups = _grid_memo[key]
    if config.n_comp not in groups:
        cache = _cache(run)
        model = fit_pca_for_manifest(manifest, config, seed=run.seed, cache=cache)
        groups.update(extract_descriptors(manifest, config, model, n_comps=[config.n_comp], cache=cache))
    return groups[config.n_comp]


def _tuning_points(run: RunConfig, args: Optional[argparse.Namespace] = None) -> List[DescriptorConfig]:
    grid = ParamGrid()
    if args is not None:
        grid = ParamGrid(
            fieldsets=args.fieldsets or [run.descriptor.fieldset],
            n_comp=args.ncomp_range,
            n_bins=args.nbins_grid or [run.descriptor.n_bins],
            sigma_s_grid=args.sigma_s_grid or grid.sigma_s_grid,
            sigma_tau_grid=args.sigma_tau_grid or grid.sigma_tau_grid,
            singles=args.grid in ("singles", "both"),
            pairs=args.grid in ("pairs", "both"),
        )
    else:
        grid = ParamGrid(fieldsets=[run.descriptor.fieldset], n_bins=[run.descriptor.n_bins])
    points = []
    for point in grid.points(run.descriptor):
        if point.n_comp <= len(FIELDSET_CHANNELS[point.fieldset]) * len(point.scale_grid()):
            points.append(point)
    return points


def cmd_tune(run: RunConfig, args: argparse.Namespace) -> int:
    manifest = _require_manifest(run)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = _tuning_points(run, args)
    logger.info(f"Tuning over {len(points)} grid point(s)")

    frames = []
    for classifier in _classifiers(run):
        scope = "_manifest-pca" if run.pca_on_manifest else ""
        progress_path = out / f"tune_progress_{classifier}{scope}.json"
        done = json.loads(progress_path.read_text(encoding="utf-8")) if progress_path.exists() else {}

        def record(config: DescriptorConfig, accuracy: float, _path=progress_path, _done=done) -> None:
            _done[config.digest()] = accuracy
            _path.write_text(json.dumps(_done, sort_keys=True, indent=1), encoding="utf-8")

        def build(config: DescriptorConfig) -> List[LabeledDescriptor]:
            return _grid_dataset(run, manifest, config, n_comps=args.ncomp_range)

        def per_fold(config: DescriptorConfig, train: np.ndarray) -> List[LabeledDescriptor]:
            return _fold_group(run, manifest, config, args.ncomp_range).select(train, config.n_comp)

        if run.pca_on_manifest:
            table = grid_search(points, build, run.scheme, classifier, run.svm_gamma, run.svm_c, run.seed,
                                done=done, on_result=record)
        else:
            table = grid_search(points, None, run.scheme, classifier, run.svm_gamma, run.svm_c, run.seed,
                                done=done, on_result=record, fold_data=per_fold, records=manifest.video_records())
        frames.append(table)
        best = table.iloc[0]
        best_config = next(p for p in points if p.digest() == best["config_digest"])
        (out / f"best_config_{classifier}.json").write_text(
            json.dumps({"accuracy": float(best["accuracy"]), "classifier": classifier,
                        "scheme": run.scheme.kind, "descriptor": best_config.model_dump(mode="json")},
                       sort_keys=True, indent=2), encoding="utf-8")
        print(f"{classifier}\tbest\t{best['accuracy']:.4f}\t{best['fieldset']}\tn_comp={best['n_comp']}"
              f"\tsigma_s={best['sigma_s']}\tsigma_tau={best['sigma_tau']}")
    pd.concat(frames, ignore_index=True).to_csv(out / "tune_results.csv", index=False, float_format="%.6f")
    return 0


def cmd_synth(run: RunConfig, args: argparse.Namespace) -> int:
    spec = SynthSpec(kind=args.kind, width=args.width, height=args.height, frames=args.frames,
                     fps=args.fps or settings.default_fps, wavelength=args.wavelength, velocity=args.velocity,
                     flicker_period=args.flicker_period, noise_smoothing=args.noise_smoothing, seed=run.seed)
    count = write_raw(synth_texture(spec), Path(args.output))
    print(f"synth\t{args.output}\t{count}")
    return 0


def cmd_report(run: RunConfig, args: argparse.Namespace) -> int:
    table = aggregate_results([Path(p) for p in args.results])
    if args.size_vs_accuracy:
        table = size_vs_accuracy(table)
    if run.out_dir and args.out:
        out = Path(run.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / ("size_vs_accuracy.csv" if args.size_vs_accuracy else "report.csv"),
                     index=False, float_format="%.6f")
    print(table.to_string(index=False))
    return 0


# --- Entry point -----------------------------------------------------------

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        run = build_run_config(args)
        if args.workers:
            settings.workers = args.workers
        logger.debug(f"Running '{args.command}' with config {run.digest()[:12]}")
        if args.command == "fit-pca":
            return cmd_fit_pca(run)
        if args.command == "extract":
            return cmd_extract(run)
        if args.command == "eval":
            return cmd_eval(run)
        if args.command == "tune":
            return cmd_tune(run, args)
        if args.command == "synth":
            return cmd_synth(run, args)
        return cmd_report(run, args)
    except StrfError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f'error code={e.code} message="{e}"', file=sys.stderr)
        return 2
    except ValidationError as e:
        message = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        print(f'error code=BadParams message="{message}"', file=sys.stderr)
        return 2
    except Exception as e:
        logger.exception(f"Unexpected error in '{args.command}': {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
