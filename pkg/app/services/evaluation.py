# app/services/evaluation.py
"""Cross-validation protocols, grid search and result tables."""
import time
from functools import partial
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict
from sklearn.metrics import confusion_matrix

from app.core.config import logger
from app.core.exceptions import BadParams, EmptyTrainingSet, SchemeMismatch, SingleClassTraining
from app.models.data_models import CVScheme, DescriptorConfig, VideoRecord
from app.services.classify import Chi2SVM, LabeledDescriptor, chi2_distance_matrix, nn_predict

Split = Tuple[np.ndarray, np.ndarray]  # (train video ids, test video ids)
VideoLike = Union[LabeledDescriptor, VideoRecord]
FoldData = Callable[[np.ndarray], Sequence[LabeledDescriptor]]  # train video ids -> descriptors of every video

RESULT_COLUMNS = [
    "config_digest", "scheme", "classifier", "trial", "accuracy", "n_test",
    "fieldset", "n_comp", "n_bins", "sigma_s", "sigma_tau", "window", "mean_nonempty", "seed",
]


class CVResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    scheme: str
    classifier: str
    accuracies: List[float]
    confusion: np.ndarray  # summed over trials; rows true, columns predicted
    class_names: List[str]
    n_train_per_class: List[int]
    seed: int

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std_accuracy(self) -> float:
        return float(np.std(self.accuracies))


# --- Splits ----------------------------------------------------------------

def _videos(dataset: Sequence[VideoLike]) -> pd.DataFrame:
    """One row per video, in video-id order."""
    frame = pd.DataFrame({
        "video_id": [d.video_id for d in dataset],
        "label_index": [d.label_index for d in dataset],
        "instance": [d.instance for d in dataset],
    })
    return frame.drop_duplicates("video_id").sort_values("video_id", kind="stable").reset_index(drop=True)


def cv_splits(dataset: Sequence[VideoLike], scheme: CVScheme, seed: int = 0) -> List[List[Split]]:
    """Video-level train/test partitions: one list of folds per trial."""
    videos = _videos(dataset)
    ids = videos["video_id"].to_numpy()

    if scheme.kind == "leave-one-out":
        if ids.size < 2:
            raise SchemeMismatch("Leave-one-out needs at least two videos")
        return [[(np.delete(ids, i), ids[i:i + 1]) for i in range(ids.size)]]

    if scheme.kind == "k-fold-by-instance":
        groups = [g["video_id"].to_numpy() for _, g in videos.groupby("instance", sort=False)]
        sizes = {g.size for g in groups}
        if len(sizes) != 1:
            raise SchemeMismatch(f"Instance groups have unequal sizes {sorted(sizes)}")
        size = sizes.pop()
        if size != scheme.folds:
            raise SchemeMismatch(f"{scheme.folds}-fold split needs {scheme.folds} videos per instance, found {size}")
        folds = []
        for f in range(size):
            test = np.array(sorted(g[f] for g in groups))
            folds.append((np.setdiff1d(ids, test), test))
        return [folds]

    trials = []
    for trial in range(scheme.trials):
        rng = np.random.default_rng([seed, trial])
        train_parts = []
        for _, group in videos.groupby("label_index", sort=True):
            members = group["video_id"].to_numpy()
            n_train = max(1, int(np.floor(members.size * scheme.train_fraction)))
            train_parts.append(rng.permutation(members)[:n_train])
        train = np.sort(np.concatenate(train_parts))
        trials.append([(train, np.setdiff1d(ids, train))])
    return trials


# --- Cross-validation ------------------------------------------------------

def _fold_predictions(classifier: str, data: Sequence[LabeledDescriptor], labels: np.ndarray, video_ids: np.ndarray,
                      train: np.ndarray, test: np.ndarray, gamma: float, C: float,
                      distances: Optional[np.ndarray] = None) -> np.ndarray:
    """Predicted labels of the test descriptors; distances, when given, covers all of data."""
    if distances is not None:
        cross = distances[np.ix_(test, train)]
    else:
        cross = chi2_distance_matrix([data[i].histogram for i in test], [data[i].histogram for i in train])
    if classifier == "nn":
        return nn_predict(cross, labels[train], video_ids[train])
    if distances is not None:
        inner = distances[np.ix_(train, train)]
    else:
        inner = chi2_distance_matrix([data[i].histogram for i in train])
    machine = Chi2SVM(C=C).fit(np.exp(-gamma * inner), labels[train])
    return machine.predict(np.exp(-gamma * cross))


def run_cv(dataset: Sequence[VideoLike], scheme: CVScheme, classifier: str = "nn",
           gamma: float = 0.1, C: float = 10_000.0, seed: int = 0,
           class_names: Optional[List[str]] = None, distances: Optional[np.ndarray] = None,
           fold_data: Optional[FoldData] = None) -> CVResult:
    """Accuracy of one classifier under one protocol.

    Splits are made over videos; every descriptor of a test video is classified
    on its own, so windowed descriptors count individually.

    With fold_data, dataset only names the videos to split (descriptors or
    VideoRecords) and each fold classifies fold_data(train video ids), so
    anything fitted while building those descriptors never sees a test video.
    """
    if classifier not in ("nn", "svm"):
        raise BadParams(f"Unknown classifier '{classifier}'")
    if not dataset:
        raise EmptyTrainingSet("Cross-validation over an empty dataset")
    labels = np.array([d.label_index for d in dataset])
    video_ids = np.array([d.video_id for d in dataset])
    n_classes = int(labels.max()) + 1
    if np.unique(labels).size < 2:
        raise SingleClassTraining("Cross-validation needs at least two classes")
    if class_names is None:
        names = {d.label_index: d.label for d in dataset}
        class_names = [names.get(i, str(i)) for i in range(n_classes)]

    start = time.time()
    if fold_data is None and distances is None:
        distances = chi2_distance_matrix([d.histogram for d in dataset])

    splits = cv_splits(dataset, scheme, seed)
    accuracies: List[float] = []
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    n_train_per_class: List[int] = []
    for trial, folds in enumerate(splits):
        y_true, y_pred = [], []
        for train_videos, test_videos in folds:
            data, fold_labels, fold_ids, fold_distances = dataset, labels, video_ids, distances
            if fold_data is not None:
                data = fold_data(train_videos)
                fold_labels = np.array([d.label_index for d in data])
                fold_ids = np.array([d.video_id for d in data])
                fold_distances = None
            train = np.flatnonzero(np.isin(fold_ids, train_videos))
            test = np.flatnonzero(np.isin(fold_ids, test_videos))
            if test.size == 0:
                continue
            if train.size == 0:
                raise EmptyTrainingSet(f"Trial {trial} has an empty training fold")
            pred = _fold_predictions(classifier, data, fold_labels, fold_ids, train, test, gamma, C, fold_distances)
            y_true.append(fold_labels[test])
            y_pred.append(pred)
            if trial == 0 and not n_train_per_class:
                n_train_per_class = np.bincount(fold_labels[train], minlength=n_classes).tolist()
        y_true_all = np.concatenate(y_true)
        y_pred_all = np.concatenate(y_pred)
        accuracies.append(float(np.mean(y_true_all == y_pred_all)))
        confusion += confusion_matrix(y_true_all, y_pred_all, labels=list(range(n_classes)))

    logger.info(f"{scheme.kind}/{classifier}: mean accuracy {np.mean(accuracies):.4f} over "
                f"{len(accuracies)} trial(s) in {time.time() - start:.2f}s")
    return CVResult(scheme=scheme.kind, classifier=classifier, accuracies=accuracies, confusion=confusion,
                    class_names=class_names, n_train_per_class=n_train_per_class, seed=seed)


# --- Grid search -----------------------------------------------------------

def _scale_key(config: DescriptorConfig) -> Tuple:
    return (tuple(config.sigma_s), tuple(config.sigma_tau))


def rank_results(table: pd.DataFrame) -> pd.DataFrame:
    """Best accuracy first; ties to fewer components, then smaller scales."""
    keys = [(-acc, n_comp, (tuple(s), tuple(t))) for acc, n_comp, s, t in
            zip(table["accuracy"], table["n_comp"], table["sigma_s"], table["sigma_tau"])]
    order = sorted(range(len(keys)), key=keys.__getitem__)
    return table.iloc[order].reset_index(drop=True)


def grid_search(points: Sequence[DescriptorConfig],
                build: Optional[Callable[[DescriptorConfig], List[LabeledDescriptor]]],
                scheme: CVScheme, classifier: str = "nn", gamma: float = 0.1, C: float = 10_000.0,
                seed: int = 0, done: Optional[Dict[str, float]] = None,
                on_result: Optional[Callable[[DescriptorConfig, float], None]] = None,
                fold_data: Optional[Callable[[DescriptorConfig, np.ndarray], Sequence[LabeledDescriptor]]] = None,
                records: Optional[Sequence[VideoLike]] = None) -> pd.DataFrame:
    """CV accuracy at every grid point, ranked.

    done maps config digests to accuracies already known, which are reused
    instead of recomputed. With fold_data, each point is scored by run_cv
    over records with descriptors rebuilt per fold; build is not called.
    """
    if not points:
        raise BadParams("Parameter grid is empty")
    if fold_data is not None and not records:
        raise BadParams("Per-fold descriptors need the video records to split")
    done = dict(done or {})
    rows = []
    for i, config in enumerate(points, start=1):
        digest = config.digest()
        if digest in done:
            accuracy = done[digest]
            logger.debug(f"[{i}/{len(points)}] {digest[:12]} reused: {accuracy:.4f}")
        else:
            if fold_data is None:
                result = run_cv(build(config), scheme, classifier, gamma, C, seed)
            else:
                result = run_cv(records, scheme, classifier, gamma, C, seed, fold_data=partial(fold_data, config))
            accuracy = result.mean_accuracy
            logger.info(f"[{i}/{len(points)}] {config.fieldset} n_comp={config.n_comp} σ_s={config.sigma_s} "
                        f"σ_τ={config.sigma_tau}: {accuracy:.4f}")
            if on_result is not None:
                on_result(config, accuracy)
        rows.append({
            "config_digest": digest, "fieldset": config.fieldset, "n_comp": config.n_comp,
            "n_bins": config.n_bins, "sigma_s": list(config.sigma_s), "sigma_tau": list(config.sigma_tau),
            "classifier": classifier, "scheme": scheme.kind, "accuracy": accuracy,
        })
    return rank_results(pd.DataFrame(rows))


def nested_cv(points: Sequence[DescriptorConfig],
              build: Optional[Callable[[DescriptorConfig], List[LabeledDescriptor]]],
              scheme: CVScheme, classifier: str = "nn", gamma: float = 0.1, C: float = 10_000.0,
              seed: int = 0,
              fold_data: Optional[Callable[[DescriptorConfig, np.ndarray], Sequence[LabeledDescriptor]]] = None,
              records: Optional[Sequence[VideoLike]] = None) -> Tuple[float, List[str]]:
    """Outer-fold accuracy with parameters chosen by an inner search on the training videos only.

    With fold_data, every point's descriptors are rebuilt from each outer
    fold's training videos and the inner search runs on those. Returns the
    mean outer accuracy and the digest selected in each outer fold.
    """
    if not points:
        raise BadParams("Parameter grid is empty")
    datasets: Dict[str, Sequence[LabeledDescriptor]] = {}
    distances: Dict[str, np.ndarray] = {}
    if fold_data is None:
        datasets = {p.digest(): build(p) for p in points}
        distances = {k: chi2_distance_matrix([d.histogram for d in v]) for k, v in datasets.items()}
        reference: Sequence[VideoLike] = datasets[points[0].digest()]
    elif not records:
        raise BadParams("Per-fold descriptors need the video records to split")
    else:
        reference = records
    outer = cv_splits(reference, scheme, seed)
    inner_scheme = CVScheme(kind="leave-one-out") if scheme.kind == "k-fold-by-instance" else scheme.model_copy(
        update={"trials": min(scheme.trials, 10)})

    accuracies, chosen = [], []
    for folds in outer:
        correct, total = 0, 0
        for train_videos, test_videos in folds:
            if fold_data is not None:
                datasets = {p.digest(): fold_data(p, train_videos) for p in points}
            scores = []
            for point in points:
                key = point.digest()
                data = datasets[key]
                keep = np.flatnonzero(np.isin([d.video_id for d in data], train_videos))
                subset = [data[i] for i in keep]
                inner = distances[key][np.ix_(keep, keep)] if key in distances else None
                result = run_cv(subset, inner_scheme, classifier, gamma, C, seed, distances=inner)
                scores.append((-result.mean_accuracy, point.n_comp, _scale_key(point), key))
            best = min(scores)[3]
            chosen.append(best)
            data = datasets[best]
            ids = np.array([d.video_id for d in data])
            labels = np.array([d.label_index for d in data])
            train = np.flatnonzero(np.isin(ids, train_videos))
            test = np.flatnonzero(np.isin(ids, test_videos))
            pred = _fold_predictions(classifier, data, labels, ids, train, test, gamma, C, distances.get(best))
            correct += int(np.sum(pred == labels[test]))
            total += test.size
        accuracies.append(correct / total)
    logger.info(f"Nested {scheme.kind}/{classifier}: {np.mean(accuracies):.4f}")
    return float(np.mean(accuracies)), chosen


# --- Tables ----------------------------------------------------------------

def result_rows(result: CVResult, config: DescriptorConfig, config_digest: str,
                mean_nonempty: float = float("nan")) -> List[dict]:
    return [{
        "config_digest": config_digest, "scheme": result.scheme, "classifier": result.classifier,
        "trial": trial, "accuracy": accuracy, "n_test": int(result.confusion.sum() // max(len(result.accuracies), 1)),
        "fieldset": config.fieldset, "n_comp": config.n_comp, "n_bins": config.n_bins,
        "sigma_s": ",".join(f"{s:g}" for s in config.sigma_s),
        "sigma_tau": ",".join(f"{t:g}" for t in config.sigma_tau),
        "window": config.window if config.window is not None else 0,
        "mean_nonempty": mean_nonempty, "seed": result.seed,
    } for trial, accuracy in enumerate(result.accuracies)]


def write_results_csv(rows: Iterable[dict], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(list(rows), columns=RESULT_COLUMNS).to_csv(path, index=False, float_format="%.6f")
    return path


def write_confusion_csv(result: CVResult, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(result.confusion, index=result.class_names, columns=result.class_names)
    frame.index.name = "true\\predicted"
    frame.to_csv(path)
    return path


def aggregate_results(paths: Sequence[Path]) -> pd.DataFrame:
    """Mean and spread of accuracy per (config, scheme, classifier) over one or more result files."""
    frames = [pd.read_csv(p) for p in paths]
    if not frames:
        raise BadParams("No result files given")
    table = pd.concat(frames, ignore_index=True)
    keys = ["config_digest", "scheme", "classifier", "fieldset", "n_comp", "n_bins", "sigma_s", "sigma_tau", "window"]
    summary = table.groupby(keys, sort=False, dropna=False).agg(
        accuracy=("accuracy", "mean"), accuracy_std=("accuracy", "std"), trials=("trial", "count"),
        mean_nonempty=("mean_nonempty", "mean"),
    ).reset_index()
    return summary.sort_values(["scheme", "classifier", "accuracy"], ascending=[True, True, False], kind="stable")


def size_vs_accuracy(table: pd.DataFrame) -> pd.DataFrame:
    """Mean non-empty cells and best accuracy per (field set, classifier, n_comp)."""
    return table.groupby(["fieldset", "classifier", "n_comp"], sort=True).agg(
        mean_nonempty=("mean_nonempty", "mean"), accuracy=("accuracy", "max"),
    ).reset_index()
