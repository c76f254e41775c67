# app/services/classify.py
"""χ² distance between histograms, nearest-neighbour and χ²-kernel SVM classifiers."""
import warnings
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from sklearn.exceptions import ConvergenceWarning
from sklearn.svm import SVC

from app.core.config import logger, settings
from app.core.exceptions import BadParams, DimensionMismatch, EmptyTrainingSet, NonConvergence, SingleClassTraining
from app.processing.descriptor import HistogramLike, JointHistogram, as_sparse


class LabeledDescriptor(BaseModel):
    """ One descriptor with its provenance; several share a video_id in the windowed protocol. """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    histogram: JointHistogram
    label: str
    label_index: int
    video_id: int
    instance: str = ""
    window: Optional[int] = None
    n_nonempty: int = 0


# --- Distances -------------------------------------------------------------

def chi2_distance(x: HistogramLike, y: HistogramLike) -> float:
    """Σ (x_i − y_i)² / (x_i + y_i) over cells where x_i + y_i > 0.

    Sparse inputs are walked over the union of their non-empty cells; two
    dense inputs must have equal length.
    """
    if isinstance(x, np.ndarray) and isinstance(y, np.ndarray) and x.size != y.size:
        raise DimensionMismatch(f"Dense histograms differ in length: {x.size} vs {y.size}")
    kx, vx = as_sparse(x)
    ky, vy = as_sparse(y)
    _, ix, iy = np.intersect1d(kx, ky, assume_unique=True, return_indices=True)
    only_x = np.ones(kx.size, dtype=bool)
    only_x[ix] = False
    only_y = np.ones(ky.size, dtype=bool)
    only_y[iy] = False
    a, b = vx[ix], vy[iy]
    common = np.sum((a - b) ** 2 / (a + b))
    return float((vx[only_x].sum() + vy[only_y].sum()) + common)


def chi2_kernel(x: HistogramLike, y: HistogramLike, gamma: float = 0.1) -> float:
    """exp(−γ·χ²(x, y))."""
    if gamma <= 0:
        raise BadParams(f"Kernel width γ must be positive, got {gamma}")
    return float(np.exp(-gamma * chi2_distance(x, y)))


def chi2_distance_matrix(rows: Sequence[HistogramLike], cols: Optional[Sequence[HistogramLike]] = None) -> np.ndarray:
    """Pairwise χ² distances; symmetric with a zero diagonal when cols is None."""
    if cols is None:
        n = len(rows)
        sparse = [as_sparse(h) for h in rows]
        out = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                out[i, j] = out[j, i] = chi2_distance(sparse[i], sparse[j])
        return out
    a = [as_sparse(h) for h in rows]
    b = [as_sparse(h) for h in cols]
    out = np.empty((len(a), len(b)))
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            out[i, j] = chi2_distance(x, y)
    return out


# --- Nearest neighbour -----------------------------------------------------

def nn_predict(distances: np.ndarray, train_labels: Sequence[int], train_video_ids: Sequence[int]) -> np.ndarray:
    """Label of the nearest training item per row of a (queries × train) distance matrix.

    Equal distances resolve to the training item with the lowest video id.
    """
    distances = np.atleast_2d(distances)
    if distances.shape[1] == 0:
        raise EmptyTrainingSet("Nearest-neighbour search over an empty training set")
    labels = np.asarray(train_labels)
    video_ids = np.asarray(train_video_ids)
    out = np.empty(distances.shape[0], dtype=labels.dtype)
    for q, row in enumerate(distances):
        tied = np.flatnonzero(row == row.min())
        out[q] = labels[tied[np.argmin(video_ids[tied])]]
    return out


def nn_classify(train: Sequence[LabeledDescriptor], query: HistogramLike) -> str:
    if not train:
        raise EmptyTrainingSet("Nearest-neighbour search over an empty training set")
    d = np.array([chi2_distance(item.histogram, query) for item in train])
    index = nn_predict(d[None, :], list(range(len(train))), [item.video_id for item in train])[0]
    return train[int(index)].label


# --- SVM -------------------------------------------------------------------

class Chi2SVM:
    """One-vs-one soft-margin SVM over a precomputed kernel.

    Each class pair gets its own binary machine; prediction is a majority
    vote, ties going to the class with the larger summed decision margin and
    then to the lower class index.
    """

    def __init__(self, C: float = 10_000.0, max_iter: Optional[int] = None, tol: float = 1e-3):
        if C <= 0:
            raise BadParams(f"Soft-margin constant must be positive, got {C}")
        self.C = C
        self.tol = tol
        self.max_iter = settings.svm_max_iter if max_iter is None else max_iter
        self.classes_: np.ndarray = np.empty(0, dtype=int)
        self.pairs_: Dict[Tuple[int, int], Tuple[np.ndarray, SVC]] = {}

    def fit(self, kernel: np.ndarray, labels: Sequence[int]) -> "Chi2SVM":
        labels = np.asarray(labels)
        if labels.size == 0:
            raise EmptyTrainingSet("SVM training set is empty")
        if kernel.shape != (labels.size, labels.size):
            raise DimensionMismatch(f"Kernel shape {kernel.shape} does not match {labels.size} labels")
        self.classes_ = np.unique(labels)
        if self.classes_.size < 2:
            raise SingleClassTraining(f"SVM training needs two classes, got {self.classes_.tolist()}")

        self.pairs_ = {}
        for a, b in combinations(self.classes_.tolist(), 2):
            members = np.flatnonzero((labels == a) | (labels == b))
            target = (labels[members] == b).astype(int)
            machine = SVC(kernel="precomputed", C=self.C, tol=self.tol, max_iter=self.max_iter)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConvergenceWarning)
                machine.fit(kernel[np.ix_(members, members)], target)
            if any(issubclass(w.category, ConvergenceWarning) for w in caught):
                raise NonConvergence(f"SVM for classes ({a}, {b}) hit the {self.max_iter}-iteration cap")
            self.pairs_[(a, b)] = (members, machine)
        logger.debug(f"Trained {len(self.pairs_)} pairwise SVM(s) over {labels.size} descriptor(s)")
        return self

    def decision_votes(self, kernel: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Votes and summed margins per (query, class) from a (queries × train) kernel block."""
        kernel = np.atleast_2d(kernel)
        index = {c: i for i, c in enumerate(self.classes_.tolist())}
        votes = np.zeros((kernel.shape[0], self.classes_.size), dtype=int)
        margins = np.zeros((kernel.shape[0], self.classes_.size))
        for (a, b), (members, machine) in self.pairs_.items():
            f = machine.decision_function(kernel[:, members])
            wins_b = f > 0
            votes[wins_b, index[b]] += 1
            votes[~wins_b, index[a]] += 1
            margins[:, index[b]] += f
            margins[:, index[a]] -= f
        return votes, margins

    def predict(self, kernel: np.ndarray) -> np.ndarray:
        votes, margins = self.decision_votes(kernel)
        out = np.empty(votes.shape[0], dtype=self.classes_.dtype)
        for q in range(votes.shape[0]):
            top = np.flatnonzero(votes[q] == votes[q].max())
            best = top[np.argmax(margins[q, top])]
            out[q] = self.classes_[best]
        return out


class SVMModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    machine: Chi2SVM
    train: List[LabeledDescriptor]
    gamma: float


def svm_train(train: Sequence[LabeledDescriptor], gamma: float = 0.1, C: float = 10_000.0) -> SVMModel:
    if not train:
        raise EmptyTrainingSet("SVM training set is empty")
    if gamma <= 0:
        raise BadParams(f"Kernel width γ must be positive, got {gamma}")
    kernel = np.exp(-gamma * chi2_distance_matrix([t.histogram for t in train]))
    machine = Chi2SVM(C=C).fit(kernel, [t.label_index for t in train])
    return SVMModel(machine=machine, train=list(train), gamma=gamma)


def svm_predict(model: SVMModel, query: HistogramLike) -> str:
    d = chi2_distance_matrix([query], [t.histogram for t in model.train])
    label_index = int(model.machine.predict(np.exp(-model.gamma * d))[0])
    return next(t.label for t in model.train if t.label_index == label_index)
