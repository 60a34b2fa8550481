"""Cross-validation plans, subject scoring rules and performance metrics."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.metrics import auc as trapezoid_auc
from sklearn.metrics import roc_curve

from . import ASD, CLASS_NAMES, N_VARIANTS, TD
from .errors import EvaluationError, PlanError
from .network import variant_probabilities

logger = logging.getLogger(__name__)

# A single test is correct when the true-class probability is strictly above this.
TEST_THRESHOLD = 0.5
# A subject is recognized when at least this fraction of its tests is correct.
SUBJECT_THRESHOLD = 0.6
ROC_SCORE = "mean_p_asd"


# --- CROSS-VALIDATION PLANS ---


@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple
    test: tuple


@dataclass
class CVPlan:
    mode: str
    folds: list
    seed: int = None

    def validate(self, subject_ids):
        seen = []
        for fold in self.folds:
            if set(fold.train) & set(fold.test):
                raise PlanError(f"fold {fold.index} overlaps train and test")
            seen.extend(fold.test)
        if len(seen) != len(set(seen)) or set(seen) != set(subject_ids):
            raise PlanError("test sets must partition the subjects")
        return self

    def to_dict(self):
        return {
            "mode": self.mode,
            "seed": self.seed,
            "folds": [{"index": f.index, "train": list(f.train), "test": list(f.test)} for f in self.folds],
        }


def _plan(mode, subject_ids, groups, seed=None):
    folds = []
    for index, test in enumerate(groups):
        test_set = set(test)
        train = tuple(s for s in subject_ids if s not in test_set)
        folds.append(Fold(index, train, tuple(s for s in subject_ids if s in test_set)))
    return CVPlan(mode, folds, seed).validate(subject_ids)


def make_loocv_plan(subject_ids):
    subject_ids = list(subject_ids)
    if len(subject_ids) < 2:
        raise PlanError("leave-one-out needs at least 2 subjects")
    return _plan("loocv", subject_ids, [[s] for s in subject_ids])


def make_kfold_plan(subject_ids, k, seed=0):
    """Seeded shuffle split into k test sets of size floor(N/k) or ceil(N/k)."""
    subject_ids = list(subject_ids)
    if k < 2:
        raise PlanError("k must be >= 2")
    if k > len(subject_ids):
        raise PlanError(f"k={k} exceeds the {len(subject_ids)} subjects")
    order = np.random.default_rng(seed).permutation(len(subject_ids))
    groups = [[subject_ids[i] for i in part] for part in np.array_split(order, k)]
    return _plan("kfold", subject_ids, groups, seed)


# --- SUBJECT SCORING ---


@dataclass
class SubjectPrediction:
    subject_id: str
    label: int
    probs: np.ndarray
    classification_score: float
    mean_p_asd: float

    @property
    def n_correct(self):
        return count_correct(self.probs, self.label)

    @property
    def correct(self):
        return subject_recognized(self.n_correct, len(self.probs))

    def to_dict(self):
        return {
            "subject_id": self.subject_id,
            "label": CLASS_NAMES[self.label],
            "probs": [[float(p) for p in row] for row in self.probs],
            "classification_score": self.classification_score,
            "mean_p_asd": self.mean_p_asd,
            "correct": self.correct,
        }


def count_correct(probs, label):
    return int(np.sum(np.asarray(probs)[:, label] > TEST_THRESHOLD))


def subject_recognized(n_correct, n_tests):
    # integer form of n_correct / n_tests >= 0.6
    return n_correct * 10 >= int(round(SUBJECT_THRESHOLD * 10)) * n_tests


def prediction_from_probs(subject_id, label, probs):
    probs = np.asarray(probs, dtype=float)
    return SubjectPrediction(
        subject_id=subject_id,
        label=int(label),
        probs=probs,
        classification_score=count_correct(probs, label) / len(probs),
        mean_p_asd=float(np.mean(probs[:, ASD])),
    )


def predict_subject(net, features, subject_id, variants=range(N_VARIANTS)):
    """Score one subject on all of its augmented test instances."""
    variants = list(variants)
    available = min(len(features.image), len(features.hfm.get(subject_id, ())))
    missing = [v for v in range(N_VARIANTS) if v not in variants or v >= available]
    if missing:
        raise EvaluationError(f"subject {subject_id} is missing variants {missing}")
    probs = variant_probabilities(net, features, subject_id, variants=variants)
    return prediction_from_probs(subject_id, features.labels[subject_id], probs)


# --- ROC / AUC ---


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    @property
    def points(self):
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise EvaluationError("scores and labels must be equal-length vectors")
    if not (np.any(labels == ASD) and np.any(labels == TD)):
        raise EvaluationError("ROC needs both classes")
    return scores, labels


def roc_auc(scores, labels):
    """Threshold sweep over the distinct scores, AUC by the trapezoid rule."""
    scores, labels = _check_binary(scores, labels)
    fpr, tpr, thresholds = roc_curve(labels, scores, pos_label=ASD, drop_intermediate=False)
    keep = np.ones(len(fpr), dtype=bool)
    keep[1:] = (np.diff(fpr) != 0) | (np.diff(tpr) != 0)
    fpr, tpr, thresholds = fpr[keep], tpr[keep], thresholds[keep]
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds, auc=float(trapezoid_auc(fpr, tpr)))


def pair_count_auc(scores, labels):
    """Exhaustive Mann-Whitney count: concordant pairs plus half the ties."""
    scores, labels = _check_binary(scores, labels)
    pos, neg = scores[labels == ASD], scores[labels == TD]
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


# --- METRICS ---


@dataclass
class MetricsReport:
    subject_acc: float
    sensitivity: float
    specificity: float
    model_acc: float
    auc: float
    roc: RocCurve = field(repr=False)
    roc_score: str = ROC_SCORE

    def to_dict(self):
        d = asdict(self)
        d.pop("roc")
        d["roc"] = self.roc.points
        return d


def compute_metrics(predictions):
    if not predictions:
        raise EvaluationError("no predictions to evaluate")
    labels = np.array([p.label for p in predictions])
    correct = np.array([p.correct for p in predictions])
    if not (np.any(labels == ASD) and np.any(labels == TD)):
        raise EvaluationError("sensitivity and specificity need both classes")
    roc = roc_auc([p.mean_p_asd for p in predictions], labels)
    return MetricsReport(
        subject_acc=float(correct.mean()),
        sensitivity=float(correct[labels == ASD].mean()),
        specificity=float(correct[labels == TD].mean()),
        model_acc=float(np.mean([p.classification_score for p in predictions])),
        auc=roc.auc,
        roc=roc,
    )


def write_metrics_json(path, plan, predictions, report):
    payload = {
        "plan": plan.to_dict(),
        "per_subject": [p.to_dict() for p in predictions],
        "subject_acc": report.subject_acc,
        "model_acc": report.model_acc,
        "sen": report.sensitivity,
        "spe": report.specificity,
        "auc": report.auc,
        "roc_score": report.roc_score,
    }
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def write_roc_csv(path, roc):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for t, f, p in zip(roc.thresholds, roc.fpr, roc.tpr):
            writer.writerow([repr(float(t)), repr(float(f)), repr(float(p))])


def model_for(models, subject_id):
    """``models`` is one ASDNet or a mapping of subject id to its held-out fold model."""
    if isinstance(models, dict):
        try:
            return models[subject_id]
        except KeyError:
            raise EvaluationError(f"no model for subject {subject_id}") from None
    return models
