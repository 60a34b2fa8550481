"""Contribution of single and multiple image-data to classification.

An image-data is one row of both feature matrices (image and fixation map).
Rows outside a keep set are zeroed in both streams and every subject is
rescored; the AUC over subjects measures what the kept rows carry.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import ASD
from .errors import EvaluationError
from .evaluation import model_for, roc_auc
from .network import variant_probabilities

logger = logging.getLogger(__name__)

DEFAULT_DELTA = 0.005


def _n_images(features):
    return features.image[0].shape[0]


def masked_probabilities(models, features, keep, subject_ids=None):
    """Per-subject mean P(ASD) over all variants with rows outside ``keep`` zeroed."""
    ids = features.subject_ids if subject_ids is None else list(subject_ids)
    return {
        sid: float(np.mean(variant_probabilities(model_for(models, sid), features, sid, keep)[:, ASD]))
        for sid in ids
    }


def keep_auc(models, features, keep, subject_ids=None):
    scores = masked_probabilities(models, features, keep, subject_ids)
    labels = [features.labels[sid] for sid in scores]
    return roc_auc(list(scores.values()), labels).auc


@dataclass
class ContributionTable:
    single_auc: np.ndarray
    baseline_auc: float
    image_ids: list = field(default_factory=list)

    @property
    def ranking(self):
        """Image indices by single-image AUC, descending; ties by index."""
        return sorted(range(len(self.single_auc)), key=lambda i: (-self.single_auc[i], i))

    @property
    def positive(self):
        return self.single_auc > self.baseline_auc

    @property
    def n_positive(self):
        return int(self.positive.sum())


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def single_image_contributions(models, features, subject_ids=None, jobs=1):
    n = _n_images(features)
    baseline = keep_auc(models, features, (), subject_ids)
    single = _map(lambda i: keep_auc(models, features, (i,), subject_ids), range(n), jobs)
    table = ContributionTable(
        single_auc=np.array(single, dtype=float),
        baseline_auc=baseline,
        image_ids=list(features.image_ids) or [str(i) for i in range(n)],
    )
    logger.info(
        "single-image contributions: %d of %d above baseline AUC %.4f",
        table.n_positive, n, baseline,
    )
    return table


def topk_auc_curve(table, models, features, k_list, subject_ids=None, jobs=1):
    """AUC when only the top-k ranked image-data are kept, for each k."""
    k_list = list(k_list)
    if not k_list:
        raise EvaluationError("k_list is empty")
    n = len(table.single_auc)
    if any(k < 0 or k > n for k in k_list):
        raise EvaluationError(f"k values must lie in [0, {n}]")
    ranking = table.ranking
    aucs = _map(lambda k: keep_auc(models, features, ranking[:k], subject_ids), k_list, jobs)
    return list(zip(k_list, aucs))


@dataclass
class DiscardStep:
    step: int
    removed: int
    auc_before: float
    auc_after: float
    size_after: int


@dataclass
class DiscardResult:
    keep: list
    auc: float
    log: list

    def to_dict(self):
        return {"keep": self.keep, "auc": self.auc, "steps": [asdict(s) for s in self.log]}


def greedy_discard(
    models, features, start, delta=DEFAULT_DELTA, min_size=1, table=None, subject_ids=None, jobs=1
):
    """Backward elimination: drop the image-data whose removal leaves the best AUC.

    Ties go to the element with the lowest single-image AUC, then the lowest
    index. Stops when the best remaining AUC falls below ``current - delta`` or
    the set reaches ``min_size``.
    """
    keep = sorted(set(start))
    if not keep:
        raise EvaluationError("greedy discard needs a nonempty start set")
    if delta < 0:
        raise EvaluationError("delta must be >= 0")
    if table is None:
        table = single_image_contributions(models, features, subject_ids, jobs)
    current = keep_auc(models, features, keep, subject_ids)
    log = []
    while len(keep) > max(min_size, 0):
        candidates = _map(
            lambda e: keep_auc(models, features, [k for k in keep if k != e], subject_ids), keep, jobs
        )
        order = sorted(
            range(len(keep)),
            key=lambda j: (-candidates[j], table.single_auc[keep[j]], keep[j]),
        )
        best = order[0]
        if candidates[best] < current - delta:
            break
        removed = keep.pop(best)
        log.append(DiscardStep(len(log), removed, current, candidates[best], len(keep)))
        logger.info(
            "discard step %d: removed %d, AUC %.4f -> %.4f (%d left)",
            len(log) - 1, removed, current, candidates[best], len(keep),
        )
        current = candidates[best]
    return DiscardResult(keep=keep, auc=current, log=log)


# --- EXPORT ---


def write_contribution_csv(path, table):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["image_id", "single_auc", "positive"])
        for image_id, value, positive in zip(table.image_ids, table.single_auc, table.positive):
            writer.writerow([image_id, repr(float(value)), "true" if positive else "false"])


def read_contribution_ranking(path, image_ids):
    """Indices into ``image_ids`` ordered like ``ContributionTable.ranking``."""
    table = pd.read_csv(path, dtype={"image_id": str}, float_precision="round_trip")
    unknown = set(table["image_id"]) - set(image_ids)
    if unknown:
        raise EvaluationError(f"{path} names images outside the run: {sorted(unknown)[:5]}")
    table["index"] = table["image_id"].map({image_id: i for i, image_id in enumerate(image_ids)})
    table = table.sort_values(["single_auc", "index"], ascending=[False, True], kind="mergesort")
    return table["index"].astype(int).tolist()


def write_topk_csv(path, curve):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["k", "auc"])
        for k, value in curve:
            writer.writerow([k, repr(float(value))])


def write_discard_json(path, result, table=None):
    payload = result.to_dict()
    if table is not None:
        payload["keep_ids"] = [table.image_ids[i] for i in result.keep]
        payload["baseline_auc"] = table.baseline_auc
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")
