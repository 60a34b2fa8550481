"""Layer-wise relevance propagation through ASDNet and both backbones.

The epsilon rule is used for conv and fc layers, winner-take-all for max
pooling, identity for ReLU, dropout (eval) and flatten. Relevance absorbed by
biases and the stabilizer is dropped and accounted for, so
``seed == sum(input relevance) + dropped`` holds to rounding error.
"""

import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import mannwhitneyu

from . import netpbm
from .errors import AttributionError, ShapeMismatchError
from .tensor import forward, layer_input_grad, maxpool_backward

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6
DEFAULT_THRESHOLD = 0.0029
DEFAULT_MASS_FRACTION = 0.75
FEATURE_TYPES = (
    "human_face",
    "arm_hand",
    "upper_body",
    "lower_body",
    "lower_limb_foot",
    "attention_object",
    "animal_face",
    "animal_body",
    "cup",
    "fruit",
    "food",
    "background",
)


# --- MODEL AND TRACE ---


@dataclass
class TwoStreamModel:
    backbone: object
    head: object
    hfm_backbone: object = None

    @property
    def streams(self):
        return {"image": self.backbone, "hfm": self.hfm_backbone or self.backbone}

    def astype(self, dtype):
        return TwoStreamModel(
            self.backbone.astype(dtype),
            self.head.astype(dtype),
            None if self.hfm_backbone is None else self.hfm_backbone.astype(dtype),
        )


@dataclass
class TwoStreamTrace:
    image: object
    hfm: object
    head: object


def two_stream_forward(model, image_inputs, hfm_inputs, mode="eval", seed=None):
    """Both backbones over ``(N, 3, H, W)`` inputs, then the head on the stacked features."""
    image_trace = forward(model.streams["image"], image_inputs, "eval")
    hfm_trace = forward(model.streams["hfm"], hfm_inputs, "eval")
    n = image_trace.output.shape[0]
    stacked = np.stack([image_trace.output.reshape(n, -1), hfm_trace.output.reshape(n, -1)])
    head_trace = forward(model.head, stacked[None].astype(model.head.dtype), mode, seed)
    return TwoStreamTrace(image=image_trace, hfm=hfm_trace, head=head_trace)


# --- PROPAGATION ---


def _stabilize(z, epsilon):
    return z + epsilon * np.where(z >= 0, 1.0, -1.0)


def propagate_relevance(net, trace, relevance, top=None, epsilon=DEFAULT_EPSILON):
    """Carry ``relevance`` (at the output of layer ``top - 1``) down to the input.

    Returns ``(input_relevance, dropped)``, where ``dropped`` is the total
    relevance assigned to bias terms and the stabilizer.
    """
    top = len(net.layers) if top is None else top
    r = np.asarray(relevance, dtype=np.float64)
    dropped = 0.0
    for i in range(top - 1, -1, -1):
        spec, params = net.layers[i], net.params[i]
        x = trace.layer_input(i)
        if spec.kind in ("conv2d", "fc"):
            z = trace.activations[i]
            denom = _stabilize(z, epsilon)
            s = r / denom
            bias = params["bias"][None, :, None, None] if spec.kind == "conv2d" else params["bias"][None, :]
            dropped += float(np.sum(r * (bias + (denom - z)) / denom))
            r = x * layer_input_grad(spec, params, x, trace.caches[i], s)
        elif spec.kind == "maxpool2d":
            r = maxpool_backward(x.shape, trace.caches[i]["argmax"], spec.kernel, spec.stride, r)
        elif spec.kind == "flatten":
            r = r.reshape(x.shape)
        elif spec.kind in ("relu", "dropout"):
            if "mask" in trace.caches[i]:
                raise AttributionError("relevance needs an eval-mode trace")
        else:
            raise AttributionError(f"cannot propagate relevance through {spec.kind}")
    return r, dropped


def lrp_network(net, trace, target_class, epsilon=DEFAULT_EPSILON, seed_relevance=None):
    """Relevance of a single network's input for ``target_class``, seeded with its logit."""
    if trace.mode != "eval":
        raise AttributionError("relevance needs an eval-mode trace")
    top = len(net.layers) - (1 if net.layers and net.layers[-1].kind == "softmax" else 0)
    logits = trace.activations[top - 1] if top else trace.input
    seed = np.zeros_like(logits, dtype=np.float64)
    seed[:, target_class] = logits[:, target_class] if seed_relevance is None else seed_relevance
    relevance, dropped = propagate_relevance(net, trace, seed, top, epsilon)
    return relevance, float(seed.sum()), dropped


@dataclass
class RelevanceMap:
    values: np.ndarray
    stream: str
    image_index: int

    @property
    def total_relevance(self):
        return float(self.values.sum())


@dataclass
class LRPResult:
    target_class: int
    seed: float
    image_maps: list
    hfm_maps: list
    feature_relevance: np.ndarray
    dropped: dict = field(default_factory=dict)

    @property
    def input_total(self):
        return float(sum(m.values.sum() for m in self.image_maps + self.hfm_maps))

    @property
    def dropped_total(self):
        return float(sum(self.dropped.values()))

    def conservation_report(self, tolerance=1e-3):
        deficit = self.seed - self.input_total
        scale = max(abs(self.seed), 1e-300)
        residual = deficit - self.dropped_total
        return {
            "target_class": self.target_class,
            "seed": self.seed,
            "input_total": self.input_total,
            "dropped": self.dropped,
            "deficit": deficit,
            "relative_deficit": abs(deficit) / scale,
            "unaccounted": residual,
            "conserved": abs(deficit) / scale <= tolerance,
            "accounted": abs(residual) <= 1e-9 * max(1.0, abs(self.seed)),
        }


def lrp(model, trace, target_class, epsilon=DEFAULT_EPSILON, seed_relevance=None):
    """Per-pixel relevance of every image and fixation map for ``target_class``."""
    if any(t.mode != "eval" for t in (trace.head, trace.image, trace.hfm)):
        raise AttributionError("relevance needs an eval-mode trace (dropout inactive)")
    head_input, seed, dropped_head = lrp_network(
        model.head, trace.head, target_class, epsilon, seed_relevance
    )
    feature_relevance = head_input[0]
    dropped = {"head": dropped_head}
    maps = {}
    for channel, stream in enumerate(("image", "hfm")):
        net, stream_trace = model.streams[stream], getattr(trace, stream)
        r_out = feature_relevance[channel].reshape(stream_trace.output.shape)
        r_in, dropped[stream] = propagate_relevance(net, stream_trace, r_out, epsilon=epsilon)
        maps[stream] = [RelevanceMap(r.sum(axis=0), stream, i) for i, r in enumerate(r_in)]
    return LRPResult(
        target_class=int(target_class),
        seed=seed,
        image_maps=maps["image"],
        hfm_maps=maps["hfm"],
        feature_relevance=feature_relevance,
        dropped=dropped,
    )


def explain(model, image_inputs, hfm_inputs, target_class, epsilon=DEFAULT_EPSILON):
    """Run a 64-bit eval forward and LRP in one call."""
    model64 = model.astype(np.float64)
    trace = two_stream_forward(model64, image_inputs, hfm_inputs)
    return lrp(model64, trace, target_class, epsilon)


# --- IMPORTANCE MASKS ---


@dataclass
class ImportanceMask:
    mask: np.ndarray
    threshold: float
    retained_mass_fraction: float
    inclusive: bool = False


def _values(relmap):
    return np.asarray(getattr(relmap, "values", relmap), dtype=np.float64)


def mass_threshold(values, fraction):
    """Largest |r| value whose descending cumulative mass reaches ``fraction`` of the total."""
    magnitudes = np.sort(np.abs(values), axis=None)[::-1]
    total = magnitudes.sum()
    if total == 0:
        return 0.0
    k = int(np.searchsorted(np.cumsum(magnitudes), fraction * total, side="left"))
    return float(magnitudes[min(k, magnitudes.size - 1)])


def important_mask(relmap, threshold=DEFAULT_THRESHOLD, mass_fraction=None):
    """Pixels with |r| above ``threshold``, or the top pixels holding ``mass_fraction`` of sum|r|.

    In mass mode the solved threshold is inclusive (``|r| >= t``).
    """
    values = _values(relmap)
    magnitude = np.abs(values)
    if mass_fraction is not None:
        if not 0 < mass_fraction <= 1:
            raise ValueError("mass_fraction must be in (0, 1]")
        threshold = mass_threshold(values, mass_fraction)
        mask = (magnitude >= threshold) & (magnitude > 0)
        inclusive = True
    else:
        if threshold < 0:
            raise ValueError("threshold must be >= 0")
        mask = magnitude > threshold
        inclusive = False
    total = magnitude.sum()
    fraction = float(magnitude[mask].sum() / total) if total > 0 else 0.0
    return ImportanceMask(mask, float(threshold), fraction, inclusive)


def masked_overlay(relmap, mask):
    values = _values(relmap)
    mask = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    if mask.shape != values.shape:
        raise ShapeMismatchError(f"mask shape {mask.shape} != relevance shape {values.shape}")
    return np.where(mask, values, 0.0)


# --- REGION SCORES ---


@dataclass
class RegionAnnotation:
    image_id: str
    feature_type: str
    pixels: np.ndarray

    def __post_init__(self):
        if self.feature_type not in FEATURE_TYPES:
            raise AttributionError(f"unknown feature type {self.feature_type!r}")


def decode_runs(runs, height, width):
    """``[row, col, length]`` runs to a boolean ``(height, width)`` grid."""
    grid = np.zeros((height, width), dtype=bool)
    for row, col, length in runs:
        if not (0 <= row < height and 0 <= col and col + length <= width and length > 0):
            raise AttributionError(f"run {(row, col, length)} outside {height}x{width}")
        grid[row, col : col + length] = True
    return grid


def encode_runs(grid):
    runs = []
    for row, line in enumerate(np.asarray(grid, dtype=bool)):
        edges = np.flatnonzero(np.diff(np.concatenate([[0], line.astype(np.int8), [0]])))
        runs += [[row, int(a), int(b - a)] for a, b in zip(edges[::2], edges[1::2])]
    return runs


def load_annotations(path):
    with open(path) as handle:
        payload = json.load(handle)
    return [
        RegionAnnotation(
            image_id=a["image_id"],
            feature_type=a["feature_type"],
            pixels=decode_runs(a["runs"], a["height"], a["width"]),
        )
        for a in payload["annotations"]
    ]


def feature_score(mask, annotation):
    """Share of the region's pixels that are important."""
    mask = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    region = np.asarray(annotation.pixels, dtype=bool)
    if region.shape != mask.shape:
        raise AttributionError(f"annotation {region.shape} does not match mask {mask.shape}")
    n = int(region.sum())
    if n == 0:
        raise AttributionError(f"empty region for {annotation.image_id}/{annotation.feature_type}")
    return float(mask[region].sum() / n)


@dataclass
class RankSumResult:
    u: float
    p: float


def ranksum_test(scores_a, scores_b):
    """Two-sided Mann-Whitney U, normal approximation with tie and continuity correction."""
    a, b = np.asarray(scores_a, dtype=float), np.asarray(scores_b, dtype=float)
    if len(a) < 3 or len(b) < 3:
        raise AttributionError("rank-sum test needs at least 3 scores per group")
    result = mannwhitneyu(a, b, alternative="two-sided", use_continuity=True, method="asymptotic")
    p = float(result.pvalue)
    return RankSumResult(u=float(result.statistic), p=1.0 if np.isnan(p) else p)


def feature_type_scores(masks, annotations):
    """Scores per feature type and each type's rank-sum comparison with the background.

    ``masks`` maps image id to an ImportanceMask or boolean grid.
    """
    scores = {}
    for annotation in annotations:
        if annotation.image_id in masks:
            score = feature_score(masks[annotation.image_id], annotation)
            scores.setdefault(annotation.feature_type, []).append(score)
    background = scores.get("background", [])
    comparisons = {}
    for feature_type, values in scores.items():
        if feature_type != "background" and len(values) >= 3 and len(background) >= 3:
            comparisons[feature_type] = ranksum_test(values, background)
    return scores, comparisons


def select_top_relevance_images(maps, candidates=None, n=100):
    """Indices of the ``n`` maps with the largest sum|r|, drawn from ``candidates``."""
    candidates = range(len(maps)) if candidates is None else candidates
    totals = {i: float(np.abs(_values(maps[i])).sum()) for i in candidates}
    return sorted(totals, key=lambda i: (-totals[i], i))[:n]


# --- EXPORT ---


def write_relevance_csv(path, relmap):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        for row in _values(relmap):
            writer.writerow([repr(float(v)) for v in row])


def write_relevance_pgm_pair(stem, relmap):
    """Positive and negative relevance as two 8-bit maps scaled by max|r|."""
    values = _values(relmap)
    scale = np.abs(values).max()
    scale = scale if scale > 0 else 1.0
    pos = np.round(255 * np.clip(values, 0, None) / scale).astype(np.uint8)
    neg = np.round(255 * np.clip(-values, 0, None) / scale).astype(np.uint8)
    netpbm.write(f"{stem}_pos.pgm", pos)
    netpbm.write(f"{stem}_neg.pgm", neg)
