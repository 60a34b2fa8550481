"""Self-check suites: gradients, relevance conservation, AUC and augmentation oracles."""

import logging
import time

import numpy as np

from . import N_VARIANTS
from .attribution import TwoStreamModel, important_mask, lrp, mass_threshold, two_stream_forward
from .evaluation import pair_count_auc, roc_auc
from .gaze import augment10, crop_offsets, hflip
from .network import BackboneConfig, TrainHyper, build_asdnet, build_backbone
from .tensor import LayerSpec, Network, grad_check

logger = logging.getLogger(__name__)


def gradient_nets(seed=0):
    """One small network per layer kind, plus a three-layer composite."""
    fc_tail = [LayerSpec.flatten(), LayerSpec.fc(2)]
    image = (2, 6, 6)
    return {
        "conv2d": Network.build([LayerSpec.conv2d(3, 3, pad=1)] + fc_tail, image, seed),
        "conv2d_stride": Network.build([LayerSpec.conv2d(2, 3, stride=2)] + fc_tail, image, seed),
        "maxpool2d": Network.build(
            [LayerSpec.conv2d(2, 3, pad=1), LayerSpec.maxpool2d(2)] + fc_tail, image, seed
        ),
        "relu": Network.build([LayerSpec.fc(5), LayerSpec.relu(), LayerSpec.fc(2)], (4,), seed),
        "dropout": Network.build([LayerSpec.fc(5), LayerSpec.dropout(0.5), LayerSpec.fc(2)], (4,), seed),
        "fc_softmax": Network.build([LayerSpec.fc(3), LayerSpec.softmax()], (4,), seed),
        "composite": Network.build(
            [
                LayerSpec.conv2d(3, 3, pad=1),
                LayerSpec.relu(),
                LayerSpec.maxpool2d(2),
                LayerSpec.flatten(),
                LayerSpec.fc(4),
                LayerSpec.relu(),
                LayerSpec.fc(2),
                LayerSpec.softmax(),
            ],
            image,
            seed,
        ),
    }


def check_gradients(seed=0, tolerance=1e-4):
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    results = {}
    for name, net in gradient_nets(seed).items():
        x = rng.normal(size=(2, *net.input_shape))
        report = grad_check(net, x, [0, 1], tolerance=tolerance)
        results[name] = {"max_rel_error": max(report.max_rel_error.values()), "passed": report.passed}
    return {
        "passed": all(r["passed"] for r in results.values()),
        "nets": results,
        "seconds": time.perf_counter() - started,
    }


def toy_two_stream(seed=0, n_images=3, crop=16, bias_free=True, backbone_biases=False):
    """A float64 two-stream model; head biases are zero when ``bias_free``,
    backbone biases are random only with ``backbone_biases``."""
    backbone = build_backbone(
        BackboneConfig("tiny", feature_dim=6, seed=seed, input_size=crop), dtype=np.float64
    )
    hyper = TrainHyper(hidden_dim=8, fc_init="xavier", precision="float64")
    head = build_asdnet(n_images, 6, hyper, seed=seed)
    rng = np.random.default_rng([seed, 1])
    updates = {}
    for i, key, arr in head.named_params():
        if key == "bias":
            updates[(i, key)] = np.zeros_like(arr) if bias_free else rng.normal(0, 0.1, arr.shape)
    if backbone_biases:
        backbone = backbone.with_params({
            (i, key): rng.normal(0, 0.1, arr.shape)
            for i, key, arr in backbone.named_params() if key == "bias"
        })
    return TwoStreamModel(backbone, head.with_params(updates))


def check_conservation(seed=0, epsilon=1e-6):
    rng = np.random.default_rng(seed)
    results = {}
    for bias_free in (True, False):
        model = toy_two_stream(seed, bias_free=bias_free, backbone_biases=not bias_free)
        n, shape = model.head.input_shape[1], model.backbone.input_shape
        trace = two_stream_forward(model, rng.random((n, *shape)), rng.random((n, *shape)))
        logits = trace.head.activations[-2][0]
        target = int(np.argmax(np.abs(logits)))
        report = lrp(model, trace, target, epsilon).conservation_report()
        key = "bias_free" if bias_free else "with_bias"
        ok = report["conserved"] if bias_free else report["accounted"]
        results[key] = {
            "relative_deficit": report["relative_deficit"],
            "unaccounted": report["unaccounted"],
            "passed": bool(ok),
        }

    grid = rng.normal(size=(20, 20))
    order = np.sort(np.abs(grid), axis=None)[::-1]
    k = int(np.argmax(np.cumsum(order) >= 0.75 * order.sum()))
    mask = important_mask(grid, mass_fraction=0.75)
    results["mass_threshold"] = {
        "passed": bool(mass_threshold(grid, 0.75) == order[k] and mask.threshold == order[k]),
    }
    return {"passed": all(r["passed"] for r in results.values()), **results}


def check_auc(seed=0, n_fixtures=200):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_fixtures):
        n = int(rng.integers(4, 40))
        labels = rng.permutation(np.r_[[0, 1], rng.integers(0, 2, n - 2)])
        scores = np.round(rng.random(n), 1)
        worst = max(worst, abs(roc_auc(scores, labels).auc - pair_count_auc(scores, labels)))
    ties = roc_auc(np.full(10, 0.3), np.r_[np.zeros(5, int), np.ones(5, int)]).auc
    return {"passed": worst <= 1e-12 and ties == 0.5, "max_abs_diff": worst, "all_ties_auc": ties}


def check_augmentation(size=16, crop=12):
    offsets = crop_offsets(size, crop)
    ok = True
    for variant, (r, c) in enumerate(offsets):
        grid = np.zeros((size, size))
        grid[r, c] = 1.0
        crops = augment10(grid, size, crop)
        ok &= len(crops) == N_VARIANTS
        ok &= crops[variant][0, 0] == 1.0 and crops[variant].sum() == 1.0
        ok &= crops[variant + 5][0, crop - 1] == 1.0
    grid = np.arange(size * size, dtype=float).reshape(size, size)
    ok &= np.array_equal(hflip(hflip(grid)), grid)
    rgb = np.stack([grid] * 3, axis=-1)
    ok &= all(
        np.array_equal(a[..., 0], b) for a, b in zip(augment10(rgb, size, crop), augment10(grid, size, crop))
    )
    return {"passed": bool(ok)}


SUITES = {
    "gradients": check_gradients,
    "lrp": check_conservation,
    "auc": check_auc,
    "augmentation": check_augmentation,
}


def run_all(names=None):
    report = {}
    for name in names or SUITES:
        report[name] = SUITES[name]()
        logger.info("verify %s: %s", name, "pass" if report[name]["passed"] else "FAIL")
    report["passed"] = all(r["passed"] for r in report.values())
    return report
