"""Frozen per-image backbones, feature caching, and the trainable ASDNet head."""

import csv
import hashlib
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import N_VARIANTS, weights
from .errors import (
    CacheConflictError,
    ConfigError,
    LabelError,
    NonFiniteError,
    ShapeMismatchError,
    WeightsFormatError,
)
from .gaze import CROP_SIZE, RESIZE_SIZE, resize_bilinear, stream_inputs
from .tensor import (
    LayerSpec,
    Network,
    SGDHyper,
    backward,
    forward,
    logits_of,
    loss_softmax_xent_batch,
    sgd_step,
)

logger = logging.getLogger(__name__)

BACKBONE_KINDS = ("tiny", "vgg16_headless")
VGG16_FEATURE_DIM = 4096
STREAMS = ("image", "hfm")


# --- BACKBONES ---


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "tiny"
    feature_dim: int = 64
    weights_path: str = None
    seed: int = 0
    input_size: int = CROP_SIZE

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"backbone kind must be one of {BACKBONE_KINDS}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be positive")
        if self.kind == "vgg16_headless" and self.feature_dim != VGG16_FEATURE_DIM:
            raise ConfigError(f"vgg16_headless has a fixed feature_dim of {VGG16_FEATURE_DIM}")


def backbone_layers(config):
    if config.kind == "tiny":
        layers = []
        for block in range(1, 4):
            layers += [
                LayerSpec.conv2d(8, 3, pad=1, name=f"conv{block}"),
                LayerSpec.relu(),
                LayerSpec.maxpool2d(2),
            ]
        return layers + [LayerSpec.flatten(), LayerSpec.fc(config.feature_dim, name="feat")]

    # VGG16 with its last fully connected layer removed.
    layers = []
    for block, (width, depth) in enumerate([(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)], 1):
        for conv in range(1, depth + 1):
            layers += [LayerSpec.conv2d(width, 3, pad=1, name=f"conv{block}_{conv}"), LayerSpec.relu()]
        layers.append(LayerSpec.maxpool2d(2))
    return layers + [
        LayerSpec.flatten(),
        LayerSpec.fc(VGG16_FEATURE_DIM, name="fc6"),
        LayerSpec.relu(),
        LayerSpec.fc(VGG16_FEATURE_DIM, name="fc7"),
        LayerSpec.relu(),
    ]


def build_backbone(config, dtype=np.float32):
    """A frozen backbone; vgg16_headless weights must come from a GZC1 file."""
    net = Network.build(
        backbone_layers(config),
        (3, config.input_size, config.input_size),
        seed=config.seed,
        dtype=dtype,
        frozen=True,
    )
    if config.weights_path:
        net = weights.load_into(net, config.weights_path)
    elif config.kind == "vgg16_headless":
        raise ConfigError("vgg16_headless needs backbone.weights_path pointing at a GZC1 file")
    return net


# --- FEATURES ---


@dataclass
class FeatureMatrix:
    values: np.ndarray
    stream: str = "image"

    @property
    def n_images(self):
        return self.values.shape[0]

    @property
    def dim(self):
        return self.values.shape[1]


def extract_features(backbone, grids, stream="image", batch_size=16):
    """Eval-mode backbone output for each input, rows in input order."""
    grids = np.asarray(grids, dtype=backbone.dtype)
    if grids.ndim != 4 or grids.shape[1:] != backbone.input_shape:
        raise ShapeMismatchError(f"expected (N, {backbone.input_shape}) inputs, got {grids.shape}")
    rows = [
        forward(backbone, grids[start : start + batch_size], "eval").output
        for start in range(0, len(grids), batch_size)
    ]
    values = np.concatenate(rows).reshape(len(grids), -1)
    return FeatureMatrix(values=values, stream=stream)


def content_hash(arr):
    arr = np.ascontiguousarray(arr)
    digest = hashlib.sha256(f"{arr.dtype.str}{arr.shape}".encode())
    digest.update(arr.tobytes())
    return digest.hexdigest()


class FeatureExtractor:
    """extract_features with a two-level cache keyed by backbone, content and variant.

    Inserts are insert-if-absent: a duplicate computation is accepted only if
    it reproduces the stored matrix bit for bit.
    """

    def __init__(self, backbone, cache_dir=None, batch_size=16):
        self.backbone = backbone
        self.backbone_hash = backbone.checksum()[:16]
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self.batch_size = batch_size
        self.hits = 0
        self.misses = 0
        self._memory = {}
        self._lock = threading.Lock()
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    def cache_key(self, grids, variant):
        return f"{self.backbone_hash}-{content_hash(grids)[:32]}-v{variant}"

    def extract(self, grids, stream="image", variant=0):
        key = self.cache_key(grids, variant)
        cached = self._lookup(key)
        if cached is not None:
            with self._lock:
                self.hits += 1
            return FeatureMatrix(cached.copy(), stream)
        with self._lock:
            self.misses += 1
        matrix = extract_features(self.backbone, grids, stream, self.batch_size)
        stored = self._insert(key, matrix.values)
        return FeatureMatrix(stored.copy(), stream)

    def _path(self, key):
        return self.cache_dir / f"{key}.npy"

    def _lookup(self, key):
        with self._lock:
            if key in self._memory:
                return self._memory[key]
        if self.cache_dir and self._path(key).is_file():
            values = np.load(self._path(key))
            with self._lock:
                return self._memory.setdefault(key, values)
        return None

    def _insert(self, key, values):
        with self._lock:
            existing = self._memory.setdefault(key, values)
        if existing is not values and not np.array_equal(existing, values):
            raise CacheConflictError(f"divergent features for cache key {key}")
        if self.cache_dir:
            tmp = self.cache_dir / f"{key}.{os.getpid()}.{threading.get_ident()}.tmp"
            with open(tmp, "wb") as handle:
                np.save(handle, values, allow_pickle=False)
            try:
                os.link(tmp, self._path(key))
            except FileExistsError:
                if not np.array_equal(np.load(self._path(key)), values):
                    raise CacheConflictError(f"divergent features on disk for {key}") from None
            finally:
                tmp.unlink(missing_ok=True)
        return existing

    def stats(self):
        return {"hits": self.hits, "misses": self.misses}


@dataclass
class CohortFeatures:
    """Feature matrices for every variant: image features are shared by all subjects."""

    image: list
    hfm: dict
    labels: dict
    image_ids: list = field(default_factory=list)

    @property
    def subject_ids(self):
        return list(self.labels)

    @property
    def shape(self):
        return self.image[0].shape

    def instances(self, subject_ids=None, variants=range(N_VARIANTS)):
        ids = self.subject_ids if subject_ids is None else subject_ids
        return [
            SubjectInstance(
                subject_id=sid,
                variant=v,
                image_features=self.image[v],
                hfm_features=self.hfm[sid][v],
                label=self.labels[sid],
            )
            for sid in ids
            for v in variants
        ]

    def to_arrays(self):
        arrays = {f"image/v{v}": m for v, m in enumerate(self.image)}
        for sid, mats in self.hfm.items():
            arrays.update({f"hfm/{sid}/v{v}": m for v, m in enumerate(mats)})
        return arrays

    def save(self, path):
        weights.save(self.to_arrays(), path)

    @classmethod
    def load(cls, path, labels, image_ids=()):
        arrays = weights.load(path)
        n_var = sum(1 for name in arrays if name.startswith("image/"))
        try:
            image = [arrays[f"image/v{v}"] for v in range(n_var)]
            hfm = {sid: [arrays[f"hfm/{sid}/v{v}"] for v in range(n_var)] for sid in labels}
        except KeyError as missing:
            raise WeightsFormatError(f"feature file {path} lacks {missing}") from None
        return cls(image=image, hfm=hfm, labels=dict(labels), image_ids=list(image_ids))


def compute_cohort_features(dataset, extractor, size=RESIZE_SIZE, crop=CROP_SIZE, jobs=1):
    """Resize, augment and encode every image and fixation map of a cohort."""
    dtype = extractor.backbone.dtype
    image_grids = [resize_bilinear(dataset.images[i].pixels, size, size) for i in dataset.image_ids]
    image = [
        extractor.extract(stream_inputs(image_grids, v, "image", size, crop, dtype), "image", v).values
        for v in range(N_VARIANTS)
    ]

    def subject_features(sid):
        record = dataset.subjects[sid]
        grids = [resize_bilinear(record.maps[i].values, size, size) for i in dataset.image_ids]
        return [
            extractor.extract(stream_inputs(grids, v, "hfm", size, crop, dtype), "hfm", v).values
            for v in range(N_VARIANTS)
        ]

    ids = dataset.subject_ids
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        hfm = dict(zip(ids, pool.map(subject_features, ids)))
    logger.info("features ready: cache %s", extractor.stats())
    return CohortFeatures(image=image, hfm=hfm, labels=dataset.labels(), image_ids=dataset.image_ids)


# --- ASDNET HEAD ---


@dataclass(frozen=True)
class TrainHyper:
    base_lr: float = 1e-5
    gamma: float = 1e-4
    power: float = 0.75
    momentum: float = 0.9
    batch_size: int = 4
    max_iter: int = 1000
    dropout: float = 0.5
    hidden_dim: int = 512
    fusion_init: str = "xavier"
    fc_init: str = "gaussian"
    gaussian_std: float = 0.01
    eval_every: int = 10
    log_every: int = 100
    precision: str = "float32"

    @property
    def sgd(self):
        return SGDHyper(self.base_lr, self.gamma, self.power, self.momentum)

    @property
    def dtype(self):
        return np.dtype(self.precision).type


@dataclass
class SubjectInstance:
    subject_id: str
    variant: int
    image_features: np.ndarray
    hfm_features: np.ndarray
    label: int

    def __post_init__(self):
        if np.shape(self.image_features) != np.shape(self.hfm_features):
            raise ShapeMismatchError("image and hfm feature matrices differ in shape")


def asdnet_layers(hidden_dim=512, dropout=0.5, fusion_init="xavier", fc_init="gaussian", std=0.01):
    return [
        LayerSpec.conv2d(1, 1, init=fusion_init, std=std, name="fusion"),
        LayerSpec.relu(),
        LayerSpec.flatten(),
        LayerSpec.fc(hidden_dim, init=fc_init, std=std, name="fc1"),
        LayerSpec.relu(name="fc1_relu"),
        LayerSpec.dropout(dropout),
        LayerSpec.fc(2, init=fc_init, std=std, name="fc2"),
        LayerSpec.softmax(),
    ]


def build_asdnet(n_images, feature_dim, hyper=TrainHyper(), seed=0):
    layers = asdnet_layers(
        hyper.hidden_dim, hyper.dropout, hyper.fusion_init, hyper.fc_init, hyper.gaussian_std
    )
    return Network.build(layers, (2, n_images, feature_dim), seed=seed, dtype=hyper.dtype)


def stack_streams(image_features, hfm_features):
    """Two ``(N, D)`` matrices as one 2-channel ``(2, N, D)`` grid."""
    img = getattr(image_features, "values", image_features)
    hfm = getattr(hfm_features, "values", hfm_features)
    if np.shape(img) != np.shape(hfm):
        raise ShapeMismatchError(f"stream shapes differ: {np.shape(img)} vs {np.shape(hfm)}")
    return np.stack([img, hfm])


def classify_batch(net, stacked, mode="eval", seed=None):
    """``(B, 2, N, D)`` stacked features to ``(B, 2)`` probabilities (TD, ASD)."""
    return forward(net, stacked, mode, seed).output


def fuse_and_classify(net, image_features, hfm_features, mode="eval", seed=None):
    return classify_batch(net, stack_streams(image_features, hfm_features)[None], mode, seed)[0]


def layer_index(net, name):
    for i, spec in enumerate(net.layers):
        if spec.name == name:
            return i
    raise KeyError(name)


def head_activations(net, stacked):
    """Eval-mode penultimate (post-ReLU fc1) activations and logits for a batch."""
    trace = forward(net, stacked, "eval")
    hidden = trace.activations[layer_index(net, "fc1_relu")]
    return hidden, logits_of(net, trace)


# --- TRAINING ---


@dataclass
class CurvePoint:
    iteration: int
    loss: float
    train_acc: float
    test_acc: float = None


@dataclass
class TrainResult:
    net: Network
    curve: list


def _stack_instances(instances, dtype):
    x = np.stack([stack_streams(i.image_features, i.hfm_features) for i in instances]).astype(dtype)
    y = np.array([i.label for i in instances], dtype=int)
    return x, y


def _batches(rng, n, size):
    while True:
        order = rng.permutation(n)
        for start in range(0, n - size + 1, size):
            yield order[start : start + size]
        if n < size:
            yield order


def train_asdnet(instances, hyper=TrainHyper(), seed=0, test_instances=None):
    """Mini-batch SGD with the inv learning-rate policy; backbones are not involved."""
    if not instances:
        raise LabelError("no training instances")
    if len({i.label for i in instances}) < 2:
        raise LabelError("training set contains a single class")
    x, y = _stack_instances(instances, hyper.dtype)
    x_test, y_test = _stack_instances(test_instances, hyper.dtype) if test_instances else (None, None)
    n_images, feature_dim = x.shape[2:]
    net = build_asdnet(n_images, feature_dim, hyper, seed=[seed, 0])

    batches = _batches(np.random.default_rng([seed, 1]), len(x), hyper.batch_size)
    velocity, curve = None, []
    for it in range(hyper.max_iter):
        idx = next(batches)
        trace = forward(net, x[idx], "train", rng_seed=(seed, it))
        logits = logits_of(net, trace)
        loss, d_logits = loss_softmax_xent_batch(logits, y[idx])
        if not np.isfinite(loss):
            raise NonFiniteError(f"training loss became non-finite at iteration {it}")
        grads = backward(net, trace, d_logits, wrt="logits").params
        params, velocity = sgd_step(net.trainable_params(), grads, it, hyper.sgd, velocity)
        net = net.with_params(params)

        point = CurvePoint(it, loss, float(np.mean(logits.argmax(axis=1) == y[idx])))
        if x_test is not None and (it % hyper.eval_every == 0 or it == hyper.max_iter - 1):
            probs = classify_batch(net, x_test)
            point.test_acc = float(np.mean(probs.argmax(axis=1) == y_test))
        curve.append(point)
        if hyper.log_every and it % hyper.log_every == 0:
            logger.debug("iter %d loss %.5f train_acc %.3f", it, loss, point.train_acc)
    return TrainResult(net=net, curve=curve)


def write_curve_csv(path, curve):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["iter", "loss", "train_acc", "test_acc"])
        for p in curve:
            writer.writerow(
                [p.iteration, repr(p.loss), repr(p.train_acc), "" if p.test_acc is None else repr(p.test_acc)]
            )


# --- PERSISTENCE ---


def model_arrays(net):
    arrays = {"meta.input_shape": np.array(net.input_shape, dtype=np.float64)}
    arrays["meta.dropout"] = np.array([net.layers[layer_index(net, "fc1_relu") + 1].rate])
    arrays.update(weights.network_arrays(net))
    return arrays


def save_model(net, path):
    weights.save(model_arrays(net), path)


def load_model(path):
    arrays = weights.load(path)
    try:
        _, n_images, feature_dim = (int(d) for d in arrays["meta.input_shape"])
        rate = float(arrays["meta.dropout"][0])
        hidden_dim = arrays["fc1.weight"].shape[0]
        dtype = arrays["fc1.weight"].dtype.type
    except (KeyError, ValueError) as exc:
        raise WeightsFormatError(f"{path} is not an ASDNet model: {exc}") from None
    hyper = TrainHyper(hidden_dim=hidden_dim, dropout=rate, precision=np.dtype(dtype).name)
    return weights.load_into(build_asdnet(n_images, feature_dim, hyper), arrays)


# --- MASKED EVALUATION ---


def mask_feature_rows(values, keep):
    """Zero every row whose index is not in ``keep``; ``keep=None`` keeps all rows."""
    if keep is None:
        return values
    keep = np.asarray(sorted(keep), dtype=int)
    n = values.shape[-2]
    if keep.size and (keep.min() < 0 or keep.max() >= n):
        raise IndexError(f"keep indices must be in [0, {n})")
    mask = np.zeros(n, dtype=bool)
    mask[keep] = True
    return np.where(mask[:, None], values, np.zeros((), dtype=values.dtype))


def variant_probabilities(net, features, subject_id, keep=None, variants=range(N_VARIANTS)):
    """Eval-mode ``(V, 2)`` probabilities of one subject, optionally row-masked."""
    stacked = np.stack([
        stack_streams(
            mask_feature_rows(features.image[v], keep),
            mask_feature_rows(features.hfm[subject_id][v], keep),
        )
        for v in variants
    ])
    return classify_batch(net, stacked)
