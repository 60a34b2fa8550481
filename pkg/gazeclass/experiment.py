"""Experiment orchestration: run directories, cross-validated training, analyses.

Run directory layout::

    config.json      fully resolved configuration
    dataset/         synthesized cohort (synthetic runs only)
    subjects.json    subject labels and image order
    features.gzc     backbone features for every variant
    folds/fold-XX.json, curves/fold-XX.csv, models/fold-XX.gzc
    metrics.json, roc.csv
    analysis/{lrp,contrib,tsne}/
"""

import json
import logging
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

import numpy as np

from . import CLASS_NAMES, attribution, contribution, embedding
from .config import cache_dir, load_config, write_config
from .errors import ArtifactMissingError, ConfigError, EvaluationError
from .evaluation import (
    compute_metrics,
    make_kfold_plan,
    make_loocv_plan,
    predict_subject,
    write_metrics_json,
    write_roc_csv,
)
from .gaze import load_dataset, resize_bilinear, stream_inputs, write_dataset
from .network import (
    BackboneConfig,
    CohortFeatures,
    FeatureExtractor,
    build_backbone,
    compute_cohort_features,
    load_model,
    save_model,
    train_asdnet,
    write_curve_csv,
)
from .synth import BiasModel, synth_gaze

logger = logging.getLogger(__name__)


# --- RUN DIRECTORIES ---


def prepare_output_dir(path, force=False):
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} is not empty (use --force)")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def new_run_dir(output_dir):
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    return Path(output_dir) / f"run-{stamp}"


def _write_json(path, payload):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def bias_model(config):
    s = config.synth
    return BiasModel(
        n_objects=s.n_objects,
        object_radius_px=s.object_radius_px,
        fixations_per_image=s.fixations_per_image,
        samples_per_fixation=s.samples_per_fixation,
        gaze_jitter_px=s.gaze_jitter_px,
        center_bias_td=s.center_bias_td,
        center_bias_asd=s.center_bias_asd,
        center_sigma_px=s.center_sigma_px,
        signal_images=None if s.signal_images is None else tuple(s.signal_images),
        sample_rate_hz=config.hfm.sample_rate_hz,
    )


def synthesize_dataset(config, out_dir):
    """Write a synthetic dataset directory from ``config.synth`` and ``config.run.seed``."""
    s = config.synth
    raw = synth_gaze(
        s.n_subjects_per_group,
        s.n_images,
        (s.image_width, s.image_height),
        bias_model(config),
        config.run.seed,
    )
    meta = {"synth": bias_model(config).as_dict(), "seed": config.run.seed}
    return write_dataset(out_dir, raw.images, raw.series, raw.labels, meta)


def prepare_dataset(config, run_dir):
    if config.dataset.data_dir:
        data_dir = Path(config.dataset.data_dir)
    else:
        data_dir = synthesize_dataset(config, Path(run_dir) / "dataset")
    return load_dataset(data_dir, config.hfm.sample_rate_hz, config.hfm.sigma_px)


def dataset_dir(run_dir, config):
    local = Path(run_dir) / "dataset"
    return local if local.is_dir() else Path(config.dataset.data_dir or local)


def run_backbone(config):
    b = config.backbone
    return build_backbone(
        BackboneConfig(b.kind, b.feature_dim, b.weights_path, b.seed, input_size=config.hfm.crop),
        dtype=config.train.dtype,
    )


def make_plan(config, subject_ids):
    if config.cv.mode == "loocv":
        return make_loocv_plan(subject_ids)
    return make_kfold_plan(subject_ids, config.cv.k, config.cv.seed)


def fold_seed(run_seed, fold_index):
    return int(np.random.SeedSequence([run_seed, fold_index]).generate_state(1)[0])


# --- TRAINING RUN ---


@dataclass
class FoldResult:
    fold: object
    seed: int
    net: object
    curve: list
    predictions: list


@dataclass
class RunResult:
    run_dir: Path
    metrics: object
    predictions: list
    cache_stats: dict


def run_fold(fold, features, hyper, seed):
    logger.info("fold %d: training on %d subjects", fold.index, len(fold.train))
    result = train_asdnet(
        features.instances(fold.train), hyper, seed, test_instances=features.instances(fold.test)
    )
    predictions = [predict_subject(result.net, features, sid) for sid in fold.test]
    logger.info(
        "fold %d done: final loss %.5f, %d/%d test subjects recognized",
        fold.index, result.curve[-1].loss, sum(p.correct for p in predictions), len(predictions),
    )
    return FoldResult(fold, seed, result.net, result.curve, predictions)


def _write_fold(run_dir, res):
    name = f"fold-{res.fold.index:02d}"
    _write_json(
        run_dir / "folds" / f"{name}.json",
        {
            "index": res.fold.index,
            "seed": res.seed,
            "train": list(res.fold.train),
            "test": list(res.fold.test),
            "final_loss": res.curve[-1].loss,
            "predictions": [p.to_dict() for p in res.predictions],
        },
    )
    (run_dir / "curves").mkdir(exist_ok=True)
    write_curve_csv(run_dir / "curves" / f"{name}.csv", res.curve)
    (run_dir / "models").mkdir(exist_ok=True)
    save_model(res.net, run_dir / "models" / f"{name}.gzc")


def run_experiment(config, run_dir, force=False):
    """Fixation maps, augmentation, features, cross-validated training and metrics."""
    run_dir = prepare_output_dir(run_dir, force)
    write_config(config, run_dir / "config.json")
    dataset = prepare_dataset(config, run_dir)
    _write_json(
        run_dir / "subjects.json",
        {
            "image_ids": dataset.image_ids,
            "subjects": [
                {"subject_id": sid, "label": CLASS_NAMES[lab]} for sid, lab in dataset.labels().items()
            ],
        },
    )

    jobs = config.run.jobs
    extractor = FeatureExtractor(run_backbone(config), cache_dir())
    features = compute_cohort_features(dataset, extractor, config.hfm.resize, config.hfm.crop, jobs)
    features.save(run_dir / "features.gzc")

    plan = make_plan(config, dataset.subject_ids)
    seeds = [fold_seed(config.run.seed, f.index) for f in plan.folds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(
            pool.map(lambda fs: run_fold(fs[0], features, config.train, fs[1]), zip(plan.folds, seeds))
        )
    for res in results:
        _write_fold(run_dir, res)

    by_subject = {p.subject_id: p for res in results for p in res.predictions}
    predictions = [by_subject[sid] for sid in dataset.subject_ids]
    metrics = compute_metrics(predictions)
    write_metrics_json(run_dir / "metrics.json", plan, predictions, metrics)
    write_roc_csv(run_dir / "roc.csv", metrics.roc)
    logger.info(
        "run finished: subject_acc %.3f sen %.3f spe %.3f auc %.3f",
        metrics.subject_acc, metrics.sensitivity, metrics.specificity, metrics.auc,
    )
    return RunResult(run_dir, metrics, predictions, extractor.stats())


# --- COMPLETED RUNS ---


class RunArtifacts:
    """Read access to a finished run directory; missing files are named explicitly."""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.config = load_config(self._require("config.json"))
        subjects = json.loads(self._require("subjects.json").read_text())
        self.image_ids = subjects["image_ids"]
        self.labels = {s["subject_id"]: CLASS_NAMES.index(s["label"]) for s in subjects["subjects"]}
        self._features = None

    def _require(self, relative):
        path = self.run_dir / relative
        if not path.exists():
            raise ArtifactMissingError(f"run directory {self.run_dir} lacks {relative}")
        return path

    @property
    def features(self):
        if self._features is None:
            self._features = CohortFeatures.load(
                self._require("features.gzc"), self.labels, self.image_ids
            )
        return self._features

    def fold_record(self, index):
        return json.loads(self._require(f"folds/fold-{index:02d}.json").read_text())

    def fold_indices(self):
        return sorted(int(p.stem.split("-")[1]) for p in (self.run_dir / "folds").glob("fold-*.json"))

    def model(self, index):
        return load_model(self._require(f"models/fold-{index:02d}.gzc"))

    def held_out_models(self):
        """Subject id to the model of the fold that tested it."""
        models = {}
        for index in self.fold_indices():
            net = self.model(index)
            for sid in self.fold_record(index)["test"]:
                models[sid] = net
        if set(models) != set(self.labels):
            raise ArtifactMissingError(f"fold models in {self.run_dir} do not cover every subject")
        return models

    def models(self, fold=0, cross_validated=False):
        return self.held_out_models() if cross_validated else self.model(fold)

    def dataset(self):
        c = self.config
        return load_dataset(dataset_dir(self.run_dir, c), c.hfm.sample_rate_hz, c.hfm.sigma_px)

    def analysis_dir(self, which, force=False):
        return prepare_output_dir(self.run_dir / "analysis" / which, force)

    def contribution_ranking(self):
        """Image indices by single-image AUC from an earlier contrib analysis, if any."""
        path = self.run_dir / "analysis" / "contrib" / "contribution.csv"
        if not path.is_file():
            return None
        return contribution.read_contribution_ranking(path, self.image_ids)


# --- ANALYSES ---


def analyze_contrib(run, fold=0, cross_validated=False, force=False):
    a, jobs = run.config.analysis, run.config.run.jobs
    out = run.analysis_dir("contrib", force)
    models, features = run.models(fold, cross_validated), run.features
    table = contribution.single_image_contributions(models, features, jobs=jobs)
    n = len(table.single_auc)
    k_list = a.topk if a.topk is not None else list(range(n + 1))
    curve = contribution.topk_auc_curve(table, models, features, k_list, jobs=jobs)
    if a.greedy_start_k is not None:
        start = table.ranking[: a.greedy_start_k]
    else:
        start = [i for i in table.ranking if table.positive[i]] or table.ranking
    result = contribution.greedy_discard(
        models, features, start, a.greedy_delta, a.greedy_min_size, table, jobs=jobs
    )
    contribution.write_contribution_csv(out / "contribution.csv", table)
    contribution.write_topk_csv(out / "topk.csv", curve)
    contribution.write_discard_json(out / "discard.json", result, table)
    return {"n_images": n, "n_positive": table.n_positive, "baseline_auc": table.baseline_auc,
            "greedy_size": len(result.keep), "greedy_auc": result.auc}


def analyze_tsne(run, fold=0, cross_validated=False, force=False):
    a = run.config.analysis
    out = run.analysis_dir("tsne", force)
    hidden, logits = embedding.subject_embedding_inputs(
        run.models(fold, cross_validated), run.features
    )
    checks = {}
    for name, inp in (("fc1", hidden), ("logits", logits)):
        emb = embedding.tsne(inp, a.tsne_perplexity, a.tsne_seed, a.tsne_iterations)
        embedding.write_scatter_csv(out / f"scatter_{name}.csv", emb, inp)
        embedding.write_kl_csv(out / f"kl_{name}.csv", emb)
        checks[name] = {"kl_check": embedding.kl_trace_check(emb), "final_kl": float(emb.kl_trace[-1])}
    _write_json(out / "checks.json", checks)
    return checks


def subject_inputs(dataset, subject_id, variant, config, dtype=np.float64):
    """Network inputs of both streams for one subject and augmentation variant."""
    size, crop = config.hfm.resize, config.hfm.crop
    images = [resize_bilinear(dataset.images[i].pixels, size, size) for i in dataset.image_ids]
    maps = [
        resize_bilinear(dataset.subjects[subject_id].maps[i].values, size, size)
        for i in dataset.image_ids
    ]
    return (
        stream_inputs(images, variant, "image", size, crop, dtype),
        stream_inputs(maps, variant, "hfm", size, crop, dtype),
    )


def analyze_lrp(run, fold=0, subjects=None, variant=0, top_n=5, target=None,
                annotations=None, force=False, candidates=None):
    """Relevance maps, importance masks and conservation reports for chosen subjects.

    Exported maps are the ``top_n`` by total relevance among the ``candidates``
    best images of an earlier contrib analysis, or among all images without one.
    """
    c = run.config
    a = c.analysis
    out = run.analysis_dir("lrp", force)
    dataset = run.dataset()
    model = attribution.TwoStreamModel(run_backbone(run.config), run.model(fold))
    subjects = list(dict.fromkeys(subjects)) if subjects else run.fold_record(fold)["test"]
    ranking = run.contribution_ranking()
    n_candidates = a.lrp_candidates if candidates is None else candidates
    pool = None if ranking is None else ranking[:n_candidates]
    regions = attribution.load_annotations(annotations) if annotations else []

    summary, masks = {}, {}
    for sid in subjects:
        if sid not in run.labels:
            raise EvaluationError(f"unknown subject {sid}")
        cls = run.labels[sid] if target is None else target
        image_inputs, hfm_inputs = subject_inputs(dataset, sid, variant, c)
        result = attribution.explain(model, image_inputs, hfm_inputs, cls, a.lrp_epsilon)
        report = result.conservation_report()
        chosen = attribution.select_top_relevance_images(result.image_maps, pool, n=top_n)
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        for i in chosen:
            image_id = run.image_ids[i]
            for relmap in (result.image_maps[i], result.hfm_maps[i]):
                stem = sdir / f"{image_id}_{relmap.stream}"
                attribution.write_relevance_csv(f"{stem}.csv", relmap)
                attribution.write_relevance_pgm_pair(stem, relmap)
        for i, relmap in enumerate(result.image_maps):
            mask = attribution.important_mask(relmap, a.lrp_threshold, a.lrp_mass_fraction)
            masks.setdefault(sid, {})[run.image_ids[i]] = mask
        report["top_images"] = [run.image_ids[i] for i in chosen]
        report["candidates"] = None if pool is None else [run.image_ids[i] for i in pool]
        report["retained_mass_fraction"] = {
            image_id: m.retained_mass_fraction for image_id, m in masks[sid].items()
        }
        _write_json(sdir / "conservation.json", report)
        summary[sid] = {"target": CLASS_NAMES[cls], "accounted": report["accounted"],
                        "relative_deficit": report["relative_deficit"],
                        "top_images": report["top_images"]}

    if regions:
        scores, comparisons = {}, {}
        for sid in subjects:
            per_type, tests = attribution.feature_type_scores(masks[sid], regions)
            scores[sid] = per_type
            comparisons[sid] = {t: {"u": r.u, "p": r.p} for t, r in tests.items()}
        _write_json(out / "feature_scores.json", {"scores": scores, "ranksum": comparisons})
    _write_json(out / "summary.json", summary)
    return summary


ANALYSES = {"lrp": analyze_lrp, "contrib": analyze_contrib, "tsne": analyze_tsne}
