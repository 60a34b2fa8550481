"""Seeded synthetic cohorts: object images and two groups of simulated viewers.

TD-like viewers look at objects. ASD-like viewers mix object looks with a
pull toward the image center, on every image or only on ``signal_images``.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import ASD, TD
from .errors import ConfigError
from .gaze import CohortDataset, GazeSeries, StimulusImage, SubjectRecord, build_hfm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BiasModel:
    n_objects: int = 3
    object_radius_px: float = 12.0
    fixations_per_image: int = 12
    samples_per_fixation: int = 30
    gaze_jitter_px: float = 3.0
    center_bias_td: float = 0.05
    center_bias_asd: float = 0.6
    center_sigma_px: float = 8.0
    signal_images: tuple = None
    sample_rate_hz: float = 300.0

    def validate(self):
        if self.n_objects < 1 or self.fixations_per_image < 1 or self.samples_per_fixation < 1:
            raise ConfigError("object, fixation and sample counts must be >= 1")
        for name in ("center_bias_td", "center_bias_asd"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.gaze_jitter_px < 0 or self.center_sigma_px < 0 or self.object_radius_px <= 0:
            raise ConfigError("jitter and spreads must be nonnegative, object radius positive")
        if self.gaze_jitter_px == 0 and self.center_bias_td == 0 and self.center_bias_asd == 0:
            raise ConfigError("degenerate bias model: zero jitter with zero center bias")
        return self

    def as_dict(self):
        d = asdict(self)
        d["signal_images"] = None if self.signal_images is None else list(self.signal_images)
        return d


@dataclass
class SyntheticCohort:
    images: dict
    series: list
    labels: dict
    objects: dict


def subject_ids(n_per_group):
    td = [f"td{i + 1:02d}" for i in range(n_per_group)]
    asd = [f"asd{i + 1:02d}" for i in range(n_per_group)]
    return td + asd


def _render_image(rng, width, height, model):
    yy, xx = np.mgrid[0:height, 0:width]
    canvas = rng.normal(40.0, 8.0, size=(height, width, 3))
    margin = min(model.object_radius_px * 1.5, width / 4, height / 4)
    n = int(rng.integers(1, model.n_objects + 1))
    centers = np.column_stack([
        rng.uniform(margin, width - margin, n),
        rng.uniform(margin, height - margin, n),
    ])
    for cx, cy in centers:
        colour = rng.uniform(120.0, 255.0, size=3)
        blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * model.object_radius_px**2))
        canvas += blob[..., None] * colour
    return np.clip(np.round(canvas), 0, 255).astype(np.uint8), centers


def _simulate_viewing(rng, centers, width, height, bias, model, subject_id, image_id):
    n_fix, n_samp = model.fixations_per_image, model.samples_per_fixation
    center = np.array([(width - 1) / 2.0, (height - 1) / 2.0])
    points = []
    for _ in range(n_fix):
        if rng.random() < bias:
            loc = center + rng.normal(0.0, model.center_sigma_px, size=2)
        else:
            loc = centers[rng.integers(len(centers))] + rng.normal(
                0.0, model.object_radius_px / 2.0, size=2
            )
        points.append(loc + rng.normal(0.0, model.gaze_jitter_px, size=(n_samp, 2)))
    xy = np.round(np.concatenate(points), 2)
    t = np.round(np.arange(n_fix * n_samp) * (1000.0 / model.sample_rate_hz), 3)
    return GazeSeries(subject_id, image_id, t, xy[:, 0], xy[:, 1])


def synth_gaze(n_subjects_per_group, n_images, image_size, model, seed):
    """Images plus raw gaze series; every draw is keyed by ``(seed, entity)``."""
    model.validate()
    if n_subjects_per_group < 1 or n_images < 1:
        raise ConfigError("n_subjects_per_group and n_images must be >= 1")
    width, height = image_size
    if width < 2 or height < 2:
        raise ConfigError("image_size must be at least 2x2")
    signal = None if model.signal_images is None else set(model.signal_images)

    images, objects = {}, {}
    for j in range(n_images):
        image_id = f"img{j:03d}"
        pixels, centers = _render_image(np.random.default_rng([seed, 0, j]), width, height, model)
        images[image_id] = StimulusImage(image_id, pixels)
        objects[image_id] = centers

    labels, series = {}, []
    ids = subject_ids(n_subjects_per_group)
    for s, sid in enumerate(ids):
        label = TD if s < n_subjects_per_group else ASD
        labels[sid] = label
        for j, image_id in enumerate(images):
            carries_signal = signal is None or j in signal
            bias = model.center_bias_asd if label == ASD and carries_signal else model.center_bias_td
            rng = np.random.default_rng([seed, 1, s, j])
            series.append(
                _simulate_viewing(rng, objects[image_id], width, height, bias, model, sid, image_id)
            )
    logger.info(
        "synthesized %d subjects x %d images (%dx%d), seed %d",
        len(ids), n_images, width, height, seed,
    )
    return SyntheticCohort(images=images, series=series, labels=labels, objects=objects)


def synth_cohort(n_subjects_per_group, n_images, image_size, model, seed, sigma_px=24.0):
    """A ready CohortDataset with fixation maps built from the simulated gaze."""
    raw = synth_gaze(n_subjects_per_group, n_images, image_size, model, seed)
    by_subject = {sid: SubjectRecord(sid, label) for sid, label in raw.labels.items()}
    for s in raw.series:
        img = raw.images[s.image_id]
        by_subject[s.subject_id].maps[s.image_id] = build_hfm(
            s, img.width, img.height, model.sample_rate_hz, sigma_px
        )
    return CohortDataset(image_ids=list(raw.images), images=raw.images, subjects=by_subject)
