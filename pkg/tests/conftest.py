import numpy as np
import pytest

from gazeclass import ASD, TD
from gazeclass.network import CohortFeatures, TrainHyper, build_asdnet

# Config overrides for a cohort small enough for command tests.
TINY_RUN = [
    "synth.n_subjects_per_group=3",
    "synth.n_images=3",
    "synth.image_width=40",
    "synth.image_height=30",
    "synth.object_radius_px=5",
    "hfm.sigma_px=3",
    "hfm.resize=24",
    "hfm.crop=16",
    "backbone.feature_dim=4",
    "train.hidden_dim=8",
    "train.max_iter=20",
    "train.base_lr=0.01",
    "analysis.tsne_iterations=250",
]


@pytest.fixture(scope="session")
def tiny_settings():
    """TINY_RUN as repeated --set options."""
    return [arg for item in TINY_RUN for arg in ("--set", item)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def planted_features():
    """Six image-data of dimension 4; only row 2 of the fixation stream carries the label."""
    rng = np.random.default_rng(7)
    n_images, dim = 6, 4
    labels = {f"td{i}": TD for i in range(5)} | {f"asd{i}": ASD for i in range(5)}
    image = [rng.random((n_images, dim)) for _ in range(10)]
    hfm = {}
    for s, (sid, label) in enumerate(labels.items()):
        mats = []
        for v in range(10):
            m = rng.random((n_images, dim))
            m[2, 0] = 1.0 + 2.0 * label + 0.1 * rng.random()
            mats.append(m)
        hfm[sid] = mats
    return CohortFeatures(
        image=image, hfm=hfm, labels=labels, image_ids=[f"img{j:03d}" for j in range(n_images)]
    )


@pytest.fixture
def planted_head():
    """A hand-wired ASDNet whose ASD logit grows with hfm row 2, column 0."""
    net = build_asdnet(6, 4, TrainHyper(hidden_dim=2, precision="float64"), seed=0)
    fc1 = np.zeros((2, 24))
    fc1[0, 2 * 4 + 0] = 1.0
    fc2 = np.array([[-1.0, 0.0], [1.0, 0.0]])
    return net.with_params({
        (0, "weight"): np.array([0.0, 1.0]).reshape(1, 2, 1, 1),
        (0, "bias"): np.zeros(1),
        (3, "weight"): fc1,
        (3, "bias"): np.zeros(2),
        (6, "weight"): fc2,
        (6, "bias"): np.array([2.0, -2.0]),
    })
