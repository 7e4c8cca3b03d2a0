import os

import numpy as np
import pytest
import torch

from sam_aging.core import TrainConfig
from sam_aging.encoder import SamModel, build_encoder
from sam_aging.generator import ToyGenerator, toy_dataset
from sam_aging.oracles import AgePredictor, IdentityEmbedder, Oracles, PerceptualExtractor

torch.set_num_threads(1)

# Set SAM_AGING_TEST_RUNS to a directory to keep the trained toy runs between sessions.
RUNS_ENV = "SAM_AGING_TEST_RUNS"


@pytest.fixture(scope="session")
def gen():
    return ToyGenerator(num_layers=8, style_dim=64, resolution=32, seed=0)


@pytest.fixture(scope="session")
def small_oracles():
    """Untrained (random) stand-ins: enough for contracts that do not depend on accuracy."""
    torch.manual_seed(123)
    return Oracles(AgePredictor(32, 4), IdentityEmbedder(0.7, width=4), PerceptualExtractor((4, 8, 8))).freeze()


@pytest.fixture
def small_model(gen):
    aging = build_encoder(4, gen.num_layers, gen.style_dim, gen.resolution, width=4, seed=1)
    inverter = build_encoder(3, gen.num_layers, gen.style_dim, gen.resolution, width=4, seed=2)
    return SamModel(aging, inverter, gen)


@pytest.fixture(scope="session")
def toy_batch(gen):
    return toy_dataset(gen, 6, seed=7)


def _runs_root(tmp_path_factory):
    root = os.environ.get(RUNS_ENV)
    if root:
        os.makedirs(root, exist_ok=True)
        return root
    return str(tmp_path_factory.mktemp("toy-runs"))


def _pipeline(root, name, cfg):
    from sam_aging.pipeline import PipelineResult, load_model, prepare, run_pipeline
    from sam_aging.evaluation import read_metric_csv

    out = os.path.join(root, name)
    done = os.path.join(out, "identity_gap.csv")
    if os.path.exists(done):
        run = prepare(cfg, out)
        model, _ = load_model(run, os.path.join(out, "sam.npz"))
        return PipelineResult(run, model, read_metric_csv(os.path.join(out, "aging_accuracy.csv")),
                              read_metric_csv(os.path.join(out, "aging_accuracy_step0.csv")),
                              read_metric_csv(done))
    return run_pipeline(cfg, out)


@pytest.fixture(scope="session")
def runs_root(tmp_path_factory):
    return _runs_root(tmp_path_factory)


@pytest.fixture(scope="session")
def acceptance_run(runs_root):
    """The pinned toy experiment: default config, seed 0, full pretrain -> train -> eval."""
    return _pipeline(runs_root, "run_a", TrainConfig())


@pytest.fixture(scope="session")
def acceptance_run_repeat(runs_root):
    return _pipeline(runs_root, "run_b", TrainConfig())


@pytest.fixture(scope="session")
def direct_run(acceptance_run, runs_root):
    """Direct-mode model trained under the same budget, seed and frozen networks."""
    from sam_aging.pipeline import evaluate_model, load_model, train_model

    run = acceptance_run.run
    cfg = run.cfg.replace(mode="direct")
    out = os.path.join(runs_root, "run_a_direct")
    if os.path.exists(os.path.join(out, "sam.npz")):
        model, _ = load_model(run, os.path.join(out, "sam.npz"))
    else:
        model, _ = train_model(run, cfg, out)
    aging, ident = evaluate_model(run, model, run.heldout_data().images)
    return model, aging, ident


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_TRAINED_FIXTURES = {"acceptance_run", "acceptance_run_repeat", "direct_run"}


def pytest_collection_modifyitems(items):
    for item in items:
        if _TRAINED_FIXTURES & set(getattr(item, "fixturenames", ())):
            item.add_marker(pytest.mark.slow)
