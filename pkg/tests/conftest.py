import pytest
import torch
from hypothesis import HealthCheck, settings

from transagent.agents import AgentDescriptor
from transagent.config import default_config
from transagent.data import SyntheticBenchmark

torch.set_num_threads(1)

settings.register_profile(
    "suite", max_examples=30, deadline=None,
    suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("suite")


def small_cfg_dict(**overrides):
    """A config small enough that a full train run takes a second or two."""
    cfg = default_config()
    cfg.update({
        "dataset.n_classes": 6,
        "dataset.tokens_per_image": 4,
        "dataset.train_per_class": 6,
        "dataset.test_per_class": 4,
        "dataset.sketch_dim": 4,
        "encoder.depth": 2,
        "encoder.width": 16,
        "encoder.embed_width": 8,
        "prompt.depth": 2,
        "train.epochs": 2,
        "train.shots": 4,
    })
    cfg.update(overrides)
    return cfg


def small_registry_dict():
    agents = [
        AgentDescriptor("vis-a", "vision", 12, layer_count=2, seed=11, noise=0.05),
        AgentDescriptor("vis-b", "vision", 8, layer_count=3, seed=12, noise=0.05),
        AgentDescriptor("lang-a", "language", 12, seed=21, noise=0.02),
        AgentDescriptor("t2i-a", "t2i", 8, seed=31, sharpness=4.0, noise=0.1, map_tokens=5),
        AgentDescriptor("i2t-a", "i2t", 8, seed=41, noise=0.05),
    ]
    return {a.agent_id: a for a in agents}


@pytest.fixture
def small_cfg():
    return small_cfg_dict()


@pytest.fixture
def dataset(small_cfg):
    return SyntheticBenchmark.from_config(small_cfg)


@pytest.fixture
def registry():
    return small_registry_dict()


@pytest.fixture(scope="session")
def trained_small():
    """One short full-featured run shared by read-only tests."""
    from transagent.evaluate import base_novel_split, few_shot_sample
    from transagent.train import train

    cfg = small_cfg_dict()
    dataset = SyntheticBenchmark.from_config(cfg)
    registry = small_registry_dict()
    split = base_novel_split(dataset.class_ids(), cfg["split.seed"])
    shots = few_shot_sample(dataset, cfg["train.shots"], cfg["train.seed"], split.base)
    sample_ids = [sid for c in split.base for sid in shots[c]]
    state = train(cfg, dataset, split.base, sample_ids, registry)
    return {"cfg": cfg, "dataset": dataset, "registry": registry, "split": split,
            "sample_ids": sample_ids, "state": state}
