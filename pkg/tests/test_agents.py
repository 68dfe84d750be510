import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from oracles import lse_ref
from transagent.agents import (AgentDescriptor, ClassDescriptionSet, default_registry,
                               extract_i2t_scores, extract_language_features, extract_t2i_maps,
                               extract_vision_features, get_agent, i2t_scores, language_encoder,
                               load_descriptions, load_registry, quantize, registry_fingerprint,
                               save_descriptions, save_registry, t2i_scores)
from transagent.errors import AgentLookupError, ConfigurationError, InvalidInputError


def rand(shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


# -- descriptors and registry ---------------------------------------------------

def test_descriptor_validation():
    with pytest.raises(ConfigurationError):
        AgentDescriptor("x", "audio", 8)
    with pytest.raises(ConfigurationError):
        AgentDescriptor("x", "vision", 0)
    with pytest.raises(ConfigurationError):
        AgentDescriptor("x", "vision", 8, layer_count=0)
    with pytest.raises(ConfigurationError):
        AgentDescriptor("", "vision", 8, layer_count=1)
    with pytest.raises(ConfigurationError):
        AgentDescriptor("x", "t2i", 8, map_tokens=0)
    with pytest.raises(ConfigurationError):
        AgentDescriptor("x", "vision", 8, layer_count=1, signal=2.0)


def test_registry_round_trip(tmp_path, registry):
    p = tmp_path / "agents.yaml"
    save_registry(registry, p)
    loaded = load_registry(p)
    assert loaded == registry


def test_registry_rejects_unknown_fields(tmp_path):
    p = tmp_path / "agents.yaml"
    p.write_text("- agent_id: a\n  modality: vision\n  feature_width: 8\n  layer_count: 1\n  frobnicate: 3\n")
    with pytest.raises(ConfigurationError):
        load_registry(p)


def test_registry_rejects_duplicate_ids(tmp_path):
    p = tmp_path / "agents.yaml"
    p.write_text(
        "- agent_id: a\n  modality: vision\n  feature_width: 8\n  layer_count: 1\n"
        "- agent_id: a\n  modality: i2t\n  feature_width: 8\n")
    with pytest.raises(ConfigurationError):
        load_registry(p)


def test_get_agent_lookup(registry):
    assert get_agent(registry, "vis-a").modality == "vision"
    with pytest.raises(AgentLookupError):
        get_agent(registry, "missing")


def test_default_registry_covers_all_modalities():
    reg = default_registry()
    assert {a.modality for a in reg.values()} == {"vision", "language", "t2i", "i2t"}
    # includes deliberately uninformative agents for the gate to learn around
    assert any(a.signal == 0.0 for a in reg.values())


def test_fingerprint_tracks_identity_not_noise(registry):
    fp = registry_fingerprint(registry)
    assert set(fp) == set(registry)
    assert fp["vis-a"]["layer_count"] == 2
    assert "noise" not in fp["vis-a"]


# -- quantization boundary -------------------------------------------------------

def test_quantize_lands_on_the_float32_grid():
    x = rand((50,), 1) * 10
    q = quantize(x)
    assert q.dtype == torch.float64
    assert torch.equal(q, q.to(torch.float32).to(torch.float64))
    assert torch.equal(quantize(q), q)  # idempotent
    assert not torch.equal(q, x)  # double values rarely sit on the grid


# -- vision agents ---------------------------------------------------------------

def test_vision_features_shapes_and_determinism(dataset, registry):
    agent = registry["vis-a"]
    ids = dataset.sample_ids("train", 0)[:3]
    batch = dataset.batch(ids)
    out1 = extract_vision_features(agent, batch)
    out2 = extract_vision_features(agent, batch)
    assert len(out1.per_layer_features) == agent.layer_count
    for a, b in zip(out1.per_layer_features, out2.per_layer_features):
        assert a.shape == (3, agent.feature_width)
        assert torch.equal(a, b)


def test_vision_features_do_not_depend_on_batch_composition(dataset, registry):
    agent = registry["vis-a"]
    ids = dataset.sample_ids("train", 1)[:4]
    full = extract_vision_features(agent, dataset.batch(ids))
    solo = extract_vision_features(agent, dataset.batch([ids[2]]))
    for layer_full, layer_solo in zip(full.per_layer_features, solo.per_layer_features):
        assert torch.equal(layer_full[2], layer_solo[0])


def test_vision_modality_guard(dataset, registry):
    batch = dataset.batch(dataset.sample_ids("train", 0)[:1])
    with pytest.raises(InvalidInputError):
        extract_vision_features(registry["lang-a"], batch)


def test_constant_agent_emits_its_constant(dataset):
    agent = AgentDescriptor("flat", "vision", 6, layer_count=2, kind="constant", constant=0.75)
    batch = dataset.batch(dataset.sample_ids("train", 0)[:2])
    out = extract_vision_features(agent, batch)
    for layer in out.per_layer_features:
        assert torch.equal(layer, torch.full((2, 6), 0.75, dtype=torch.float64))


def test_mean_patch_agent_pools_prefixes(dataset):
    width = dataset.width
    agent = AgentDescriptor("pool", "vision", width, layer_count=2, kind="mean_patch")
    ids = dataset.sample_ids("train", 0)[:2]
    batch = dataset.batch(ids)
    out = extract_vision_features(agent, batch)
    tokens = batch.tokens
    length = tokens.shape[1]
    for layer_idx, layer in enumerate(out.per_layer_features):
        cut = math.ceil((layer_idx + 1) * length / agent.layer_count)
        want = quantize(tokens[:, :cut].mean(dim=1))
        assert torch.equal(layer, want)


def test_mean_patch_agent_needs_token_width(dataset):
    agent = AgentDescriptor("pool", "vision", dataset.width + 1, layer_count=1, kind="mean_patch")
    batch = dataset.batch(dataset.sample_ids("train", 0)[:1])
    with pytest.raises(ConfigurationError):
        extract_vision_features(agent, batch)


def test_dud_agent_ignores_the_class_signal(dataset):
    # signal 0 means the view is the raw token mean: same tokens, same output,
    # regardless of which class the sample belongs to
    dud = AgentDescriptor("dud", "vision", 8, layer_count=1, seed=5, signal=0.0, noise=0.0)
    b0 = dataset.batch(dataset.sample_ids("train", 0)[:1])
    feats = extract_vision_features(dud, b0).per_layer_features[0]
    fake = type(b0)(tokens=b0.tokens, labels=(3,), sample_ids=b0.sample_ids,
                    clean=dataset.class_reps([3]))
    feats_fake = extract_vision_features(dud, fake).per_layer_features[0]
    assert torch.equal(feats, feats_fake)


# -- language agents --------------------------------------------------------------

def test_language_encoder_reads_numbers(registry):
    enc = language_encoder(registry["lang-a"])
    a = enc("class 0 looks like 0.1, -0.3, 0.2")
    b = enc("class 0 looks like 0.1, -0.3, 0.2")
    c = enc("class 0 looks like 0.9, 0.9, 0.9")
    assert a.shape == (registry["lang-a"].feature_width,)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_language_features_average_descriptions(registry):
    agent = AgentDescriptor("lang-clean", "language", 6, seed=3, noise=0.0)
    enc = language_encoder(agent)
    descs = ClassDescriptionSet("lang-clean", {0: ("0.5 0.25", "0.75 0.1"), 1: ("0.9",)})
    out = extract_language_features(descs, enc, [0, 1])
    want0 = quantize((enc("0.5 0.25") + enc("0.75 0.1")) / 2)
    assert torch.equal(out.class_features[0], want0)
    assert torch.equal(out.class_features[1], quantize(enc("0.9")))


def test_language_features_missing_class(registry):
    enc = language_encoder(registry["lang-a"])
    descs = ClassDescriptionSet("lang-a", {0: ("0.5",)})
    with pytest.raises(InvalidInputError):
        extract_language_features(descs, enc, [0, 1])


def test_description_set_rejects_empty():
    with pytest.raises(InvalidInputError):
        ClassDescriptionSet("a", {})
    with pytest.raises(InvalidInputError):
        ClassDescriptionSet("a", {0: ()})


def test_descriptions_file_round_trip(tmp_path):
    descs = ClassDescriptionSet("a", {0: ("alpha 0.1", "beta 0.2"), 2: ("gamma -0.3",)})
    p = tmp_path / "a.txt"
    save_descriptions(descs, p)
    assert load_descriptions(p, "a") == descs


# -- cross-attention agents --------------------------------------------------------

def test_t2i_maps_shapes_and_keying(dataset, registry):
    agent = registry["t2i-a"]
    ids = dataset.sample_ids("train", 0)[:2]
    batch = dataset.batch(ids)
    class_ids = [0, 1, 2]
    maps = extract_t2i_maps(agent, batch, dataset.class_reps(class_ids), class_ids)
    assert len(maps) == 2
    assert maps[0].values.shape == (3, agent.map_tokens)
    assert maps[0].sample_id == ids[0]
    # per-sample values ignore which other samples shared the batch
    solo = extract_t2i_maps(agent, dataset.batch([ids[1]]), dataset.class_reps(class_ids), class_ids)
    assert torch.equal(maps[1].values, solo[0].values)
    # and each class row is keyed by the global class id, not list position
    swapped = extract_t2i_maps(agent, dataset.batch([ids[1]]),
                               dataset.class_reps([2, 1, 0]), [2, 1, 0])
    assert torch.equal(swapped[0].values[2], solo[0].values[0])


def test_t2i_map_class_count_guard(dataset, registry):
    batch = dataset.batch(dataset.sample_ids("train", 0)[:1])
    with pytest.raises(InvalidInputError):
        extract_t2i_maps(registry["t2i-a"], batch, dataset.class_reps([0, 1]), [0])


def test_t2i_pooling_closed_forms():
    k = 7
    const = torch.full((1, 3, k), 1.25, dtype=torch.float64)
    lse = t2i_scores(const, "lse").values
    assert torch.allclose(lse, torch.full((1, 3), 1.25 + math.log(k), dtype=torch.float64), atol=1e-9)
    assert torch.allclose(t2i_scores(const, "average").values,
                          torch.full((1, 3), 1.25, dtype=torch.float64), atol=0)
    assert torch.allclose(t2i_scores(const, "max").values,
                          torch.full((1, 3), 1.25, dtype=torch.float64), atol=0)
    single = torch.full((1, 2, 1), -0.5, dtype=torch.float64)
    assert torch.allclose(t2i_scores(single, "lse").values,
                          torch.full((1, 2), -0.5, dtype=torch.float64), atol=1e-12)


@given(st.integers(0, 10**6), st.integers(1, 9))
def test_lse_between_max_and_max_plus_log_k(seed, k):
    row = rand((k,), seed) * 3
    lse = float(t2i_scores(row.reshape(1, 1, k), "lse").values[0, 0])
    assert abs(lse - lse_ref(row.numpy())) < 1e-12
    assert float(row.max()) <= lse <= float(row.max()) + math.log(k) + 1e-12


def test_t2i_scores_validation():
    with pytest.raises(ConfigurationError):
        t2i_scores(torch.zeros(1, 2, 3, dtype=torch.float64), "softmax")
    with pytest.raises(InvalidInputError):
        t2i_scores(torch.zeros(1, 2, 0, dtype=torch.float64), "lse")
    with pytest.raises(InvalidInputError):
        t2i_scores([], "lse")


# -- image-to-text agents -----------------------------------------------------------

def test_i2t_scores_are_cosines():
    feats = rand((4, 6), 60)
    classes = rand((3, 6), 61)
    s = i2t_scores(feats, classes)
    assert s.kind == "i2t"
    assert s.values.shape == (4, 3)
    assert (s.values.abs() <= 1.0 + 1e-12).all()


def test_extract_i2t_scores_per_sample(dataset, registry):
    agent = registry["i2t-a"]
    ids = dataset.sample_ids("train", 2)[:3]
    batch = dataset.batch(ids)
    reps = dataset.class_reps([0, 1, 2])
    s = extract_i2t_scores(agent, batch, reps)
    assert s.values.shape == (3, 3)
    solo = extract_i2t_scores(agent, dataset.batch([ids[0]]), reps)
    assert torch.equal(s.values[0], solo.values[0])
    with pytest.raises(InvalidInputError):
        extract_i2t_scores(registry["vis-a"], batch, reps)


def test_all_extraction_outputs_are_quantized(dataset, registry):
    batch = dataset.batch(dataset.sample_ids("train", 0)[:2])
    reps = dataset.class_reps([0, 1])
    vis = extract_vision_features(registry["vis-a"], batch).per_layer_features[0]
    lang = extract_language_features(dataset.descriptions("lang-a"),
                                     language_encoder(registry["lang-a"]), [0, 1]).class_features
    t2i = extract_t2i_maps(registry["t2i-a"], batch, reps, [0, 1])[0].values
    i2t = extract_i2t_scores(registry["i2t-a"], batch, reps).values
    for t in (vis, lang, t2i, i2t):
        assert t.dtype == torch.float64
        assert torch.equal(t, t.to(torch.float32).to(torch.float64))
