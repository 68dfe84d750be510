"""Teacher side: agent descriptors, synthetic stand-ins, knowledge extraction.

Every agent is a frozen seeded random network behind a uniform interface.
An agent's `signal` controls the view it computes from: 1.0 reads the clean
per-class prototype the batch carries, 0.0 reads the pooled noisy tokens.
`noise` adds a per-sample jitter on top, so a roster can mix teachers worth
listening to with teachers the gates should learn to ignore. `gain` scales
the whole emission of feature-producing agents (vision and language); real
rosters mix teachers with very different feature norms, and the width
adapters have to absorb the difference.

Nothing in this module is trainable, and extraction is strictly per sample,
so results never depend on how a batch was assembled. All outputs pass
through :func:`quantize` (a float32 round-trip) before anyone consumes them;
that makes training from live agents and training from a cache file
bit-identical, because the cache stores float32.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import torch
from torch import Tensor

from .errors import (AgentLookupError, ConfigurationError, InvalidInputError)
from .model import ScoreMatrix, cosine_matrix
from .seeding import make_generator

MODALITIES = ("vision", "language", "t2i", "i2t")
KINDS = ("synthetic", "constant", "mean_patch")
SKETCH_CAP = 16  # language agents read at most this many numbers per description
_FLOAT_RE = re.compile(r"-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


def quantize(t: Tensor) -> Tensor:
    """Round through float32. Agent knowledge crosses into training at
    cache precision whether or not a cache file is involved."""
    return t.to(torch.float32).to(torch.float64)


@dataclass(frozen=True)
class AgentDescriptor:
    agent_id: str
    modality: str
    feature_width: int
    layer_count: int = 0  # vision only
    seed: int = 0
    kind: str = "synthetic"
    signal: float = 1.0  # 1.0 = reads the clean class signal, 0.0 = the noisy pooled tokens
    noise: float = 0.0  # per-sample output jitter
    gain: float = 1.0  # feature norm scale (vision/language emissions)
    sharpness: float = 1.0  # score contrast for t2i maps
    map_tokens: int = 8  # spatial tokens per cross-attention map
    constant: float = 0.0  # "constant" kind only

    def __post_init__(self):
        if not self.agent_id:
            raise ConfigurationError("agent_id must be non-empty")
        if self.modality not in MODALITIES:
            raise ConfigurationError(f"{self.agent_id}: modality must be one of {MODALITIES}")
        if self.kind not in KINDS:
            raise ConfigurationError(f"{self.agent_id}: kind must be one of {KINDS}")
        if self.feature_width < 1:
            raise ConfigurationError(f"{self.agent_id}: feature_width must be positive")
        if self.modality == "vision" and self.layer_count < 1:
            raise ConfigurationError(f"{self.agent_id}: vision agents need layer_count >= 1")
        if self.modality == "t2i" and self.map_tokens < 1:
            raise ConfigurationError(f"{self.agent_id}: map_tokens must be positive")
        if not 0.0 <= self.signal <= 1.0:
            raise ConfigurationError(f"{self.agent_id}: signal must be within [0, 1]")
        if self.noise < 0.0:
            raise ConfigurationError(f"{self.agent_id}: noise must be non-negative")
        if not self.gain > 0.0 or not math.isfinite(self.gain):
            raise ConfigurationError(f"{self.agent_id}: gain must be positive and finite")


@dataclass(frozen=True)
class AgentFeatureBundle:
    agent_id: str
    per_layer_features: tuple | None = None  # vision: one (N, C_a) per layer
    class_features: Tensor | None = None  # language: (N_cls, C_a)


@dataclass(frozen=True)
class CrossAttentionMap:
    values: Tensor  # (N_cls, K)
    sample_id: str = ""


@dataclass(frozen=True)
class ClassDescriptionSet:
    agent_id: str
    descriptions: dict = field(default_factory=dict)  # class_id -> tuple of texts

    def __post_init__(self):
        if not self.descriptions:
            raise InvalidInputError("a description set needs at least one class")
        for c, texts in self.descriptions.items():
            if not texts:
                raise InvalidInputError(f"class {c} has no descriptions")


# -- registry ---------------------------------------------------------------

_REGISTRY_FIELDS = {f: None for f in (
    "agent_id", "modality", "feature_width", "layer_count", "seed", "kind",
    "signal", "noise", "gain", "sharpness", "map_tokens", "constant")}


def load_registry(path) -> dict:
    import yaml
    raw = yaml.safe_load(open(path)) or []
    if not isinstance(raw, list):
        raise ConfigurationError(f"{path}: registry must be a list of agent entries")
    registry: dict[str, AgentDescriptor] = {}
    for entry in raw:
        if not isinstance(entry, dict):
            raise ConfigurationError(f"{path}: each registry entry must be a mapping")
        unknown = set(entry) - set(_REGISTRY_FIELDS)
        if unknown:
            raise ConfigurationError(f"{path}: unknown registry fields {sorted(unknown)}")
        desc = AgentDescriptor(**entry)
        if desc.agent_id in registry:
            raise ConfigurationError(f"duplicate agent id: {desc.agent_id}")
        registry[desc.agent_id] = desc
    return registry


def save_registry(agents, path) -> None:
    import yaml
    entries = []
    for desc in agents.values() if isinstance(agents, dict) else agents:
        entries.append({f: getattr(desc, f) for f in _REGISTRY_FIELDS})
    with open(path, "w") as fh:
        yaml.safe_dump(entries, fh, sort_keys=False)


def get_agent(registry: dict, agent_id: str) -> AgentDescriptor:
    try:
        return registry[agent_id]
    except KeyError:
        raise AgentLookupError(f"unknown agent id: {agent_id}") from None


def registry_fingerprint(registry: dict) -> dict:
    """What the cache remembers about its producers: seed and shape per agent."""
    return {
        a.agent_id: {"modality": a.modality, "feature_width": a.feature_width,
                     "layer_count": a.layer_count, "seed": a.seed,
                     "map_tokens": a.map_tokens}
        for a in registry.values()
    }


def default_registry() -> dict:
    """A small mixed roster: two listenable teachers plus one dud per channel."""
    agents = [
        AgentDescriptor("vis-a", "vision", feature_width=24, layer_count=3, seed=11, noise=0.05),
        AgentDescriptor("vis-b", "vision", feature_width=16, layer_count=2, seed=12, noise=0.05),
        AgentDescriptor("vis-dud", "vision", feature_width=24, layer_count=3, seed=13, signal=0.0, noise=3.0),
        AgentDescriptor("lang-a", "language", feature_width=24, seed=21, noise=0.02),
        AgentDescriptor("lang-b", "language", feature_width=16, seed=22, noise=0.02),
        AgentDescriptor("lang-dud", "language", feature_width=24, seed=23, signal=0.0, noise=3.0),
        AgentDescriptor("t2i-a", "t2i", feature_width=16, seed=31, sharpness=4.0, noise=0.1),
        AgentDescriptor("t2i-dud", "t2i", feature_width=16, seed=32, sharpness=4.0, signal=0.0, noise=3.0),
        AgentDescriptor("i2t-a", "i2t", feature_width=16, seed=41, noise=0.05),
    ]
    return {a.agent_id: a for a in agents}


# -- frozen nets ------------------------------------------------------------

def _net(agent: AgentDescriptor, role: str, in_width: int, out_width: int):
    """Frozen two-layer map for this agent and role; regenerated on demand."""
    hidden = 2 * out_width
    g = make_generator("agent-net", agent.agent_id, agent.seed, role, in_width)
    w1 = torch.randn(in_width, hidden, generator=g, dtype=torch.float64) / math.sqrt(in_width)
    w2 = torch.randn(hidden, out_width, generator=g, dtype=torch.float64) / math.sqrt(hidden)
    return w1, w2


def _sample_view(agent: AgentDescriptor, tokens: Tensor, clean: Tensor) -> Tensor:
    # what this agent looks at: (W,) per sample
    return agent.signal * clean + (1.0 - agent.signal) * tokens.mean(dim=0)


def _jitter(agent: AgentDescriptor, shape, *parts) -> Tensor:
    if agent.noise == 0.0:
        return torch.zeros(shape, dtype=torch.float64)
    g = make_generator("agent-noise", agent.agent_id, agent.seed, *parts)
    return agent.noise * torch.randn(*shape, generator=g, dtype=torch.float64)


# -- vision -----------------------------------------------------------------

def extract_vision_features(agent: AgentDescriptor, batch) -> AgentFeatureBundle:
    """Per-layer (N, C_a) feature matrices for a batch, deterministic per sample."""
    if agent.modality != "vision":
        raise InvalidInputError(f"{agent.agent_id} is a {agent.modality} agent, not vision")
    tokens = batch.tokens
    n, width = tokens.shape[0], agent.feature_width
    if agent.kind == "constant":
        layer = torch.full((n, width), float(agent.constant) * agent.gain, dtype=torch.float64)
        return AgentFeatureBundle(agent.agent_id, tuple(layer.clone() for _ in range(agent.layer_count)))
    if agent.kind == "mean_patch":
        if width != tokens.shape[-1]:
            raise ConfigurationError(
                f"{agent.agent_id}: mean_patch width must equal the token width {tokens.shape[-1]}")
        seq_len = tokens.shape[1]
        layers = []
        for layer_idx in range(agent.layer_count):
            prefix = math.ceil((layer_idx + 1) * seq_len / agent.layer_count)
            layers.append(quantize(agent.gain * tokens[:, :prefix].mean(dim=1)))
        return AgentFeatureBundle(agent.agent_id, tuple(layers))
    nets = [_net(agent, f"vision{layer}", tokens.shape[-1], width) for layer in range(agent.layer_count)]
    layers = [[] for _ in range(agent.layer_count)]
    for i in range(n):
        view = _sample_view(agent, tokens[i], batch.clean[i])
        sid = batch.sample_ids[i]
        for layer_idx, (w1, w2) in enumerate(nets):
            f = agent.gain * (torch.tanh(view @ w1) @ w2 + _jitter(agent, (width,), sid, layer_idx))
            layers[layer_idx].append(f)
    return AgentFeatureBundle(agent.agent_id, tuple(quantize(torch.stack(rows)) for rows in layers))


# -- language ---------------------------------------------------------------

def language_encoder(agent: AgentDescriptor):
    """The agent's frozen text encoder: numbers in the description drive it."""
    if agent.modality != "language":
        raise InvalidInputError(f"{agent.agent_id} is a {agent.modality} agent, not language")
    w1, w2 = _net(agent, "language", SKETCH_CAP, agent.feature_width)

    def encode(text: str) -> Tensor:
        vals = [float(v) for v in _FLOAT_RE.findall(text)][:SKETCH_CAP]
        x = torch.zeros(SKETCH_CAP, dtype=torch.float64)
        x[: len(vals)] = torch.tensor(vals, dtype=torch.float64)
        f = agent.signal * (torch.tanh(x @ w1) @ w2)
        return quantize(agent.gain * (f + _jitter(agent, (agent.feature_width,), text)))

    return encode


def extract_language_features(descs: ClassDescriptionSet, text_encoder, class_ids=None) -> AgentFeatureBundle:
    """Encode every description and mean-pool per class into (N_cls, C_a)."""
    ids = sorted(descs.descriptions) if class_ids is None else list(class_ids)
    if not ids:
        raise InvalidInputError("no classes to extract language features for")
    rows = []
    for c in ids:
        texts = descs.descriptions.get(c)
        if not texts:
            raise InvalidInputError(f"class {c} is missing from the description set")
        rows.append(torch.stack([torch.as_tensor(text_encoder(t), dtype=torch.float64) for t in texts]).mean(dim=0))
    return AgentFeatureBundle(descs.agent_id, class_features=quantize(torch.stack(rows)))


def save_descriptions(descs: ClassDescriptionSet, path) -> None:
    with open(path, "w") as fh:
        for c in sorted(descs.descriptions):
            for text in descs.descriptions[c]:
                fh.write(f"{c}\t{text}\n")


def load_descriptions(path, agent_id: str) -> ClassDescriptionSet:
    table: dict[int, list] = {}
    for line in open(path):
        line = line.rstrip("\n")
        if not line:
            continue
        cid, _, text = line.partition("\t")
        table.setdefault(int(cid), []).append(text)
    return ClassDescriptionSet(agent_id, {c: tuple(t) for c, t in table.items()})


# -- multi-modal ------------------------------------------------------------

def extract_t2i_maps(agent: AgentDescriptor, batch, class_reps: Tensor, class_ids):
    """One (N_cls, K) cross-attention map per sample.

    Each class row is the agent's image/class affinity smeared over K spatial
    tokens with per-token jitter; pooling back into a score is the consumer's
    business, so the pooling ablation never touches extraction.
    """
    if agent.modality != "t2i":
        raise InvalidInputError(f"{agent.agent_id} is a {agent.modality} agent, not t2i")
    if class_reps.shape[0] != len(class_ids):
        raise InvalidInputError("one class representation per class id required")
    tokens = batch.tokens
    wv1, wv2 = _net(agent, "t2i-image", tokens.shape[-1], agent.feature_width)
    wt1, wt2 = _net(agent, "t2i-class", class_reps.shape[-1], agent.feature_width)
    class_vecs = torch.tanh(class_reps @ wt1) @ wt2
    maps = []
    for i in range(tokens.shape[0]):
        view = _sample_view(agent, tokens[i], batch.clean[i])
        u = torch.tanh(view @ wv1) @ wv2
        affinity = cosine_matrix(u.unsqueeze(0), class_vecs)[0] * agent.sharpness  # (N_cls,)
        sid = batch.sample_ids[i]
        rows = [affinity[c].repeat(agent.map_tokens) + _jitter(agent, (agent.map_tokens,), sid, "map", int(cls))
                for c, cls in enumerate(class_ids)]
        maps.append(CrossAttentionMap(quantize(torch.stack(rows)), sid))
    return maps


def t2i_scores(maps, mode: str = "lse") -> ScoreMatrix:
    """Pool per-class attention maps into class scores.

    lse keeps a smooth soft-maximum over spatial tokens; average and max are
    the blunt alternatives kept for comparison.
    """
    if isinstance(maps, CrossAttentionMap):
        values = maps.values.unsqueeze(0)
    elif isinstance(maps, (list, tuple)):
        if not maps:
            raise InvalidInputError("t2i_scores needs at least one map")
        values = torch.stack([m.values if isinstance(m, CrossAttentionMap) else m for m in maps])
    else:
        values = maps if maps.dim() == 3 else maps.unsqueeze(0)
    if values.shape[-1] < 1:
        raise InvalidInputError("attention maps need at least one spatial token")
    if mode == "lse":
        pooled = torch.logsumexp(values, dim=-1)
    elif mode == "average":
        pooled = values.mean(dim=-1)
    elif mode == "max":
        pooled = values.amax(dim=-1)
    else:
        raise ConfigurationError(f"pooling mode must be lse, average or max, got {mode!r}")
    return ScoreMatrix(pooled, "t2i")


def i2t_scores(projected_visual, class_text) -> ScoreMatrix:
    """Cosine between the agent's projected image features and its class texts."""
    return ScoreMatrix(cosine_matrix(projected_visual, class_text), "i2t")


def extract_i2t_scores(agent: AgentDescriptor, batch, class_reps: Tensor) -> ScoreMatrix:
    """(N, N_cls) cosine scores from the agent's own frozen projections."""
    if agent.modality != "i2t":
        raise InvalidInputError(f"{agent.agent_id} is a {agent.modality} agent, not i2t")
    tokens = batch.tokens
    wi1, wi2 = _net(agent, "i2t-image", tokens.shape[-1], agent.feature_width)
    wt1, wt2 = _net(agent, "i2t-class", class_reps.shape[-1], agent.feature_width)
    class_vecs = quantize(torch.tanh(class_reps @ wt1) @ wt2)
    rows = []
    for i in range(tokens.shape[0]):
        view = _sample_view(agent, tokens[i], batch.clean[i])
        f = torch.tanh(view @ wi1) @ wi2 + _jitter(agent, (agent.feature_width,), batch.sample_ids[i])
        rows.append(i2t_scores(quantize(f).unsqueeze(0), class_vecs).values[0])
    return ScoreMatrix(quantize(torch.stack(rows)), "i2t")
