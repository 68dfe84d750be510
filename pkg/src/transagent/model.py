"""Frozen two-tower encoder with deep learnable prompt tokens.

Both towers are small pre-norm transformers over precomputed token vectors;
there is no tokenizer here, datasets hand the encoders float sequences
directly. ``n_ctx`` learnable prompt vectors are prepended to every sequence.
At each of the first ``depth`` blocks the prompt slots are overwritten with
that block's own fresh vectors before attending, so deeper blocks see prompts
that were not filtered through earlier ones. Past the prompted depth the slot
outputs simply propagate.

The towers are frozen at construction. The only trainable state in this
module is the :class:`PromptSet`.

Shapes use B for batch, L for patch tokens, Lt for text tokens, W for the
tower width and C for the shared embedding width.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .errors import ConfigurationError, InvalidInputError, NumericalError
from .seeding import make_generator

# token ids for "a photo of a"; the article token appears twice
PHRASE_TOKEN_IDS = (1, 2, 3, 1)
VOCAB_SIZE = 32
# small enough that fresh prompts barely disturb the pretrained-style
# alignment; training has to earn any movement away from neutral
PROMPT_INIT_STD = 0.02
_NORM_FLOOR = 1e-12


def vocab_embeddings(seed: int, width: int) -> Tensor:
    """The frozen toy word-embedding table, (VOCAB_SIZE, W)."""
    g = make_generator("vocab", seed)
    return torch.randn(VOCAB_SIZE, width, generator=g, dtype=torch.float64) * PROMPT_INIT_STD


def phrase_embeddings(seed: int, width: int) -> Tensor:
    return vocab_embeddings(seed, width)[list(PHRASE_TOKEN_IDS)]


@dataclass(frozen=True)
class VisualTokenSequence:
    tokens: Tensor  # (L, W)
    sample_id: str = ""


@dataclass(frozen=True)
class TextualTokenSequence:
    tokens: Tensor  # (Lt, W)
    class_id: int = 0


@dataclass(frozen=True)
class EncodedFeature:
    values: Tensor  # (rows, C)
    modality: str  # "vision" | "text"


@dataclass(frozen=True)
class PromptOutput:
    values: Tensor  # (rows, C)


@dataclass(frozen=True)
class ScoreMatrix:
    values: Tensor  # (N, N_cls)
    kind: str  # "clip" | "learned_prompt" | "t2i" | "i2t" | "gated"


def as_values(x) -> Tensor:
    # bare tensors pass through; Tensor.values is the sparse accessor, not data
    if isinstance(x, Tensor):
        return x
    return x.values if hasattr(x, "values") else x


class PromptSet(nn.Module):
    """Per-layer visual and textual prompt vectors, one (n_ctx, W) block each."""

    def __init__(self, visual, textual):
        super().__init__()
        if len(visual) != len(textual):
            raise ConfigurationError("visual and textual prompt lists must have the same depth")
        if not visual:
            raise ConfigurationError("a PromptSet needs at least one layer")
        n_ctx = visual[0].shape[0]
        for t in list(visual) + list(textual):
            if t.shape[0] != n_ctx:
                raise ConfigurationError("n_ctx must be identical across prompt layers")
        self.visual = nn.ParameterList(nn.Parameter(t.detach().clone()) for t in visual)
        self.textual = nn.ParameterList(nn.Parameter(t.detach().clone()) for t in textual)

    @property
    def depth(self) -> int:
        return len(self.visual)

    @property
    def n_ctx(self) -> int:
        return self.visual[0].shape[0]

    def frozen_copy(self) -> "PromptSet":
        copy = PromptSet([p.detach() for p in self.visual], [p.detach() for p in self.textual])
        copy.requires_grad_(False)
        return copy


def init_prompts(cfg: dict) -> PromptSet:
    """Fresh prompts: first textual layer spells "a photo of a", the rest is noise."""
    n_ctx = cfg["prompt.n_ctx"]
    depth = cfg["prompt.depth"]
    width = cfg["encoder.width"]
    if depth > cfg["encoder.depth"]:
        raise ConfigurationError(
            f"prompt.depth={depth} exceeds encoder.depth={cfg['encoder.depth']}")
    phrase = phrase_embeddings(cfg["encoder.seed"], width)
    if n_ctx < phrase.shape[0]:
        raise ConfigurationError(
            f"prompt.n_ctx={n_ctx} is smaller than the {phrase.shape[0]}-token init phrase")
    g = make_generator("prompts", cfg["prompt.seed"])

    def draw(rows):
        return torch.randn(rows, width, generator=g, dtype=torch.float64) * PROMPT_INIT_STD

    visual = [draw(n_ctx) for _ in range(depth)]
    first = phrase if n_ctx == phrase.shape[0] else torch.cat([phrase, draw(n_ctx - phrase.shape[0])])
    textual = [first] + [draw(n_ctx) for _ in range(depth - 1)]
    return PromptSet(visual, textual)


class _Attention(nn.Module):
    def __init__(self, width: int, dtype):
        super().__init__()
        self.q = nn.Linear(width, width, dtype=dtype)
        self.k = nn.Linear(width, width, dtype=dtype)
        self.v = nn.Linear(width, width, dtype=dtype)
        self.out = nn.Linear(width, width, dtype=dtype)

    def forward(self, x: Tensor, causal: bool) -> Tensor:
        # single head; (B, S, W)
        scores = self.q(x) @ self.k(x).transpose(-2, -1) / math.sqrt(x.shape[-1])
        if causal:
            s = x.shape[-2]
            mask = torch.triu(torch.ones(s, s, dtype=torch.bool), diagonal=1)
            scores = scores.masked_fill(mask, float("-inf"))
        return self.out(torch.softmax(scores, dim=-1) @ self.v(x))


class _Block(nn.Module):
    def __init__(self, width: int, dtype):
        super().__init__()
        self.ln1 = nn.LayerNorm(width, dtype=dtype)
        self.attn = _Attention(width, dtype)
        self.ln2 = nn.LayerNorm(width, dtype=dtype)
        self.fc1 = nn.Linear(width, 2 * width, dtype=dtype)
        self.act = nn.GELU()  # exact erf form, smooth for finite-difference checks
        self.fc2 = nn.Linear(2 * width, width, dtype=dtype)

    def forward(self, x: Tensor, causal: bool) -> Tensor:
        x = x + self.attn(self.ln1(x), causal)
        return x + self.fc2(self.act(self.fc1(self.ln2(x))))


class _Tower(nn.Module):
    def __init__(self, depth: int, width: int, embed_width: int, dtype):
        super().__init__()
        self.blocks = nn.ModuleList(_Block(width, dtype) for _ in range(depth))
        self.proj = nn.Linear(width, embed_width, bias=False, dtype=dtype)


class DualEncoder(nn.Module):
    """One frozen tower run under two attention regimes.

    Image batches go through with bidirectional attention and mean pooling,
    class token sequences with causal attention and eos/sos pooling. The two
    routes share weights: that is the desk-scale stand-in for large-scale
    pretraining, and it is what gives the model usable zero-shot accuracy
    before any prompt is learned.
    """

    def __init__(self, depth: int, width: int, embed_width: int, seed: int = 0,
                 text_pool: str = "eos", dtype=torch.float64):
        super().__init__()
        if text_pool not in ("eos", "sos"):
            raise ConfigurationError(f"text_pool must be eos or sos, got {text_pool!r}")
        self.depth = depth
        self.width = width
        self.embed_width = embed_width
        self.text_pool = text_pool
        self.dtype = dtype
        self.vision = _Tower(depth, width, embed_width, dtype)
        self.text = self.vision
        self._init_frozen(seed)

    @classmethod
    def from_config(cls, cfg: dict) -> "DualEncoder":
        return cls(cfg["encoder.depth"], cfg["encoder.width"], cfg["encoder.embed_width"],
                   seed=cfg["encoder.seed"], text_pool=cfg["text.pool"])

    def _init_frozen(self, seed: int) -> None:
        g = make_generator("encoder", seed)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                fan_in = m.weight.shape[1]
                m.weight.data = torch.randn(m.weight.shape, generator=g, dtype=self.dtype) / math.sqrt(fan_in)
                if m.bias is not None:
                    m.bias.data.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.data.fill_(1.0)
                m.bias.data.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    def _check_tokens(self, tokens, kind: str) -> Tensor:
        tokens = as_values(tokens)
        if tokens.dim() == 2:
            tokens = tokens.unsqueeze(0)
        if tokens.dim() != 3:
            raise InvalidInputError(f"{kind} tokens must be (L, W) or (B, L, W)")
        if tokens.shape[-1] != self.width:
            raise ConfigurationError(
                f"{kind} token width {tokens.shape[-1]} does not match encoder width {self.width}")
        if tokens.shape[-2] < 1:
            raise InvalidInputError(f"{kind} sequence must contain at least one token")
        return tokens.to(self.dtype)

    def _run(self, tower: _Tower, tokens: Tensor, prompt_layers, causal: bool):
        if prompt_layers is not None and len(prompt_layers) > len(tower.blocks):
            raise ConfigurationError("prompt depth exceeds the number of encoder blocks")
        b = tokens.shape[0]
        seq, n_ctx = tokens, 0
        layer_feats = []
        for i, block in enumerate(tower.blocks):
            if prompt_layers is not None and i < len(prompt_layers):
                ctx = prompt_layers[i].unsqueeze(0).expand(b, -1, -1)
                seq = torch.cat([ctx, seq[:, n_ctx:]], dim=1)
                n_ctx = ctx.shape[1]
            seq = block(seq, causal)
            layer_feats.append(tower.proj(seq[:, n_ctx:].mean(dim=1)))
        pooled = layer_feats[-1] if layer_feats else tower.proj(tokens.mean(dim=1))
        prompt_out = tower.proj(seq[:, :n_ctx].mean(dim=1)) if n_ctx else None
        return seq, pooled, prompt_out, layer_feats, n_ctx

    def encode_image(self, tokens, prompts: PromptSet | None = None, return_layers: bool = False):
        """Returns (V, Q_V) and, on request, the per-block pooled patch features.

        V is the mean over patch slots of the final block, projected to C.
        Q_V pools the prompt slots the same way; it is None without prompts.
        """
        tokens = self._check_tokens(tokens, "image")
        layers = list(prompts.visual) if prompts is not None else None
        _, pooled, prompt_out, layer_feats, _ = self._run(self.vision, tokens, layers, causal=False)
        v = EncodedFeature(pooled, "vision")
        q = PromptOutput(prompt_out) if prompt_out is not None else None
        if return_layers:
            return v, q, layer_feats
        return v, q

    def encode_text(self, tokens, prompts: PromptSet | None = None, pool: str | None = None):
        """Encode one sequence per class under causal attention.

        The class feature is taken at the last original token ("eos") or the
        first one ("sos"); prompt slots sit before the sequence either way.
        """
        if isinstance(tokens, (list, tuple)):
            if not tokens:
                raise InvalidInputError("encode_text needs at least one class sequence")
            tokens = torch.stack([as_values(t) for t in tokens])
        tokens = self._check_tokens(tokens, "text")
        if tokens.shape[0] < 1:
            raise InvalidInputError("encode_text needs at least one class sequence")
        pool = self.text_pool if pool is None else pool
        if pool not in ("eos", "sos"):
            raise ConfigurationError(f"text pool must be eos or sos, got {pool!r}")
        layers = list(prompts.textual) if prompts is not None else None
        seq, _, prompt_out, _, n_ctx = self._run(self.text, tokens, layers, causal=True)
        idx = n_ctx + (tokens.shape[1] - 1 if pool == "eos" else 0)
        t = EncodedFeature(self.text.proj(seq[:, idx]), "text")
        q = PromptOutput(prompt_out) if prompt_out is not None else None
        return t, q


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine between rows of a (N, C) and b (M, C)."""
    a, b = as_values(a), as_values(b)
    if a.shape[-1] != b.shape[-1]:
        raise InvalidInputError(f"width mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if (na < _NORM_FLOOR).any() or (nb < _NORM_FLOOR).any():
        raise NumericalError("zero-norm row in cosine computation")
    return (a / na) @ (b / nb).T


def clip_scores(v, t, temperature: float) -> ScoreMatrix:
    """Class logits: cos(V_n, T_c) / temperature."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    return ScoreMatrix(cosine_matrix(v, t) / temperature, "clip")


def learned_prompt_scores(q_v, q_t) -> ScoreMatrix:
    """Cosine between pooled prompt outputs of the two towers."""
    return ScoreMatrix(cosine_matrix(q_v, q_t), "learned_prompt")


def backbone_fingerprint(model: DualEncoder) -> str:
    """sha256 over every frozen parameter, in registration order."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()
