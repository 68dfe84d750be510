"""Training objectives: classification plus the three distillation channels.

Reductions are means over samples, classes and layers so the loss weights
stay comparable across batch sizes and model depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, InvalidInputError
from .model import as_values


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 25.0
    lambda3: float = 1.0
    temperature_distill: float = 1.0

    @classmethod
    def from_config(cls, cfg: dict) -> "LossWeights":
        return cls(cfg["loss.lambda1"], cfg["loss.lambda2"], cfg["loss.lambda3"], cfg["loss.temperature"])


def ce_loss(scores, labels) -> Tensor:
    values = as_values(scores)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.dim() != 1 or labels.shape[0] != values.shape[0]:
        raise InvalidInputError("one label per score row required")
    if labels.numel() and (labels.min() < 0 or labels.max() >= values.shape[1]):
        raise InvalidInputError(f"label out of range [0, {values.shape[1]})")
    return F.cross_entropy(values, labels)


def _mean_abs(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise InvalidInputError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def vac_loss(student_features, gated_teacher, mode: str = "layer_wise") -> Tensor:
    """Mean L1 between per-layer visual features, averaged over mapped layers."""
    if mode not in ("layer_wise", "last_layer"):
        raise ConfigurationError(f"vac mode must be layer_wise or last_layer, got {mode!r}")
    student = [as_values(x) for x in student_features]
    teacher = [as_values(x) for x in gated_teacher]
    if len(student) != len(teacher):
        raise InvalidInputError(f"layer count mismatch: {len(student)} vs {len(teacher)}")
    if not student:
        raise InvalidInputError("vac_loss needs at least one layer")
    if mode == "last_layer":
        return _mean_abs(student[-1], teacher[-1])
    return torch.stack([_mean_abs(s, t) for s, t in zip(student, teacher)]).mean()


def lac_loss(t, gated_t_a) -> Tensor:
    """Mean L1 between class text features and the fused teacher rows."""
    return _mean_abs(as_values(t), as_values(gated_t_a))


def mac_loss(s_p, s_a, loss_type: str = "kl", temperature: float = 1.0) -> Tensor:
    """Match the student score rows to the fused agent scores.

    kl: KL(softmax(s_p / tau) || softmax(s_a / tau)), mean over rows.
    l1 / mse operate on the raw score matrices.
    """
    p, a = as_values(s_p), as_values(s_a)
    if p.shape != a.shape:
        raise InvalidInputError(f"score shapes differ: {tuple(p.shape)} vs {tuple(a.shape)}")
    if loss_type == "l1":
        return (p - a).abs().mean()
    if loss_type == "mse":
        return ((p - a) ** 2).mean()
    if loss_type != "kl":
        raise ConfigurationError(f"loss type must be kl, l1 or mse, got {loss_type!r}")
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {temperature}")
    log_p = F.log_softmax(p / temperature, dim=-1)
    log_q = F.log_softmax(a / temperature, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1).mean()


def total_loss(ce, vac, lac, mac, w: LossWeights) -> Tensor:
    if min(w.lambda1, w.lambda2, w.lambda3) < 0:
        raise ConfigurationError("loss weights must be non-negative")
    return ce + w.lambda1 * vac + w.lambda2 * lac + w.lambda3 * mac
