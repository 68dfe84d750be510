"""Synthetic classification benchmark with matched class text.

Class c is a Gaussian prototype mu_c in token space. An image is L noisy
copies of its prototype. The class "text" repeats the clean prototype for a
few token positions, the plainest possible caption; together with the
weight-shared encoder this yields real zero-shot accuracy on classes never
trained on, which prompt tuning can then improve or damage. A separate
low-dimensional sketch of the prototype is rendered into numeric class
descriptions for the language agents to read, standing in for pre-collected
chatbot answers.

Samples are generated from per-sample seeds derived from their ids, never
from generation order, so any subset of the data is reproducible on its own.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import Tensor

from .agents import ClassDescriptionSet
from .errors import InvalidInputError
from .seeding import make_generator

DESC_JITTER = 0.02  # how much two descriptions of the same class disagree


@dataclass(frozen=True)
class ExtractionBatch:
    tokens: Tensor  # (B, L, W)
    labels: tuple  # global class ids
    sample_ids: tuple
    clean: Tensor  # (B, W) class prototypes; the view a careful teacher recovers


class SyntheticBenchmark:
    def __init__(self, n_classes=20, tokens_per_image=8, width=32, text_len=6,
                 sketch_dim=8, class_sep=1.0, noise=0.35, noise_rank=0, train_bias=0.0,
                 train_per_class=20, test_per_class=20, seed=0):
        if n_classes < 2:
            raise InvalidInputError("need at least two classes")
        if not 0 <= noise_rank <= width:
            raise InvalidInputError("noise_rank must lie in [0, width]")
        self.n_classes = n_classes
        self.tokens_per_image = tokens_per_image
        self.width = width
        self.text_len = text_len
        self.sketch_dim = sketch_dim
        self.class_sep = class_sep
        self.noise = noise
        self.noise_rank = noise_rank
        self.train_bias = train_bias
        self.train_per_class = train_per_class
        self.test_per_class = test_per_class
        self.seed = seed
        self.counts = {"train": train_per_class, "test": test_per_class}
        # the id must separate any two datasets that disagree on content, or a
        # knowledge cache from one could silently validate against the other
        knobs = (f"{tokens_per_image}|{text_len}|{sketch_dim}|{class_sep!r}|{noise!r}"
                 f"|{noise_rank}|{train_bias!r}|{train_per_class}|{test_per_class}")
        digest = hashlib.sha256(knobs.encode()).hexdigest()[:8]
        self.dataset_id = f"synth-c{n_classes}-w{width}-s{seed}-{digest}"
        g = make_generator("dataset", self.dataset_id)
        self.prototypes = torch.randn(n_classes, width, generator=g, dtype=torch.float64) * class_sep
        self.sketch_map = torch.randn(width, sketch_dim, generator=g, dtype=torch.float64) / math.sqrt(width)
        if noise_rank > 0:
            # fixed corruption subspace shared by every split; suppressing it
            # is class-independent knowledge a prompt can represent
            raw = torch.randn(width, noise_rank, generator=g, dtype=torch.float64)
            self.noise_basis = torch.linalg.qr(raw).Q.T
        else:
            self.noise_basis = None

    @classmethod
    def from_config(cls, cfg: dict) -> "SyntheticBenchmark":
        return cls(n_classes=cfg["dataset.n_classes"], tokens_per_image=cfg["dataset.tokens_per_image"],
                   width=cfg["encoder.width"], text_len=cfg["dataset.text_len"],
                   sketch_dim=cfg["dataset.sketch_dim"], class_sep=cfg["dataset.class_sep"],
                   noise=cfg["dataset.noise"], noise_rank=cfg["dataset.noise_rank"],
                   train_bias=cfg["dataset.train_bias"],
                   train_per_class=cfg["dataset.train_per_class"],
                   test_per_class=cfg["dataset.test_per_class"], seed=cfg["dataset.seed"])

    # -- classes ------------------------------------------------------------

    def class_ids(self):
        return tuple(range(self.n_classes))

    def class_text_tokens(self, class_ids) -> Tensor:
        """(N_cls, Lt, W) token sequences describing each class."""
        mu = self.prototypes[list(class_ids)]
        return mu.unsqueeze(1).expand(-1, self.text_len, -1).clone()

    def class_reps(self, class_ids) -> Tensor:
        """(N_cls, W) pooled class text, what multi-modal agents condition on."""
        return self.class_text_tokens(class_ids).mean(dim=1)

    def sketches(self, class_ids) -> Tensor:
        return self.prototypes[list(class_ids)] @ self.sketch_map

    def descriptions(self, agent_id: str, per_class=2) -> ClassDescriptionSet:
        """Numeric class descriptions as this agent's chat transcript would read."""
        table = {}
        for c in range(self.n_classes):
            sketch = self.sketches([c])[0]
            texts = []
            for j in range(per_class):
                g = make_generator("desc", self.dataset_id, agent_id, c, j)
                noisy = sketch + DESC_JITTER * torch.randn(sketch.shape, generator=g, dtype=torch.float64)
                body = " ".join(f"{v:.4f}" for v in noisy.tolist())
                texts.append(f"class {c} looks like {body}")
            table[c] = tuple(texts)
        return ClassDescriptionSet(agent_id, table)

    # -- samples ------------------------------------------------------------

    def sample_ids(self, split: str, class_id: int):
        self._check_split(split)
        return [f"{split}:c{class_id:03d}:i{i:03d}" for i in range(self.counts[split])]

    def all_ids(self, split: str, class_ids):
        return [sid for c in class_ids for sid in self.sample_ids(split, c)]

    def label_of(self, sample_id: str) -> int:
        parts = sample_id.split(":")
        if len(parts) != 3 or not parts[1].startswith("c"):
            raise InvalidInputError(f"malformed sample id: {sample_id!r}")
        return int(parts[1][1:])

    def class_bias(self, class_id: int) -> Tensor:
        """Per-class offset applied to train images only; a domain gap the
        clean teacher view sees through."""
        g = make_generator("bias", self.dataset_id, class_id)
        return torch.randn(self.width, generator=g, dtype=torch.float64)

    def tokens_for(self, sample_id: str) -> Tensor:
        c = self.label_of(sample_id)
        g = make_generator("sample", self.dataset_id, sample_id)
        if self.noise_basis is not None:
            # one offset per image, not per token: pooling cannot average it out
            coeff = torch.randn(1, self.noise_rank, generator=g, dtype=torch.float64)
            jitter = (coeff @ self.noise_basis).expand(self.tokens_per_image, -1)
        else:
            jitter = torch.randn(self.tokens_per_image, self.width, generator=g, dtype=torch.float64)
        tokens = self.prototypes[c] + self.noise * jitter
        if self.train_bias and sample_id.startswith("train:"):
            tokens = tokens + self.train_bias * self.class_bias(c)
        return tokens

    def batch(self, sample_ids) -> ExtractionBatch:
        sample_ids = tuple(sample_ids)
        if not sample_ids:
            raise InvalidInputError("empty batch")
        labels = tuple(self.label_of(s) for s in sample_ids)
        tokens = torch.stack([self.tokens_for(s) for s in sample_ids])
        return ExtractionBatch(tokens, labels, sample_ids, self.prototypes[list(labels)])

    def _check_split(self, split: str) -> None:
        if split not in self.counts:
            raise InvalidInputError(f"unknown split {split!r}")
