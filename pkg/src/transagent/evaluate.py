"""Base-to-novel evaluation, the multi-seed protocol, and ablation sweeps."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import torch

from .errors import InvalidInputError, StateError, ValidationError
from .model import DualEncoder, as_values, clip_scores
from .seeding import make_generator


@dataclass(frozen=True)
class SplitSpec:
    """A frozen class partition. Base classes are seen in training, novel
    classes only at test time."""
    base: tuple
    novel: tuple
    dataset_id: str = ""
    shots: int | None = None


@dataclass(frozen=True)
class EvalReport:
    base: float
    novel: float
    harmonic: float
    per_seed: tuple = ()
    seed_count: int = 1

    def summary(self) -> str:
        return f"base {self.base:.2f}  novel {self.novel:.2f}  hm {self.harmonic:.2f}"


def harmonic_mean(base: float, novel: float) -> float:
    """2ab/(a+b); sits at or below the arithmetic mean, never above min*2."""
    base, novel = float(base), float(novel)
    if base <= 0 or novel <= 0:
        raise InvalidInputError("harmonic mean needs two positive accuracies")
    return 2.0 * base * novel / (base + novel)


def _safe_hm(base: float, novel: float) -> float:
    return harmonic_mean(base, novel) if base > 0 and novel > 0 else 0.0


def base_novel_split(class_ids, seed: int) -> SplitSpec:
    """Shuffle once with the split seed, take the first ceil(n/2) as base."""
    ids = list(class_ids)
    if len(ids) < 2:
        raise InvalidInputError("need at least 2 classes to split")
    perm = torch.randperm(len(ids), generator=make_generator("split", seed)).tolist()
    half = math.ceil(len(ids) / 2)
    base = tuple(sorted(ids[i] for i in perm[:half]))
    novel = tuple(sorted(ids[i] for i in perm[half:]))
    return SplitSpec(base=base, novel=novel)


def few_shot_sample(dataset, shots: int, seed: int, class_ids=None, split: str = "train") -> dict:
    """Pick `shots` training samples per class, independently seeded per class
    so adding a class never reshuffles the others."""
    if shots < 1:
        raise InvalidInputError("shots must be at least 1")
    class_ids = dataset.class_ids() if class_ids is None else tuple(class_ids)
    picks = {}
    for c in class_ids:
        pool = dataset.sample_ids(split, c)
        if len(pool) < shots:
            raise InvalidInputError(f"class {c} has {len(pool)} samples in split {split!r}, need {shots}")
        idx = torch.randperm(len(pool), generator=make_generator("shots", seed, c))[:shots]
        picks[c] = tuple(pool[i] for i in sorted(idx.tolist()))
    return picks


def top1_accuracy(scores, labels) -> float:
    """Percent of rows whose arg-max column equals the label."""
    values = as_values(scores)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if values.ndim != 2 or labels.ndim != 1 or values.shape[0] != labels.shape[0]:
        raise InvalidInputError("scores must be (N, C) with one label per row")
    if values.shape[0] == 0:
        raise InvalidInputError("no rows to score")
    hits = (values.argmax(dim=1) == labels).sum()
    return 100.0 * float(hits) / values.shape[0]


def _accuracy_on(model, prompts, dataset, class_ids, sample_ids, temperature: float) -> float:
    class_ids = list(class_ids)
    batch = dataset.batch(sample_ids)
    index = {c: i for i, c in enumerate(class_ids)}
    try:
        labels = [index[c] for c in batch.labels]
    except KeyError as exc:
        raise ValidationError(f"sample from class {exc.args[0]} is not covered by the class list") from exc
    with torch.no_grad():
        v, _ = model.encode_image(batch.tokens, prompts)
        t, _ = model.encode_text(dataset.class_text_tokens(class_ids), prompts)
        s = clip_scores(v, t, temperature)
    return top1_accuracy(s, labels)


def evaluate(student, dataset, split: SplitSpec, cfg: dict) -> EvalReport:
    """Score an exported student on the base and novel test partitions.

    Teachers never run here: the model is rebuilt from config and the prompts
    come from the student snapshot alone."""
    model = DualEncoder.from_config(cfg)
    prompts = student.prompt_set()
    if prompts.visual[0].shape[-1] != model.width:
        raise ValidationError("student prompt width does not match the encoder")
    known = set(dataset.class_ids())
    for c in tuple(split.base) + tuple(split.novel):
        if c not in known:
            raise ValidationError(f"split references unknown class {c}")
    temp = cfg["encoder.score_temperature"]
    base = _accuracy_on(model, prompts, dataset, split.base, dataset.all_ids("test", split.base), temp)
    novel = _accuracy_on(model, prompts, dataset, split.novel, dataset.all_ids("test", split.novel), temp)
    hm = _safe_hm(base, novel)
    return EvalReport(base=base, novel=novel, harmonic=hm, per_seed=((base, novel, hm),), seed_count=1)


def aggregate(reports) -> EvalReport:
    """Average base and novel over seeds, then take the harmonic mean of the
    averages (matching how multi-seed tables are usually reported)."""
    reports = list(reports)
    if not reports:
        raise InvalidInputError("nothing to aggregate")
    base = sum(r.base for r in reports) / len(reports)
    novel = sum(r.novel for r in reports) / len(reports)
    per_seed = tuple(row for r in reports for row in r.per_seed)
    return EvalReport(base=base, novel=novel, harmonic=_safe_hm(base, novel),
                      per_seed=per_seed, seed_count=len(reports))


def run_protocol(cfg: dict, dataset, knowledge=None):
    """Full benchmark pass: split once, then per seed re-sample the shots,
    retrain and evaluate. Returns the aggregate report and the per-seed states."""
    from .train import train

    split = base_novel_split(dataset.class_ids(), cfg["split.seed"])
    n_seeds = cfg["eval.n_seeds"]
    if n_seeds < 1:
        raise InvalidInputError("eval.n_seeds must be at least 1")
    reports, states = [], []
    for i in range(n_seeds):
        run_cfg = dict(cfg)
        run_cfg["train.seed"] = cfg["train.seed"] + i
        run_cfg["prompt.seed"] = cfg["prompt.seed"] + i
        shots = few_shot_sample(dataset, run_cfg["train.shots"], run_cfg["train.seed"], split.base)
        sample_ids = [sid for c in split.base for sid in shots[c]]
        state = train(run_cfg, dataset, split.base, sample_ids, knowledge)
        reports.append(evaluate(state.student(), dataset, split, run_cfg))
        states.append(state)
    return aggregate(reports), states


def gating_report(state, sample_ids) -> dict:
    """Average gate weight per agent, grouped by knowledge channel."""
    if state.collab is None or state.source is None:
        raise StateError("gating report needs the pre-export trainer state with agents attached")
    from .train import compute_batch_loss

    batch = state.dataset.batch(sample_ids)
    index = {c: i for i, c in enumerate(state.class_ids)}
    try:
        labels = torch.tensor([index[c] for c in batch.labels], dtype=torch.long)
    except KeyError as exc:
        raise ValidationError(f"sample from class {exc.args[0]} was not in the training classes") from exc
    class_tokens = state.dataset.class_text_tokens(state.class_ids)
    with torch.no_grad():
        _, gates = compute_batch_loss(state.model, state.prompts, state.collab, batch, labels,
                                      class_tokens, state.source, state.cfg, record_gates=True)
    if not gates:
        raise StateError("no gate weights recorded; fusion mode is not gating or no channel is active")
    groups = {"vision": state.collab.vision_ids, "language": state.collab.language_ids,
              "scores": state.collab.score_ids}
    report = {}
    for group, ids in groups.items():
        if group in gates:
            mean = gates[group].mean(dim=0)
            report[group] = {aid: float(mean[i]) for i, aid in enumerate(ids)}
    return report


def render_gating_report(report: dict) -> str:
    lines = []
    for group in sorted(report):
        lines.append(group)
        for aid, w in sorted(report[group].items()):
            lines.append(f"  {aid:<12s} {w:.4f}")
    return "\n".join(lines) + "\n"


# -- ablations ----------------------------------------------------------------

# axis name -> (config key, ((config value, row label), ...))
AXES = {
    "vac_mode": ("loss.vac_mode", (("last_layer", "last-layer"), ("layer_wise", "layer-wise"))),
    "lac_token": ("text.pool", (("sos", "sos"), ("eos", "eos"))),
    "mac_source": ("loss.mac_source", (("prompted_logits", "prompted_logits"),
                                       ("learned_scores", "learned_scores"))),
    "fusion": ("fusion.mode", (("average", "average"), ("add", "add"), ("gating", "gating"))),
    "mac_loss_type": ("loss.mac_type", (("kl", "kl"), ("l1", "l1"), ("mse", "mse"))),
    "pooling": ("agents.t2i_pool", (("average", "average"), ("max", "max"), ("lse", "logsumexp"))),
}


@dataclass(frozen=True)
class AblationTable:
    axis: str
    rows: tuple  # (label, EvalReport) pairs

    def labels(self) -> tuple:
        return tuple(label for label, _ in self.rows)

    def render(self) -> str:
        lines = [f"axis: {self.axis}", f"{'setting':<16s} {'base':>7s} {'novel':>7s} {'hm':>7s}"]
        for label, report in self.rows:
            lines.append(f"{label:<16s} {report.base:>7.2f} {report.novel:>7.2f} {report.harmonic:>7.2f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        payload = {"axis": self.axis, "rows": [
            {"setting": label, "base": r.base, "novel": r.novel, "hm": r.harmonic}
            for label, r in self.rows]}
        return json.dumps(payload, indent=2, sort_keys=True)


def run_ablation(axis: str, cfg: dict, dataset, knowledge=None) -> AblationTable:
    """Sweep one design axis, re-running the whole protocol per setting."""
    if axis not in AXES:
        raise InvalidInputError(f"unknown ablation axis {axis!r}; choose from {sorted(AXES)}")
    key, settings = AXES[axis]
    rows = []
    for value, label in settings:
        run_cfg = dict(cfg)
        run_cfg[key] = value
        report, _ = run_protocol(run_cfg, dataset, knowledge)
        rows.append((label, report))
    return AblationTable(axis=axis, rows=tuple(rows))
