"""Distillation training loop, offline extraction, and agent unloading.

The student's trainable surface is the PromptSet plus a Collaboration module
(per-agent width adapters and the gate networks). Teacher knowledge arrives
through a knowledge source, either computed live from a registry of agents or
replayed from a cache file; both feed the loop float32-quantized values, so
the two paths produce identical optimization trajectories.

Export strips everything but the prompts. A TrainedStudent holds no agent,
gate or adapter parameters and is loadable with the encoder alone.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .agents import (AgentDescriptor, extract_i2t_scores, extract_language_features,
                     extract_t2i_maps, extract_vision_features, language_encoder,
                     registry_fingerprint, t2i_scores)
from .cache import CacheReader, KnowledgeCacheRecord, record_identity, write_cache
from .config import config_hash
from .errors import (CacheValidationError, ConfigurationError, InvalidInputError, StateError)
from .gating import GateNetwork, fuse_add_losses, fuse_average, moa_gate
from .losses import LossWeights, ce_loss, lac_loss, mac_loss, total_loss, vac_loss
from .model import DualEncoder, PromptSet, clip_scores, init_prompts, learned_prompt_scores
from .seeding import make_generator

LOG_KEYS = ("ce", "vac", "lac", "mac", "total")


# -- knowledge sources -------------------------------------------------------

class LiveKnowledgeSource:
    """Runs the agents on demand. Language features are static per class, so
    they are extracted once up front; everything else is per batch."""

    def __init__(self, registry: dict, dataset, class_ids):
        self.agents = dict(registry)
        self.dataset = dataset
        self.class_ids = tuple(class_ids)
        self.class_reps = dataset.class_reps(self.class_ids)
        self._language = {}
        for aid in sorted(self.agents):
            a = self.agents[aid]
            if a.modality == "language":
                bundle = extract_language_features(
                    dataset.descriptions(aid), language_encoder(a), self.class_ids)
                self._language[aid] = bundle.class_features

    def vision_features(self, batch) -> dict:
        return {aid: extract_vision_features(a, batch).per_layer_features
                for aid, a in self.agents.items() if a.modality == "vision"}

    def language_features(self) -> dict:
        return dict(self._language)

    def t2i_maps(self, batch) -> dict:
        out = {}
        for aid, a in self.agents.items():
            if a.modality == "t2i":
                maps = extract_t2i_maps(a, batch, self.class_reps, self.class_ids)
                out[aid] = torch.stack([m.values for m in maps])
        return out

    def i2t_score_rows(self, batch) -> dict:
        return {aid: extract_i2t_scores(a, batch, self.class_reps).values
                for aid, a in self.agents.items() if a.modality == "i2t"}


class CachedKnowledgeSource:
    """Replays a knowledge cache. Coverage is verified before the first step:
    a stale or mismatched cache should fail loudly, not mid-epoch."""

    def __init__(self, reader: CacheReader, dataset_id: str, class_ids, sample_ids):
        self.reader = reader
        meta = reader.meta
        if meta.get("kind") != "knowledge":
            raise CacheValidationError(f"{reader.path}: not a knowledge cache")
        if meta.get("dataset") != dataset_id:
            raise CacheValidationError(
                f"{reader.path}: cache was built for {meta.get('dataset')!r}, training on {dataset_id!r}")
        if list(meta.get("classes", [])) != list(class_ids):
            raise CacheValidationError(f"{reader.path}: cached class list does not match the training split")
        self.dataset_id = dataset_id
        self.class_ids = tuple(class_ids)
        self.agents = {}
        for aid, info in sorted(meta.get("agents", {}).items()):
            self.agents[aid] = AgentDescriptor(
                agent_id=aid, modality=info["modality"], feature_width=info["feature_width"],
                layer_count=info["layer_count"], seed=info["seed"], map_tokens=info["map_tokens"])
        missing = []
        for aid, a in self.agents.items():
            if a.modality == "language":
                wanted = [record_identity(aid, dataset_id, "class", str(c)) for c in class_ids]
            else:
                wanted = [record_identity(aid, dataset_id, "train", sid) for sid in sample_ids]
            missing.extend(w for w in wanted if w not in reader)
        if missing:
            raise CacheValidationError(
                f"{reader.path}: {len(missing)} records missing, first is {missing[0]!r}")

    def _rows(self, aid: str, batch) -> list:
        return [self.reader.read(aid, self.dataset_id, "train", sid).values for sid in batch.sample_ids]

    def vision_features(self, batch) -> dict:
        out = {}
        for aid, a in self.agents.items():
            if a.modality == "vision":
                stacks = torch.stack(self._rows(aid, batch))  # (B, layers, C_a)
                out[aid] = tuple(stacks[:, i] for i in range(a.layer_count))
        return out

    def language_features(self) -> dict:
        out = {}
        for aid, a in self.agents.items():
            if a.modality == "language":
                rows = [self.reader.read(aid, self.dataset_id, "class", str(c)).values for c in self.class_ids]
                out[aid] = torch.stack(rows)
        return out

    def t2i_maps(self, batch) -> dict:
        return {aid: torch.stack(self._rows(aid, batch))
                for aid, a in self.agents.items() if a.modality == "t2i"}

    def i2t_score_rows(self, batch) -> dict:
        return {aid: torch.stack(self._rows(aid, batch))
                for aid, a in self.agents.items() if a.modality == "i2t"}


def extract_knowledge(registry: dict, dataset, class_ids, sample_ids, descriptions=None):
    """The offline pass: run every agent over the training pool once.

    Returns (records, meta) ready for write_cache. Record order is sorted by
    agent id then key, so repeated extraction is byte-identical."""
    class_ids = list(class_ids)
    reps = dataset.class_reps(class_ids)
    batch = dataset.batch(sample_ids)
    records = []
    for aid in sorted(registry):
        a = registry[aid]
        if a.modality == "vision":
            bundle = extract_vision_features(a, batch)
            for i, sid in enumerate(batch.sample_ids):
                stack = torch.stack([layer[i] for layer in bundle.per_layer_features])
                records.append(KnowledgeCacheRecord(aid, dataset.dataset_id, "train", sid, "feature_stack", stack))
        elif a.modality == "language":
            descs = (descriptions or {}).get(aid) or dataset.descriptions(aid)
            bundle = extract_language_features(descs, language_encoder(a), class_ids)
            for i, c in enumerate(class_ids):
                records.append(KnowledgeCacheRecord(
                    aid, dataset.dataset_id, "class", str(c), "class_features", bundle.class_features[i]))
        elif a.modality == "t2i":
            for m in extract_t2i_maps(a, batch, reps, class_ids):
                records.append(KnowledgeCacheRecord(
                    aid, dataset.dataset_id, "train", m.sample_id, "attention_map", m.values))
        else:
            scores = extract_i2t_scores(a, batch, reps).values
            for i, sid in enumerate(batch.sample_ids):
                records.append(KnowledgeCacheRecord(aid, dataset.dataset_id, "train", sid, "score_vector", scores[i]))
    records.sort(key=lambda r: r.identity)
    meta = {"kind": "knowledge", "dataset": dataset.dataset_id, "classes": class_ids,
            "agents": registry_fingerprint(registry)}
    return records, meta


# -- trainable glue ----------------------------------------------------------

def _adapter(in_width: int, out_width: int, seed_parts, dtype=torch.float64) -> nn.Linear:
    lin = nn.Linear(in_width, out_width, bias=False, dtype=dtype)
    g = make_generator(*seed_parts)
    lin.weight.data = torch.randn(lin.weight.shape, generator=g, dtype=dtype) / math.sqrt(in_width)
    return lin


class Collaboration(nn.Module):
    """Everything trainable that touches teachers: one width adapter per agent
    plus the gate networks. Built per run, discarded at export."""

    def __init__(self, agents: dict, cfg: dict, n_classes: int):
        super().__init__()
        self.agents = dict(agents)
        by = lambda m: sorted(aid for aid, a in agents.items() if a.modality == m)
        self.vision_ids = by("vision")
        self.language_ids = by("language")
        self.score_ids = by("t2i") + by("i2t")
        c = cfg["encoder.embed_width"]
        depth = cfg["prompt.depth"]
        seed = cfg["train.seed"]
        if self.vision_ids:
            self.vision_proj = nn.ModuleDict({
                aid: _adapter(agents[aid].feature_width, c, ("adapter", seed, aid))
                for aid in self.vision_ids})
            self.vac_gates = nn.ModuleList(
                GateNetwork(len(self.vision_ids), len(self.vision_ids) * c, c, ("vac-gate", seed, j))
                for j in range(depth))
        if self.language_ids:
            self.language_proj = nn.ModuleDict({
                aid: _adapter(agents[aid].feature_width, c, ("adapter", seed, aid))
                for aid in self.language_ids})
            self.lac_gate = GateNetwork(len(self.language_ids), len(self.language_ids) * c, c, ("lac-gate", seed))
        if self.score_ids:
            self.mac_gate = GateNetwork(len(self.score_ids), len(self.score_ids) * n_classes, c, ("mac-gate", seed))


def _agent_layer(k_a: int, slot: int, depth: int) -> int:
    # uniform stride from the agent's k_a layers onto the student's prompted depth
    return max((slot + 1) * k_a // depth - 1, 0)


def _ridge_fit(linear: nn.Linear, x: Tensor, y: Tensor) -> None:
    # damping keeps constant or collinear teacher features solvable
    xtx = x.T @ x
    eps = 1e-6 * float(xtx.diagonal().mean()) + 1e-12
    w = torch.linalg.solve(xtx + eps * torch.eye(x.shape[1], dtype=x.dtype), x.T @ y)
    linear.weight.data = w.T.contiguous()


def align_projections(collab, model, prompts, dataset, class_ids, sample_ids, source, cfg) -> None:
    """Warm-start every width adapter by ridge regression onto the student's
    initial features.

    Fresh random adapters would make the first epochs of distillation a pull
    toward arbitrary directions. Fitting them up front turns each teacher into
    an anchor at the student's starting geometry, and training only has to
    track how the teachers disagree with where CE wants to go."""
    weights = LossWeights.from_config(cfg)
    class_ids = list(class_ids)
    with torch.no_grad():
        batch = dataset.batch(list(sample_ids))
        if collab.vision_ids and weights.lambda1 > 0:
            v, _, layer_feats = model.encode_image(batch.tokens, prompts, return_layers=True)
            feats = source.vision_features(batch)
            mode = cfg["loss.vac_mode"]
            depth = prompts.depth
            slots = list(range(depth)) if mode == "layer_wise" else [depth - 1]
            for aid in collab.vision_ids:
                k_a = collab.agents[aid].layer_count
                xs, ys = [], []
                for slot in slots:
                    idx = _agent_layer(k_a, slot, depth) if mode == "layer_wise" else k_a - 1
                    xs.append(feats[aid][idx])
                    student = layer_feats[slot] if mode == "layer_wise" else v.values
                    ys.append(F.normalize(student, dim=-1))
                _ridge_fit(collab.vision_proj[aid], torch.cat(xs), torch.cat(ys))
        if collab.language_ids and weights.lambda2 > 0:
            t, _ = model.encode_text(dataset.class_text_tokens(class_ids), prompts)
            t_norm = F.normalize(t.values, dim=-1)
            lang = source.language_features()
            for aid in collab.language_ids:
                _ridge_fit(collab.language_proj[aid], lang[aid], t_norm)


def compute_batch_loss(model, prompts, collab, batch, labels, class_tokens, source, cfg,
                       record_gates: bool = False):
    """One forward pass; returns the loss components and any gate weights."""
    weights = LossWeights.from_config(cfg)
    v, q_v, layer_feats = model.encode_image(batch.tokens, prompts, return_layers=True)
    t, q_t = model.encode_text(class_tokens, prompts)
    s = clip_scores(v, t, cfg["encoder.score_temperature"])
    ce = ce_loss(s, labels)
    zero = torch.zeros((), dtype=torch.float64)
    vac = lac = mac = zero
    gates: dict = {}
    fusion = cfg["fusion.mode"]
    depth = prompts.depth

    if collab is not None and collab.vision_ids and weights.lambda1 > 0:
        feats = source.vision_features(batch)
        mode = cfg["loss.vac_mode"]
        if mode == "layer_wise":
            student = [F.normalize(layer_feats[j], dim=-1) for j in range(depth)]
            slots = list(range(depth))
        else:
            student = [F.normalize(v.values, dim=-1)]
            slots = [depth - 1]
        fused_layers, gate_rows = [], []
        per_agent = {aid: [] for aid in collab.vision_ids}
        for slot in slots:
            contribs = []
            for aid in collab.vision_ids:
                k_a = collab.agents[aid].layer_count
                idx = _agent_layer(k_a, slot, depth) if mode == "layer_wise" else k_a - 1
                contribs.append(F.normalize(collab.vision_proj[aid](feats[aid][idx]), dim=-1))
            if fusion == "gating":
                out = moa_gate(contribs, collab.vac_gates[slot])
                fused_layers.append(out.fused)
                gate_rows.append(out.weights)
            elif fusion == "average":
                fused_layers.append(fuse_average(contribs))
            else:
                for aid, contrib in zip(collab.vision_ids, contribs):
                    per_agent[aid].append(contrib)
        if fusion == "add":
            vac = fuse_add_losses(vac_loss(student, per_agent[aid], mode) for aid in collab.vision_ids)
        else:
            vac = vac_loss(student, fused_layers, mode)
        if record_gates and gate_rows:
            gates["vision"] = torch.cat(gate_rows)

    if collab is not None and collab.language_ids and weights.lambda2 > 0:
        lang = source.language_features()
        t_norm = F.normalize(t.values, dim=-1)
        contribs = [F.normalize(collab.language_proj[aid](lang[aid]), dim=-1)
                    for aid in collab.language_ids]
        if fusion == "gating":
            out = moa_gate(contribs, collab.lac_gate)
            lac = lac_loss(t_norm, out.fused)
            if record_gates:
                gates["language"] = out.weights
        elif fusion == "average":
            lac = lac_loss(t_norm, fuse_average(contribs))
        else:
            lac = fuse_add_losses(lac_loss(t_norm, contrib) for contrib in contribs)

    if collab is not None and collab.score_ids and weights.lambda3 > 0:
        if cfg["loss.mac_source"] == "learned_scores":
            s_p = learned_prompt_scores(q_v, q_t).values
        else:
            s_p = s.values
        t2i = source.t2i_maps(batch)
        i2t = source.i2t_score_rows(batch)
        mats = []
        for aid in collab.score_ids:
            if aid in t2i:
                mats.append(t2i_scores(t2i[aid], cfg["agents.t2i_pool"]).values)
            else:
                mats.append(i2t[aid])
        kind, tau = cfg["loss.mac_type"], weights.temperature_distill
        if fusion == "gating":
            out = moa_gate(mats, collab.mac_gate)
            mac = mac_loss(s_p, out.fused, kind, tau)
            if record_gates:
                gates["scores"] = out.weights
        elif fusion == "average":
            mac = mac_loss(s_p, fuse_average(mats), kind, tau)
        else:
            mac = fuse_add_losses(mac_loss(s_p, m, kind, tau) for m in mats)

    total = total_loss(ce, vac, lac, mac, weights)
    return {"ce": ce, "vac": vac, "lac": lac, "mac": mac, "total": total}, gates


# -- the loop ----------------------------------------------------------------

@dataclass(frozen=True)
class TrainedStudent:
    """Prompts and bookkeeping. Deliberately free of teacher state."""
    visual_prompts: tuple
    textual_prompts: tuple
    config_hash: str
    seed: int
    epoch_losses: tuple = ()

    def prompt_set(self) -> PromptSet:
        ps = PromptSet(list(self.visual_prompts), list(self.textual_prompts))
        ps.requires_grad_(False)
        return ps


@dataclass
class TrainerState:
    model: DualEncoder
    prompts: PromptSet
    collab: Collaboration | None
    source: object
    dataset: object
    class_ids: tuple
    sample_ids: tuple
    cfg: dict
    cfg_hash: str
    epoch_losses: list = field(default_factory=list)
    complete: bool = False

    def student(self) -> TrainedStudent:
        return TrainedStudent(
            tuple(p.detach().clone() for p in self.prompts.visual),
            tuple(p.detach().clone() for p in self.prompts.textual),
            self.cfg_hash, self.cfg["train.seed"], tuple(dict(e) for e in self.epoch_losses))


def _make_source(knowledge, dataset, class_ids, sample_ids):
    if isinstance(knowledge, dict):
        return LiveKnowledgeSource(knowledge, dataset, class_ids)
    if isinstance(knowledge, (str, Path)):
        knowledge = CacheReader(knowledge)
    if isinstance(knowledge, CacheReader):
        return CachedKnowledgeSource(knowledge, dataset.dataset_id, class_ids, sample_ids)
    raise ConfigurationError("knowledge must be a registry dict, a cache path/reader, or None")


def train(cfg: dict, dataset, class_ids, sample_ids, knowledge=None) -> TrainerState:
    """Run the full loop and return the completed trainer state."""
    class_ids = tuple(class_ids)
    sample_ids = tuple(sample_ids)
    if not sample_ids:
        raise InvalidInputError("no training samples")
    weights = LossWeights.from_config(cfg)
    distilling = max(weights.lambda1, weights.lambda2, weights.lambda3) > 0
    model = DualEncoder.from_config(cfg)
    prompts = init_prompts(cfg)
    source = _make_source(knowledge, dataset, class_ids, sample_ids) if (knowledge is not None and distilling) else None
    collab = Collaboration(source.agents, cfg, len(class_ids)) if source is not None else None
    if collab is not None:
        align_projections(collab, model, prompts, dataset, class_ids, sample_ids, source, cfg)
    class_tokens = dataset.class_text_tokens(class_ids)
    class_index = {c: i for i, c in enumerate(class_ids)}
    for sid in sample_ids:
        if dataset.label_of(sid) not in class_index:
            raise InvalidInputError(f"sample {sid} is not from a training class")
    params = list(prompts.parameters()) + (list(collab.parameters()) if collab is not None else [])
    opt = torch.optim.SGD(params, lr=cfg["train.lr"], momentum=cfg["train.momentum"],
                          weight_decay=cfg["train.weight_decay"])
    state = TrainerState(model=model, prompts=prompts, collab=collab, source=source,
                         dataset=dataset, class_ids=class_ids, sample_ids=sample_ids,
                         cfg=dict(cfg), cfg_hash=config_hash(cfg))
    bs = cfg["train.batch_size"]
    for epoch in range(cfg["train.epochs"]):
        g = torch.Generator()
        g.manual_seed(cfg["train.seed"] + epoch)
        order = torch.randperm(len(sample_ids), generator=g).tolist()
        sums = dict.fromkeys(LOG_KEYS, 0.0)
        n_batches = 0
        for start in range(0, len(order), bs):
            ids = [sample_ids[i] for i in order[start:start + bs]]
            batch = dataset.batch(ids)
            labels = torch.tensor([class_index[c] for c in batch.labels], dtype=torch.long)
            comps, _ = compute_batch_loss(model, prompts, collab, batch, labels, class_tokens, source, cfg)
            opt.zero_grad()
            comps["total"].backward()
            opt.step()
            for k in LOG_KEYS:
                sums[k] += float(comps[k].detach())
            n_batches += 1
        state.epoch_losses.append({k: sums[k] / n_batches for k in LOG_KEYS})
    state.complete = True
    return state


# -- persistence -------------------------------------------------------------

def _prompt_records(prompts: PromptSet, split: str):
    recs = []
    for name, plist in (("visual_prompts", prompts.visual), ("textual_prompts", prompts.textual)):
        for i, p in enumerate(plist):
            recs.append(KnowledgeCacheRecord("", "", split, f"{name}/{i:02d}", "snapshot",
                                             p.detach().clone(), dtype="f8"))
    return recs


def export_student(state: TrainerState, path) -> Path:
    """Unload the teachers: only prompts and run metadata reach the file."""
    if not state.complete:
        raise StateError("cannot export in the middle of training")
    meta = {"kind": "student", "config_hash": state.cfg_hash, "seed": state.cfg["train.seed"],
            "n_ctx": state.prompts.n_ctx, "depth": state.prompts.depth,
            "width": state.model.width, "epochs": len(state.epoch_losses)}
    return write_cache(_prompt_records(state.prompts, "student"), path, meta)


def load_student(path) -> TrainedStudent:
    reader = CacheReader(path)
    if reader.meta.get("kind") != "student":
        raise StateError(f"{path} is not an exported student")
    depth = reader.meta["depth"]
    visual = tuple(reader.read("", "", "student", f"visual_prompts/{i:02d}").values for i in range(depth))
    textual = tuple(reader.read("", "", "student", f"textual_prompts/{i:02d}").values for i in range(depth))
    return TrainedStudent(visual, textual, reader.meta["config_hash"], reader.meta["seed"])


def save_state(state: TrainerState, path) -> Path:
    """Pre-export snapshot: prompts plus the collaboration parameters."""
    if not state.complete:
        raise StateError("cannot snapshot in the middle of training")
    records = _prompt_records(state.prompts, "state")
    roster = {}
    if state.collab is not None:
        for name, p in state.collab.named_parameters():
            records.append(KnowledgeCacheRecord("", "", "state", f"collab/{name}", "snapshot",
                                                p.detach().clone(), dtype="f8"))
        roster = {aid: dataclasses.asdict(a) for aid, a in state.collab.agents.items()}
    meta = {"kind": "trainer_state", "config_hash": state.cfg_hash, "class_ids": list(state.class_ids),
            "dataset": state.dataset.dataset_id, "roster": roster,
            "seed": state.cfg["train.seed"], "n_ctx": state.prompts.n_ctx,
            "depth": state.prompts.depth, "width": state.model.width,
            "epoch_losses": list(state.epoch_losses)}
    return write_cache(records, path, meta)


def export_from_snapshot(state_path, out_path) -> Path:
    """Turn a saved trainer snapshot into a prompts-only student file without
    rebuilding the model. Collaboration records are dropped on the floor."""
    reader = CacheReader(state_path)
    meta = reader.meta
    if meta.get("kind") != "trainer_state":
        raise StateError(f"{state_path} is not a trainer state snapshot")
    records = []
    for name in ("visual_prompts", "textual_prompts"):
        for i in range(meta["depth"]):
            values = reader.read("", "", "state", f"{name}/{i:02d}").values
            records.append(KnowledgeCacheRecord("", "", "student", f"{name}/{i:02d}", "snapshot",
                                                values, dtype="f8"))
    out_meta = {"kind": "student", "config_hash": meta["config_hash"], "seed": meta["seed"],
                "n_ctx": meta["n_ctx"], "depth": meta["depth"], "width": meta["width"],
                "epochs": len(meta.get("epoch_losses", []))}
    return write_cache(records, out_path, out_meta)


def load_state(path, cfg: dict, dataset, knowledge=None) -> TrainerState:
    """Rebuild a completed trainer state around a snapshot file."""
    reader = CacheReader(path)
    if reader.meta.get("kind") != "trainer_state":
        raise StateError(f"{path} is not a trainer state snapshot")
    if reader.meta.get("dataset") != dataset.dataset_id:
        raise CacheValidationError(
            f"{path}: snapshot belongs to {reader.meta.get('dataset')!r}, not {dataset.dataset_id!r}")
    class_ids = tuple(reader.meta["class_ids"])
    depth = cfg["prompt.depth"]
    visual = [reader.read("", "", "state", f"visual_prompts/{i:02d}").values for i in range(depth)]
    textual = [reader.read("", "", "state", f"textual_prompts/{i:02d}").values for i in range(depth)]
    prompts = PromptSet(visual, textual)
    model = DualEncoder.from_config(cfg)
    roster = {aid: AgentDescriptor(**info) for aid, info in reader.meta.get("roster", {}).items()}
    collab = None
    source = None
    if roster:
        source = _make_source(knowledge, dataset, class_ids, []) if knowledge is not None else None
        if source is not None and sorted(source.agents) != sorted(roster):
            raise CacheValidationError(f"{path}: knowledge source roster does not match the snapshot")
        collab = Collaboration(roster, cfg, len(class_ids))
        with torch.no_grad():
            for name, p in collab.named_parameters():
                p.copy_(reader.read("", "", "state", f"collab/{name}").values)
    return TrainerState(model=model, prompts=prompts, collab=collab, source=source,
                        dataset=dataset, class_ids=class_ids, sample_ids=(),
                        cfg=dict(cfg), cfg_hash=reader.meta["config_hash"],
                        epoch_losses=list(reader.meta.get("epoch_losses", [])), complete=True)
