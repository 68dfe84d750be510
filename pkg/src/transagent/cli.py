"""Command line front end.

Exit codes: 0 success, 2 configuration or schema problems, 3 missing input
files, 1 any other failure from this package. Errors are one line on stderr,
prefixed with `error:`, so wrapper scripts can grep them.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .agents import load_registry, load_descriptions, save_registry
from .cache import CacheReader, write_cache
from .config import config_hash, load_config, save_config, schema_help
from .data import SyntheticBenchmark
from .errors import ConfigurationError, TransAgentError
from .evaluate import (AXES, base_novel_split, evaluate, few_shot_sample, gating_report,
                       render_gating_report, run_ablation)
from .train import (export_from_snapshot, export_student, extract_knowledge, load_state,
                    load_student, save_state, train)


def _fail(kind: str, exc: BaseException) -> None:
    message = " ".join(str(exc).split())
    print(f"error: {kind}: {message}", file=sys.stderr)


def _cache_dir(args) -> Path:
    if getattr(args, "cache_dir", None):
        return Path(args.cache_dir)
    env = os.environ.get("TRANSAGENT_CACHE_DIR")
    return Path(env) if env else Path("caches")


def _load_cfg(args) -> dict:
    return load_config(args.config, args.set or ())


def _run_dir(args, cfg: dict) -> Path:
    root = Path(args.out)
    run = root / config_hash(cfg)[:12]
    run.mkdir(parents=True, exist_ok=True)
    save_config(cfg, run / "config.yaml")
    return run


def _knowledge(args):
    """Pick the teacher side: a cache file, a live registry, or nothing."""
    if getattr(args, "cache", None):
        return CacheReader(args.cache)
    if getattr(args, "registry", None):
        return load_registry(args.registry)
    return None


def _training_pool(cfg: dict, dataset):
    split = base_novel_split(dataset.class_ids(), cfg["split.seed"])
    shots = few_shot_sample(dataset, cfg["train.shots"], cfg["train.seed"], split.base)
    sample_ids = [sid for c in split.base for sid in shots[c]]
    return split, sample_ids


def cmd_extract(args) -> int:
    cfg = _load_cfg(args)
    registry = load_registry(args.registry)
    dataset = SyntheticBenchmark.from_config(cfg)
    split = base_novel_split(dataset.class_ids(), cfg["split.seed"])
    sample_ids = dataset.all_ids("train", split.base)
    descriptions = None
    if args.descriptions:
        descriptions = {}
        for aid, agent in registry.items():
            if agent.modality == "language":
                descriptions[aid] = load_descriptions(Path(args.descriptions) / f"{aid}.txt", aid)
    records, meta = extract_knowledge(registry, dataset, split.base, sample_ids, descriptions)
    out_dir = _cache_dir(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{dataset.dataset_id}.takc"
    write_cache(records, path, meta)
    print(f"wrote {len(records)} records for {len(registry)} agents to {path}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run = _run_dir(args, cfg)
    dataset = SyntheticBenchmark.from_config(cfg)
    split, sample_ids = _training_pool(cfg, dataset)
    knowledge = _knowledge(args)
    state = train(cfg, dataset, split.base, sample_ids, knowledge)
    with open(run / "train_log.jsonl", "w", encoding="utf-8") as fh:
        for i, row in enumerate(state.epoch_losses):
            fh.write(json.dumps({"epoch": i, **row}, sort_keys=True) + "\n")
    save_state(state, run / "state.takc")
    export_student(state, run / "student.takc")
    if isinstance(knowledge, dict):
        save_registry(knowledge, run / "registry.yaml")
    final = state.epoch_losses[-1]["total"] if state.epoch_losses else float("nan")
    print(f"run {run}")
    print(f"trained {cfg['train.epochs']} epochs on {len(sample_ids)} samples, final loss {final:.4f}")
    print(f"student {run / 'student.takc'}")
    return 0


def cmd_export(args) -> int:
    path = export_from_snapshot(args.state, args.out)
    print(f"student {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    dataset = SyntheticBenchmark.from_config(cfg)
    split = base_novel_split(dataset.class_ids(), cfg["split.seed"])
    student = load_student(args.student)
    report = evaluate(student, dataset, split, cfg)
    run = _run_dir(args, cfg)
    payload = {"base": report.base, "novel": report.novel, "hm": report.harmonic,
               "base_classes": list(split.base), "novel_classes": list(split.novel)}
    (run / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(report.summary())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    dataset = SyntheticBenchmark.from_config(cfg)
    knowledge = _knowledge(args)
    table = run_ablation(args.axis, cfg, dataset, knowledge)
    run = _run_dir(args, cfg)
    (run / f"ablation_{args.axis}.txt").write_text(table.render(), encoding="utf-8")
    (run / f"ablation_{args.axis}.json").write_text(table.to_json() + "\n", encoding="utf-8")
    print(table.render(), end="")
    return 0


def cmd_gating_report(args) -> int:
    cfg = _load_cfg(args)
    dataset = SyntheticBenchmark.from_config(cfg)
    knowledge = _knowledge(args)
    state = load_state(args.state, cfg, dataset, knowledge)
    pool = dataset.all_ids("train", state.class_ids)
    sample_ids = pool[: args.samples]
    report = gating_report(state, sample_ids)
    run = _run_dir(args, cfg)
    text = render_gating_report(report)
    (run / "gating.txt").write_text(text, encoding="utf-8")
    (run / "gating.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if args.plot:
        png = run / "gating.png"
        _plot_gating(report, png)
        print(f"plot {png}")
    print(text, end="")
    return 0


def _plot_gating(report: dict, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    groups = sorted(report)
    agents = sorted({aid for group in groups for aid in report[group]})
    grid = np.zeros((len(agents), len(groups)))
    for j, group in enumerate(groups):
        for aid, w in report[group].items():
            grid[agents.index(aid), j] = w
    fig, ax = plt.subplots(figsize=(2 + 1.2 * len(groups), 1 + 0.4 * len(agents)))
    im = ax.imshow(grid, cmap="viridis", vmin=0.0, aspect="auto")
    ax.set_xticks(range(len(groups)), groups)
    ax.set_yticks(range(len(agents)), agents)
    for i in range(len(agents)):
        for j in range(len(groups)):
            if grid[i, j] > 0:
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center", fontsize=8, color="white")
    fig.colorbar(im, ax=ax, label="mean gate weight")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _add_common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", required=True, help="YAML config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    if out:
        p.add_argument("--out", default="runs", help="root directory for run outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="transagent",
        description="Prompt learning for a frozen dual encoder with multi-agent knowledge transfer.",
        epilog=schema_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("extract", help="run all agents offline and write a knowledge cache")
    _add_common(p, out=False)
    p.add_argument("--registry", required=True, help="agent registry YAML")
    p.add_argument("--cache-dir", help="cache directory (default $TRANSAGENT_CACHE_DIR or ./caches)")
    p.add_argument("--descriptions", help="directory of <agent_id>.txt class description files")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train prompts, snapshot the state and export the student")
    _add_common(p)
    p.add_argument("--registry", help="agent registry YAML (live extraction)")
    p.add_argument("--cache", help="knowledge cache file (offline replay)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export", help="strip a trainer snapshot down to a prompts-only student")
    p.add_argument("--state", required=True, help="trainer state snapshot (.takc)")
    p.add_argument("--out", required=True, help="output student file")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="score an exported student on the base/novel split")
    _add_common(p)
    p.add_argument("--student", required=True, help="exported student file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="sweep one design axis over the full protocol")
    _add_common(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES), help="which axis to sweep")
    p.add_argument("--registry", help="agent registry YAML")
    p.add_argument("--cache", help="knowledge cache file")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gating-report", help="per-agent mean gate weights for a trained state")
    _add_common(p)
    p.add_argument("--state", required=True, help="trainer state snapshot (.takc)")
    p.add_argument("--registry", help="agent registry YAML")
    p.add_argument("--cache", help="knowledge cache file")
    p.add_argument("--samples", type=int, default=32, help="how many training samples to average over")
    p.add_argument("--plot", action="store_true", help="also write a heat map png")
    p.set_defaults(func=cmd_gating_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 0
    try:
        return args.func(args)
    except ConfigurationError as exc:
        _fail("config", exc)
        return 2
    except FileNotFoundError as exc:
        _fail("missing-input", exc)
        return 3
    except TransAgentError as exc:
        _fail("runtime", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
