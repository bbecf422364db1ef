"""Command-line entry point: corpus generation, the three training stages,
evaluation, latency reporting and ablation sweeps. Every command resolves a
full configuration, persists it beside its outputs in a run directory named
by config hash and seed, and emits machine-readable CSV/JSONL files."""

from __future__ import annotations

import itertools
import json
import sys
from pathlib import Path

import click
import numpy as np

from .collector import CollectionMode
from .config import RunConfig, load_config
from .distributor import ShiftMode, ShiftTarget
from .errors import ConfigurationError, UsageError
from .gm import GmConfig
from .metrics import (
    HORIZON_SECONDS,
    HORIZON_TICKS,
    AdvantageInput,
    advantage,
    build_record,
    framewise_stats,
    nds,
    occupancy_iou,
    summarize,
)
from .numkit import ParamStore, load_checkpoint, save_checkpoint
from .pipeline import EvalCache, System, rollout_for, translator_config_for
from .scheduler import RateModel, latency_report, run_episode
from .sm import occupancy_target
from .trainer import FreezeSpec, finetune_joint, intent_accuracy, pretrain_gm, pretrain_sm
from .translator import init_translator
from .distributor import init_shift
from .worldgen import generate_scenario, load_corpus, save_corpus


def fmt(x: float) -> str:
    """Fixed 6-significant-digit formatting for diffable CSV output."""
    return f"{x:.6g}"


def write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(v) if isinstance(v, float) else str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")
    return path


def write_curve(path: Path, rows: list[dict]) -> Path:
    return write_csv(path, ["step", "loss", "lr"], [[r["step"], r["loss"], r["lr"]] for r in rows])


def prepare_run_dir(out: str, cfg: RunConfig, subdir: str | None = None) -> Path:
    run = Path(out) / cfg.run_name()
    if subdir:
        run = run / subdir
    run.mkdir(parents=True, exist_ok=True)
    cfg.persist(run)
    return run


common_options = [
    click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                 help="TOML configuration file."),
    click.option("--seed", type=int, default=None, help="Override the configured seed."),
    click.option("--out", type=click.Path(file_okay=False), default="runs", show_default=True,
                 help="Parent directory for run outputs."),
    click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                 help="Override a configuration key (repeatable)."),
]


def with_common(f):
    for opt in reversed(common_options):
        f = opt(f)
    return f


def resolve(config_path, seed, sets) -> RunConfig:
    try:
        return load_config(config_path, list(sets), seed)
    except ConfigurationError as exc:
        raise click.ClickException(str(exc)) from exc


@click.group()
def main() -> None:
    """Asynchronous slow-reasoner/fast-planner adapter workbench."""


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@main.command("gen")
@with_common
@click.option("--count", type=int, default=None, help="Scenario count (defaults to corpus.count).")
def cmd_gen(config_path, seed, out, sets, count):
    """Generate a scenario corpus directory with an index."""
    cfg = resolve(config_path, seed, sets)
    run = prepare_run_dir(out, cfg)
    world = cfg.world()
    n = count if count is not None else cfg["corpus"]["count"]
    start = cfg["corpus"]["start_seed"] + cfg.seed * 1_000_000
    scenarios = [generate_scenario(start + i, world) for i in range(n)]
    index = save_corpus(scenarios, run / "corpus", world)
    click.echo(f"wrote {n} scenarios to {index.parent}")


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def _system_from_store(cfg: RunConfig, store: ParamStore) -> System:
    d = cfg.resolved["translator"]
    system = System(
        store=store,
        gm_cfg=cfg.gm(),
        sm_cfg=cfg.sm(),
        tr_cfg=translator_config_for(cfg.gm(), cfg.distribution(), d["heads"], d["use_layer_embedding"]),
        dist_cfg=cfg.distribution(),
        collection=cfg.collection_mode(),
        last_l=cfg.last_l(),
        gm_masked=cfg["eval"]["gm_masked"],
    )
    return system


def _assemble_full_store(cfg: RunConfig, gm_store: ParamStore, sm_store: ParamStore) -> ParamStore:
    """Merge pretrained model parameters with a freshly initialized adapter."""
    store = ParamStore()
    store.merge(gm_store.subset("gm"))
    store.merge(sm_store.subset("sm"))
    rng = np.random.default_rng(np.random.PCG64(cfg.seed))
    d = cfg.resolved["translator"]
    tr_cfg = translator_config_for(cfg.gm(), cfg.distribution(), d["heads"], d["use_layer_embedding"])
    init_translator(store, tr_cfg, rng)
    init_shift(store, cfg.distribution(), rng)
    return store


@main.command("pretrain-gm")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False), required=True)
def cmd_pretrain_gm(config_path, seed, out, sets, corpus_dir):
    """Caption-pretrain the reasoner; writes a checkpoint, curve and report."""
    cfg = resolve(config_path, seed, sets)
    run = prepare_run_dir(out, cfg)
    scenarios = load_corpus(corpus_dir)
    holdout = cfg["train_gm"]["holdout"]
    if len(scenarios) <= holdout:
        raise click.ClickException(f"corpus of {len(scenarios)} cannot spare {holdout} holdout scenarios")
    train, held = scenarios[holdout:], scenarios[:holdout]
    store, rows = pretrain_gm(train, cfg.gm(), cfg.train_cfg("train_gm"))
    acc = intent_accuracy(store, cfg.gm(), held)
    save_checkpoint(store, run / "ckpt_gm")
    write_curve(run / "curve_gm.csv", rows)
    (run / "report_gm.json").write_text(
        json.dumps({"holdout_intent_accuracy": acc, "train_scenarios": len(train)}, indent=1) + "\n"
    )
    click.echo(f"holdout intent accuracy {acc:.1%}; checkpoint at {run / 'ckpt_gm'}")


@main.command("pretrain-sm")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False), required=True)
def cmd_pretrain_sm(config_path, seed, out, sets, corpus_dir):
    """Pretrain the bare planner baseline."""
    cfg = resolve(config_path, seed, sets)
    run = prepare_run_dir(out, cfg)
    scenarios = load_corpus(corpus_dir)
    store, rows = pretrain_sm(
        scenarios,
        cfg.sm(),
        cfg.train_cfg("train_sm"),
        episode_frames=cfg["episode"]["frames"],
        frames_per_scenario=cfg["train_sm"]["frames_per_scenario"],
    )
    save_checkpoint(store, run / "ckpt_sm")
    write_curve(run / "curve_sm.csv", rows)
    click.echo(f"planner checkpoint at {run / 'ckpt_sm'}")


@main.command("finetune")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gm-ckpt", type=str, required=True, help="Reasoner checkpoint stem.")
@click.option("--sm-ckpt", type=str, required=True, help="Planner checkpoint stem.")
def cmd_finetune(config_path, seed, out, sets, corpus_dir, gm_ckpt, sm_ckpt):
    """Jointly fine-tune the attached system from pretrained checkpoints."""
    cfg = resolve(config_path, seed, sets)
    run = prepare_run_dir(out, cfg)
    scenarios = load_corpus(corpus_dir)
    store = _assemble_full_store(cfg, _load_ckpt(gm_ckpt), _load_ckpt(sm_ckpt))
    system = _system_from_store(cfg, store)
    rows = finetune_joint(
        system,
        scenarios,
        cfg.freeze(),
        cfg.train_cfg("finetune"),
        episode_frames=cfg["episode"]["frames"],
        frames_per_scenario=cfg["finetune"]["frames_per_scenario"],
        cache=EvalCache(),
    )
    save_checkpoint(store, run / "ckpt_full")
    write_curve(run / "curve_finetune.csv", rows)
    click.echo(f"full-system checkpoint at {run / 'ckpt_full'}")


def _load_ckpt(stem: str) -> ParamStore:
    try:
        return load_checkpoint(stem)
    except (UsageError, OSError) as exc:
        raise click.ClickException(f"cannot load checkpoint {stem!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def evaluate_system(
    system: System,
    scenarios,
    rates: RateModel,
    frames: int,
    category_policy: str,
    cache: EvalCache | None = None,
    wall_clock: bool = False,
):
    """Run episodes and score every frame against the expert; returns
    (records, per-frame rows, logs, occupancy IoU mean)."""
    records, rows, logs, ious = [], [], [], []
    for s in scenarios:
        outputs, log = run_episode(
            s, system, rates, seed=s.seed, frames=frames,
            category_policy=category_policy, cache=cache, wall_clock=wall_clock,
        )
        states = rollout_for(s, frames, system.sm_cfg.history_len, cache)
        for state, output in zip(states, outputs):
            rec = build_record(state.index, state.scenario, output.trajectory(), state.oracle)
            records.append(rec)
            ious.append(occupancy_iou(output.occupancy_logits.data, occupancy_target(state.scenario, system.sm_cfg)))
            rows.append([s.seed, state.index] + [rec.l2[h] for h in HORIZON_TICKS]
                        + [int(rec.collided[h]) for h in HORIZON_TICKS])
        logs.append(log)
    return records, rows, logs, float(np.mean(ious))


def _summary_rows(name: str, summary: dict) -> list:
    return [name] + [summary[k] for k in (
        "l2_1s", "l2_2s", "l2_3s", "l2_avg", "col_1s", "col_2s", "col_3s", "col_avg")]


SUMMARY_HEADER = ["system", "l2_1s", "l2_2s", "l2_3s", "l2_avg", "col_1s", "col_2s", "col_3s", "col_avg"]


@main.command("eval")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--ckpt", type=str, required=True, help="Full-system (or planner-only) checkpoint stem.")
@click.option("--baseline-ckpt", type=str, default=None,
              help="Planner checkpoint for the detached baseline (defaults to --ckpt).")
def cmd_eval(config_path, seed, out, sets, corpus_dir, ckpt, baseline_ckpt):
    """Score a system against the detached baseline on a held-out corpus."""
    cfg = resolve(config_path, seed, sets)
    run = prepare_run_dir(out, cfg)
    scenarios = load_corpus(corpus_dir)[: cfg["eval"]["scenarios"]]
    store = _load_ckpt(ckpt)
    attached = "tr.queries" in store
    base_store = _load_ckpt(baseline_ckpt) if baseline_ckpt else store
    cache = EvalCache()
    frames = cfg["eval"]["frames"]
    policy = cfg["eval"]["category_policy"]

    base_system = _system_from_store(cfg, base_store).detached()
    base_records, base_rows, _, base_iou = evaluate_system(
        base_system, scenarios, cfg.eval_rates(), frames, policy, cache)
    if attached:
        system = _system_from_store(cfg, store)
        records, rows, logs, iou = evaluate_system(
            system, scenarios, cfg.eval_rates(), frames, policy, cache)
        logs[0].to_jsonl(run / "events.jsonl")
    else:
        records, rows, iou = base_records, base_rows, base_iou

    frame_rows = []
    for brow, erow, brec, erec in zip(base_rows, rows, base_records, records):
        frame_rows.append(erow + [brec.l2_avg, erec.l2_avg, brec.l2_avg - erec.l2_avg])
    write_csv(
        run / "frames.csv",
        ["scenario", "frame", "l2_1s", "l2_2s", "l2_3s", "col_1s", "col_2s", "col_3s",
         "l2_avg_base", "l2_avg_exp", "delta_l2"],
        frame_rows,
    )
    base_summary, exp_summary = summarize(base_records), summarize(records)
    deltas = [b.l2_avg - e.l2_avg for b, e in zip(base_records, records)]
    stats = framewise_stats(deltas)
    summary_rows = [
        _summary_rows("baseline", base_summary),
        _summary_rows("experiment", exp_summary),
        ["delta_l2"] + [base_summary[k] - exp_summary[k] for k in
                        ("l2_1s", "l2_2s", "l2_3s", "l2_avg")] + [0.0, 0.0, 0.0, 0.0],
    ]
    write_csv(run / "summary.csv", SUMMARY_HEADER, summary_rows)
    report = {
        "framewise": stats,
        "nds_proxy": {"baseline": nds(base_iou, [0] * 5), "experiment": nds(iou, [0] * 5)},
        "occupancy_iou": {"baseline": base_iou, "experiment": iou},
    }
    (run / "report_eval.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    click.echo(
        f"l2_avg baseline {fmt(base_summary['l2_avg'])} vs experiment {fmt(exp_summary['l2_avg'])}; "
        f"outputs in {run}"
    )


@main.command("latency")
@with_common
@click.option("--log", "log_path", type=click.Path(exists=True, dir_okay=False), required=True,
              help="JSONL event log from a run.")
def cmd_latency(config_path, seed, out, sets, log_path):
    """Summarize production and distribution latency from an event log."""
    from .scheduler import ScheduleLog

    cfg = resolve(config_path, seed, sets)
    run = prepare_run_dir(out, cfg)
    report = latency_report(ScheduleLog.from_jsonl(log_path))
    rows = [
        ["collection_translation", report.collection_translation.count,
         report.collection_translation.mean, report.collection_translation.std],
        ["distribution", report.distribution.count, report.distribution.mean, report.distribution.std],
    ]
    path = write_csv(run / "latency.csv", ["category", "count", "mean", "std"], rows)
    click.echo(path.read_text().rstrip())


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

_AXIS_KEYS = {
    "collection": ("collection", "mode"),
    "use_layer_embedding": ("translator", "use_layer_embedding"),
    "mode": ("distribution", "mode"),
    "target": ("distribution", "target"),
    "freeze_gm": ("finetune", "freeze_gm"),
    "freeze_sm": ("finetune", "freeze_sm"),
    "category_policy": ("finetune", "category_policy"),
    "gm_masked": ("eval", "gm_masked"),
}


def _cell_name(assignment: dict) -> str:
    parts = []
    for axis, value in assignment.items():
        parts.append(f"{axis}={str(value).lower()}")
    return ",".join(parts)


@main.command("ablate")
@with_common
@click.option("--corpus", "corpus_dir", type=click.Path(exists=True, file_okay=False), required=True)
@click.option("--gm-ckpt", type=str, required=True)
@click.option("--sm-ckpt", type=str, required=True)
def cmd_ablate(config_path, seed, out, sets, corpus_dir, gm_ckpt, sm_ckpt):
    """Sweep the configured grid, fine-tuning and scoring each cell, and emit
    a baseline-anchored advantage table."""
    cfg = resolve(config_path, seed, sets)
    run = prepare_run_dir(out, cfg)
    axes = {k: v for k, v in cfg.resolved["ablate"].items() if v}
    if not axes:
        raise click.ClickException("no ablation axes configured (section [ablate])")
    scenarios = load_corpus(corpus_dir)
    eval_count = cfg["eval"]["scenarios"]
    train_scen, eval_scen = scenarios[:-eval_count] or scenarios, scenarios[-eval_count:]
    gm_store, sm_store = _load_ckpt(gm_ckpt), _load_ckpt(sm_ckpt)
    cache = EvalCache()
    frames = cfg["eval"]["frames"]
    policy = cfg["eval"]["category_policy"]

    base_system = _system_from_store(cfg, sm_store).detached()
    base_records, _, _, base_iou = evaluate_system(
        base_system, eval_scen, cfg.eval_rates(), frames, policy, cache)
    base_summary = summarize(base_records)
    base_metrics = {
        "l2_avg": base_summary["l2_avg"],
        "col_avg": base_summary["col_avg"],
        "nds_proxy": nds(base_iou, [0] * 5),
    }

    names, assignments = list(axes), list(itertools.product(*axes.values()))
    cell_metrics: dict[str, dict[str, float]] = {}
    for combo in assignments:
        assignment = dict(zip(names, combo))
        overrides = [f"{'.'.join(_AXIS_KEYS[a])}={json.dumps(v) if isinstance(v, bool) else v}"
                     for a, v in assignment.items()]
        cell_cfg = load_config(cfg.source, list(cfg.overrides) + overrides, cfg.seed)
        cell_dir = run / "cells" / cell_cfg.run_name()
        summary_path = cell_dir / "cell.json"
        if summary_path.exists():
            cell_metrics[_cell_name(assignment)] = json.loads(summary_path.read_text())
            continue
        store = _assemble_full_store(cell_cfg, gm_store, sm_store)
        system = _system_from_store(cell_cfg, store)
        system.gm_masked = False  # cells train unmasked; masking applies at inference
        finetune_joint(
            system, train_scen, cell_cfg.freeze(), cell_cfg.train_cfg("finetune"),
            episode_frames=cell_cfg["episode"]["frames"],
            frames_per_scenario=cell_cfg["finetune"]["frames_per_scenario"],
            cache=cache if cell_cfg.freeze().freeze_gm else None,
        )
        system.gm_masked = cell_cfg["eval"]["gm_masked"]
        records, _, _, iou = evaluate_system(
            system, eval_scen, cell_cfg.eval_rates(), frames, policy,
            cache if not system.gm_masked else None)
        summary = summarize(records)
        metrics = {
            "l2_avg": summary["l2_avg"],
            "col_avg": summary["col_avg"],
            "nds_proxy": nds(iou, [0] * 5),
        }
        cell_dir.mkdir(parents=True, exist_ok=True)
        cell_cfg.persist(cell_dir)
        summary_path.write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
        cell_metrics[_cell_name(assignment)] = metrics

    metric_dirs = {"l2_avg": False, "col_avg": False, "nds_proxy": True}
    table_rows = [["baseline"] + [1.0 for _ in metric_dirs]]
    for cell, metrics in cell_metrics.items():
        row = [cell]
        for metric, higher_better in metric_dirs.items():
            observed = tuple(m[metric] for m in cell_metrics.values()) + (base_metrics[metric],)
            row.append(advantage(AdvantageInput(
                value=metrics[metric], baseline=base_metrics[metric],
                observed=observed, higher_better=higher_better)))
        table_rows.append(row)
    path = write_csv(run / "advantage.csv", ["cell", "l2_avg", "col_avg", "nds_proxy"], table_rows)
    click.echo(path.read_text().rstrip())


if __name__ == "__main__":
    main()
