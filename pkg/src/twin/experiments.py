"""Per-seed experiment runners and report assembly for the command line."""
from __future__ import annotations

import csv
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .attention import (AttentionConfig, TwinParams, build_equivalent_dense, raw_mhta_forward, raw_scores,
                        relevance_scores, twin_forward)
from .config import ExperimentConfig, config_hash
from .datagen import World, WorldConfig, generate_behaviors, generate_log, generate_world, planted_params
from .features import EmbeddingTable
from .retrieval import GsuKind, RetrievalCase, hit_rate_curve
from .serving import (DriftingParams, FlopModel, ProjectionCache, SyncSchedule, flops_raw,
                      flops_twin_online, measured_flops, reduction_ratio, refresh_cache, run_scenario,
                      sample_requests)
from .training import (NO_BIAS, RAW, TWIN, CtrDataset, CtrModel, ModelConfig, TrainConfig, evaluate,
                       init_params, train)

WORKERS_ENV = "TWIN_WORKERS"


@dataclass
class SeedResult:
    seed: int
    metrics: dict
    rows: list[dict] = field(default_factory=list)
    counters: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# shared training setup

@dataclass
class TrainingSetup:
    world: World
    train_set: CtrDataset
    test_set: CtrDataset
    attention: AttentionConfig
    model_opts: dict
    train_opts: dict


def training_setup(world_cfg: WorldConfig, attention: dict | None = None, model: dict | None = None,
                   train_opts: dict | None = None) -> TrainingSetup:
    world = generate_world(world_cfg)
    log = generate_log(world)
    data = CtrDataset.from_log(world, log)
    train_opts = dict(train_opts or {})
    tr, te = data.split(train_opts.get("test_fraction", 0.25))
    acfg = AttentionConfig.for_schema(world.schema, **(attention or {}))
    return TrainingSetup(world, tr, te, acfg, dict(model or {}), train_opts)


def _train_config(opts: dict, seed: int, epochs_key: str = "epochs") -> TrainConfig:
    return TrainConfig(epochs=int(opts.get(epochs_key, 1)), batch_size=int(opts.get("batch_size", 256)),
                       lr_embedding=float(opts.get("lr_embedding", 0.05)),
                       lr_dense=float(opts.get("lr_dense", 5e-6)),
                       adagrad_init=float(opts.get("adagrad_init", 0.1)), seed=seed)


def model_config(setup: TrainingSetup, kind: str = TWIN, **overrides) -> ModelConfig:
    opts = {**setup.model_opts, **overrides}
    if "hidden" in opts:
        opts["hidden"] = tuple(opts["hidden"])
    return ModelConfig(setup.attention, kind=kind, **opts)


def pretrain_embeddings(setup: TrainingSetup, seed: int) -> EmbeddingTable:
    """Video embeddings for SimSoft: a separately trained model, then frozen.

    The donor model retrieves by category (no dependence on the embeddings it
    is learning), trains from its own initialization, and only its
    ``video_id`` table is kept.
    """
    mc = model_config(setup, TWIN)
    tc = _train_config({"pretrain_epochs": 1, **setup.train_opts}, seed=10_000 + seed,
                       epochs_key="pretrain_epochs")
    if tc.epochs == 0:
        return init_params(mc, setup.world.schema, np.random.default_rng([tc.seed, 3])).tables["video_id"]
    return train(setup.train_set, mc, tc, GsuKind.SIM_HARD).params.tables["video_id"]


def train_variant(setup: TrainingSetup, seed: int, *, kind: str = TWIN, gsu: GsuKind = GsuKind.TWIN_CP,
                  pretrained: EmbeddingTable | None = None, cache=None, metrics_path=None,
                  **model_overrides) -> dict:
    """Train one variant from the seed's shared initialization and evaluate it."""
    mc = model_config(setup, kind, **model_overrides)
    tc = _train_config(setup.train_opts, seed)
    t0 = time.perf_counter()
    res = train(setup.train_set, mc, tc, gsu, pretrained=pretrained, cache=cache, metrics_path=metrics_path,
                eval_set=setup.test_set if metrics_path else None)
    t1 = time.perf_counter()
    model = CtrModel(mc, setup.world.schema, res.params)
    ev = evaluate(model, setup.test_set, gsu, pretrained=pretrained, cache=cache)
    t2 = time.perf_counter()
    return {"auc": ev["auc"], "gauc": ev["gauc"], "test_loss": ev["loss"], "final_loss": res.losses[-1],
            "users_used": ev["users_used"], "users_excluded": ev["users_excluded"], "steps": len(res.losses),
            "losses": res.losses, "train_seconds": t1 - t0, "eval_seconds": t2 - t1}


def loss_trace(setup: TrainingSetup, seed: int, gsu: GsuKind, steps: int, cache=None) -> list[float]:
    """The first ``steps`` losses of a TWIN run with the given GSU."""
    mc = model_config(setup, TWIN)
    tc = _train_config({**setup.train_opts, "epochs": 1}, seed)
    n = min(len(setup.train_set), steps * tc.batch_size)
    subset = setup.train_set.subset(range(n))
    return train(subset, mc, tc, gsu, cache=cache).losses


# ---------------------------------------------------------------------------
# runners

def run_equivalence(cfg: ExperimentConfig, seed: int) -> SeedResult:
    o = cfg.equivalence
    n, L, H, J = int(o.get("instances", 100)), int(o.get("L", 1024)), int(o.get("H", 144)), int(o.get("J", 5))
    acfg = AttentionConfig(H=H, J=J, d_k=int(o.get("d_k", 32)), n_heads=int(o.get("n_heads", 4)))
    rng = np.random.default_rng([seed, 0xE0])
    rows = []
    for i in range(n):
        params = TwinParams.init(acfg, rng)
        dense = build_equivalent_dense(params)
        q = rng.normal(size=H)
        K_h = rng.normal(size=(L, H))
        K_c = rng.normal(size=(L, acfg.C))
        K = np.concatenate([K_h, K_c], axis=1)
        d_alpha = max(float(np.max(np.abs(relevance_scores(q, K_h, K_c, h) - raw_scores(q, K, d))))
                      for h, d in zip(params.heads, dense.heads))
        d_out = float(np.max(np.abs(twin_forward(q, K_h, K_c, params) - raw_mhta_forward(q, K, dense))))
        rows.append({"seed": seed, "instance": i, "max_alpha_diff": d_alpha, "max_output_diff": d_out})
    return SeedResult(seed, {"max_alpha_diff": max(r["max_alpha_diff"] for r in rows),
                             "max_output_diff": max(r["max_output_diff"] for r in rows)}, rows)


def _serve_world(cfg: ExperimentConfig, seed: int) -> World:
    return generate_world(cfg.world_config(seed))


def consistency_curves(world: World, cases: Sequence[RetrievalCase], n_values: Sequence[int], *,
                       drift_rate: float, stale_minutes: float, seed: int, k: int = 100) -> dict:
    """Hit-rate curves of every GSU against the fresh oracle.

    The cache holds projections from ``stale_minutes`` before the online
    parameters; SimSoft keeps the embeddings from that earlier time too.
    """
    tables, params = planted_params(world, AttentionConfig.for_schema(world.schema), seed=seed)
    walk = DriftingParams(tables, params, drift_rate, max(stale_minutes, 1e-9), seed)
    t_now, p_now = walk.at(1 if stale_minutes > 0 else 0)
    cache = ProjectionCache()
    refresh_cache(cache, world, tables, params, SyncSchedule(coverage_fraction=1.0))
    out = {}
    for gsu in GsuKind:
        out[gsu.value] = hit_rate_curve(gsu, n_values, cases, world.schema, tables=t_now, esu_params=p_now,
                                        cache=cache, pretrained=tables["video_id"], k_oracle=k)
    return out


def run_consistency(cfg: ExperimentConfig, seed: int) -> SeedResult:
    o = cfg.consistency
    world = _serve_world(cfg, seed)
    reqs = sample_requests(world, int(o.get("cases", 50)), 60.0, seed=seed)
    cases = [RetrievalCase(world.catalog.target(r.video_id), generate_behaviors(world, world.users[r.user]))
             for r in reqs]
    n_values = [int(n) for n in o.get("n_values", [50, 100, 200, 500, 1000, 2000, 5000, 10000])]
    curves = consistency_curves(world, cases, n_values, drift_rate=float(o.get("drift_rate", 0.05)),
                                stale_minutes=float(o.get("stale_minutes", 15.0)), seed=seed,
                                k=int(o.get("k", 100)))
    rows = []
    for j, n in enumerate(n_values):
        row = {"seed": seed, "n": n}
        for name, curve in curves.items():
            row[name] = curve[j][1]
        rows.append(row)
    max_L = max(len(c.behaviors) for c in cases)
    metrics = {f"hit@100_{name}": dict((n, m) for n, m, _ in curve).get(100, float("nan"))
               for name, curve in curves.items()}
    metrics["max_L"] = max_L
    return SeedResult(seed, metrics, rows)


def run_train(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> SeedResult:
    setup = training_setup(cfg.world_config(seed), cfg.attention, cfg.model, cfg.train)
    gsus = [GsuKind(g) for g in cfg.train.get("gsus", ["TwinCP", "SimHard", "SimSoft"])]
    pretrained = pretrain_embeddings(setup, seed) if GsuKind.SIM_SOFT in gsus else None
    rows, metrics, timings = [], {}, {}
    for gsu in gsus:
        path = out_dir / f"metrics_seed{seed}_{gsu.value}.csv" if out_dir else None
        if path is not None and path.exists():
            path.unlink()
        r = train_variant(setup, seed, gsu=gsu, pretrained=pretrained, metrics_path=path)
        rows.append({"seed": seed, "method": gsu.value, "auc": r["auc"], "gauc": r["gauc"],
                     "test_loss": r["test_loss"], "final_loss": r["final_loss"], "steps": r["steps"]})
        metrics[f"gauc_{gsu.value}"] = r["gauc"]
        metrics[f"auc_{gsu.value}"] = r["auc"]
        timings[f"train_{gsu.value}"] = r["train_seconds"]
    return SeedResult(seed, metrics, rows, timings=timings)


def run_bench(cfg: ExperimentConfig, seed: int) -> SeedResult:
    o = cfg.bench
    L, J = int(o.get("L", 10_000)), int(o.get("J", 5))
    rows, metrics, timings = [], {}, {}
    for H in o.get("H_values", [int(o.get("H", 144))]):
        m = FlopModel(L=L, H=int(H), C=8 * J, J=J, d_k=int(o.get("d_k", 32)), d_out=int(o.get("d_out", 32)),
                      n_heads=int(o.get("n_heads", 4)))
        raw, twin = flops_raw(m), flops_twin_online(m)
        t0 = time.perf_counter()
        meas = measured_flops(m, seed=seed)
        timings[f"measure_H{H}"] = time.perf_counter() - t0
        mr, mt = meas.raw_breakdown(), meas.twin_breakdown()
        rows.append({"seed": seed, "L": L, "H": int(H), "C": m.C, "J": J, "d_k": m.d_k, "d_out": m.d_out,
                     "n_heads": m.n_heads, "raw_analytic": raw.total, "raw_measured": mr.total,
                     "raw_dot": raw.dot, "twin_analytic": twin.total, "twin_measured": mt.total,
                     "twin_reads": mt.reads, "offline_refresh_macs": meas.refresh.total_macs,
                     "reduction": reduction_ratio(m),
                     "exact": int(mr.total == raw.total and mr.dot == raw.dot and mt.total == twin.total)})
        metrics[f"reduction_H{H}"] = reduction_ratio(m)
    metrics["all_exact"] = int(all(r["exact"] for r in rows))
    return SeedResult(seed, metrics, rows, timings=timings)


def run_serve_sim(cfg: ExperimentConfig, seed: int, out_dir: Path | None = None) -> SeedResult:
    o = cfg.serve
    world = _serve_world(cfg, seed)
    tables, params = planted_params(world, AttentionConfig.for_schema(world.schema), seed=seed)
    reqs = sample_requests(world, int(o.get("requests", 100)), float(o.get("horizon", 120.0)), seed=seed)
    periods = o.get("cache_refresh_periods", [o.get("cache_refresh_period", 15.0)])
    rows, metrics, counters = [], {}, {"twin_scoring_macs": 0, "twin_gather_reads": 0, "cache_misses": 0}
    histories: dict = {}
    for period in periods:
        sched = SyncSchedule(float(o.get("param_sync_period", 5.0)), float(period),
                             float(o.get("coverage_fraction", 0.97)))
        rep = run_scenario(world, tables, params, sched, reqs, float(o.get("drift_rate", 0.05)), seed=seed,
                           k=int(o.get("k", 100)), policy=o.get("policy", "compute-on-miss"),
                           histories=histories)
        if out_dir is not None:
            rep.write_csv(out_dir / f"requests_seed{seed}_period{period}.csv")
            rep.write_json(out_dir / f"scenario_seed{seed}_period{period}.json")
        s = rep.summary
        row = {"seed": seed, "refresh_period": period, "mean_staleness": s["mean_staleness"],
               "cache_misses": s["cache_misses"], "twin_scoring_macs": s["twin_scoring_macs"]}
        for gsu in GsuKind:
            row[gsu.value] = s[f"hit_{gsu.value}_mean"]
            metrics[f"hit@p{period}_{gsu.value}"] = s[f"hit_{gsu.value}_mean"]
        rows.append(row)
        for key in counters:
            counters[key] += s[key]
    return SeedResult(seed, metrics, rows, counters=counters)


def run_length_sweep(cfg: ExperimentConfig, seed: int) -> SeedResult:
    setup = training_setup(cfg.world_config(seed), cfg.attention, cfg.model, cfg.train)
    rows, metrics, timings = [], {}, {}
    for L in cfg.length_sweep.get("lengths", [1000, 2000, 5000, 10000]):
        r = train_variant(setup, seed, gsu=GsuKind.TWIN_CP, gsu_input_len=int(L))
        rows.append({"seed": seed, "gsu_input_len": int(L), "auc": r["auc"], "gauc": r["gauc"]})
        metrics[f"gauc_L{L}"] = r["gauc"]
        timings[f"train_L{L}"] = r["train_seconds"]
    return SeedResult(seed, metrics, rows, timings=timings)


def run_ablation(cfg: ExperimentConfig, seed: int) -> SeedResult:
    setup = training_setup(cfg.world_config(seed), cfg.attention, cfg.model, cfg.train)
    flop_L = int(cfg.ablation.get("flop_L", 10_000))
    a = setup.attention
    fm = FlopModel(L=flop_L, H=a.H, C=a.C, J=a.J, d_k=a.d_k, d_out=a.d_out, n_heads=a.n_heads)
    twin = flops_twin_online(fm)
    scoring = {TWIN: twin.total, NO_BIAS: twin.dot, RAW: flops_raw(fm).total}
    rows, metrics, timings = [], {}, {}
    for kind in cfg.ablation.get("variants", [TWIN, RAW, NO_BIAS]):
        r = train_variant(setup, seed, kind=kind, gsu=GsuKind.TWIN_CP)
        rows.append({"seed": seed, "variant": kind, "auc": r["auc"], "gauc": r["gauc"],
                     "scoring_macs_at_L": scoring[kind]})
        metrics[f"gauc_{kind}"] = r["gauc"]
        timings[f"train_{kind}"] = r["train_seconds"]
        timings[f"eval_{kind}"] = r["eval_seconds"]
    return SeedResult(seed, metrics, rows, timings=timings)


RUNNERS: dict[str, Callable] = {
    "equivalence": run_equivalence,
    "consistency": run_consistency,
    "train": run_train,
    "bench": run_bench,
    "serve-sim": run_serve_sim,
    "length-sweep": run_length_sweep,
    "ablation": run_ablation,
}
_WANTS_OUT = {"train", "serve-sim"}


def _run_one(cfg: ExperimentConfig, seed: int, out_dir: str | None) -> SeedResult:
    runner = RUNNERS[cfg.command]
    t0 = time.perf_counter()
    if cfg.command in _WANTS_OUT:
        res = runner(cfg, seed, Path(out_dir) if out_dir else None)
    else:
        res = runner(cfg, seed)
    res.timings["wall_clock"] = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------------------
# reports

def workers_from_env() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1")
    return n


def _mean_stderr(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def run(cfg: ExperimentConfig, out_dir, workers: int = 1) -> dict:
    """Run every seed, write ``<command>.csv`` and ``report.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    seeds = sorted(cfg.seeds)
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, [cfg] * len(seeds), seeds, [str(out)] * len(seeds)))
    else:
        results = [_run_one(cfg, s, str(out)) for s in seeds]
    results.sort(key=lambda r: r.seed)

    rows = [row for r in results for row in r.rows]
    csv_path = out / f"{cfg.command}.csv"
    if rows:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    keys = sorted({k for r in results for k in r.metrics})
    aggregate = {}
    for k in keys:
        mean, se = _mean_stderr([r.metrics[k] for r in results if k in r.metrics])
        aggregate[k] = {"mean": mean, "stderr": se}
    counters: dict = {}
    for r in results:
        for k, v in r.counters.items():
            counters[k] = counters.get(k, 0) + v
    report = {
        "command": cfg.command,
        "config": cfg.source,
        "config_hash": config_hash(cfg),
        "seeds": seeds,
        "per_seed": [{"seed": r.seed, "metrics": r.metrics, "timings": r.timings} for r in results],
        "aggregate": aggregate,
        "counters": counters,
        "wall_clock": time.perf_counter() - t0,
        "csv": csv_path.name,
    }
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
    return report


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


class SummaryError(ValueError):
    pass


def summarize(paths: Sequence, out_dir=None) -> list[dict]:
    """Mean and sample std over seeds of every metric in the given reports.

    One row per (method, metric); metric keys ``<metric>_<method>`` are split
    on the last underscore.  Reports with different config hashes are refused.
    """
    reports = []
    for p in paths:
        p = Path(p)
        if not p.is_file():
            raise SummaryError(f"report not found: {p}")
        with open(p) as fh:
            try:
                reports.append(json.load(fh))
            except json.JSONDecodeError as e:
                raise SummaryError(f"{p}: not a JSON report ({e})") from None
    if not reports:
        raise SummaryError("no reports given")
    hashes = {r.get("config_hash") for r in reports}
    if len(hashes) != 1:
        raise SummaryError(f"reports come from different configs: {sorted(map(str, hashes))}")
    per_metric: dict[str, dict[int, float]] = {}
    for r in reports:
        for entry in r["per_seed"]:
            for k, v in entry["metrics"].items():
                per_metric.setdefault(k, {})[entry["seed"]] = float(v)
    rows = []
    for key in sorted(per_metric):
        vals = np.array([per_metric[key][s] for s in sorted(per_metric[key])])
        metric, _, method = key.rpartition("_")
        if not metric:
            metric, method = key, ""
        std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
        rows.append({"method": method, "metric": metric, "mean": float(vals.mean()), "std": std,
                     "n": int(vals.size)})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["method", "metric", "mean", "std", "n"])
            w.writeheader()
            w.writerows(rows)
        with open(out / "summary.txt", "w") as fh:
            fh.write(format_summary(rows))
    return rows


def format_summary(rows: Sequence[dict]) -> str:
    lines = [f"{'method':<12} {'metric':<24} {'mean':>12} {'std':>12} {'n':>4}"]
    for r in rows:
        lines.append(f"{r['method']:<12} {r['metric']:<24} {r['mean']:>12.6g} {r['std']:>12.6g} {r['n']:>4}")
    return "\n".join(lines) + "\n"


__all__ = ["SeedResult", "TrainingSetup", "training_setup", "pretrain_embeddings", "train_variant",
           "loss_trace", "consistency_curves", "RUNNERS", "run", "summarize", "format_summary",
           "workers_from_env", "SummaryError"]
