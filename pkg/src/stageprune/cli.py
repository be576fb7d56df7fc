"""Command-line entry point: ``stageprune <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 incomplete database.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .calib import StagePartition, build_all_stage_calibrations
from .config import ExperimentConfig, load_config
from .evo import greedy_search, init_population, rank, search, uniform_schedule, evaluate as evaluate_individual
from .exceptions import IncompleteTrajectory, InvalidConfig, InvalidSchedule, MissingReference, StagePruneError
from .fitness import FitnessEvaluator, FitnessSeeds, energy_distance, ssim
from .prune.stages import build_stage_trajectories
from .routedb import RouteDatabase, build_db, memory_report, route
from .toydiff import (
    DenoiserModel,
    SamplerConfig,
    build_schedule,
    initial_latents,
    load_checkpoint,
    make_dataset,
    sample,
    save_checkpoint,
    train,
)
from ._validation import check_schedule

logger = logging.getLogger("stageprune")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_INCOMPLETE = 0, 2, 3, 4

CHECKPOINT = "checkpoint.ckpt"
LOSS_CSV = "train_loss.csv"
DB_FILE = "model.routedb"
MEMORY_JSON = "memory_report.json"
SCHEDULE_JSON = "schedule.json"
HISTORY_CSV = "history.csv"
SEARCH_JSON = "search_summary.json"
REPORT_JSON = "report.json"
COMPARE_CSV = "compare.csv"
COMPARE_JSON = "compare_aggregate.json"


class Context:
    """Objects derived from a resolved config, created lazily."""

    def __init__(self, cfg: ExperimentConfig, args):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)
        self.sampler = SamplerConfig(num_steps=cfg.sampler_steps)
        self.partition = StagePartition(cfg.n_stages, cfg.schedule.T)
        self._data = None

    @property
    def data(self):
        if self._data is None:
            self._data = make_dataset(n=self.cfg.data.size, seed=self.cfg.data.seed,
                                      num_classes=self.cfg.model_config().num_classes)
        return self._data

    def path(self, attr: str, default: str) -> Path:
        given = getattr(self.args, attr, None)
        return Path(given) if given else self.out / default

    def model(self) -> DenoiserModel:
        p = self.path("checkpoint", CHECKPOINT)
        if not p.exists():
            raise InvalidConfig(f"checkpoint {p} not found; run `train` first")
        return load_checkpoint(p)

    def db(self) -> RouteDatabase:
        p = self.path("db", DB_FILE)
        if not p.exists():
            raise InvalidConfig(f"route database {p} not found; run `build-db` first")
        db = RouteDatabase.load(p, backbone=self.model())
        if db.n_stages != self.cfg.n_stages or db.l_max != self.cfg.l_max or db.backend != self.cfg.backend:
            raise InvalidConfig(
                f"database ({db.backend}, n={db.n_stages}, l_max={db.l_max}) does not match config "
                f"({self.cfg.backend}, n={self.cfg.n_stages}, l_max={self.cfg.l_max})"
            )
        db.check_complete()
        return db

    def reference_set(self, count: int, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(self.data), size=min(count, len(self.data)), replace=False)
        return self.data.images[np.sort(idx)]

    def evaluator(self, db: RouteDatabase, fitness_seed: int | None = None) -> FitnessEvaluator:
        cfg = self.cfg
        seeds = FitnessSeeds(seed=cfg.fitness_seed if fitness_seed is None else fitness_seed,
                             count=cfg.fitness_samples, num_classes=cfg.model_config().num_classes)
        ref_set = self.reference_set(cfg.fitness_samples, seeds.seed) if cfg.metric == "energy_distance" else None
        return FitnessEvaluator(db, self.sched, metric=cfg.metric, seeds=seeds, sampler=self.sampler,
                                reference_set=ref_set)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(schedule) -> str:
    return " ".join(str(int(v)) for v in schedule)


def _load_schedule(ctx: Context) -> tuple[int, ...]:
    cfg = ctx.cfg
    p = ctx.path("schedule", SCHEDULE_JSON)
    if not p.exists():
        raise InvalidConfig(f"schedule file {p} not found; run `search` first or pass --schedule")
    raw = json.loads(p.read_text())
    levels = raw["schedule"] if isinstance(raw, dict) else raw
    return check_schedule(levels, cfg.n_stages, cfg.l_max)


# commands


def cmd_train(ctx: Context) -> dict:
    cfg = ctx.cfg
    model = DenoiserModel(cfg.model_config(), seed=cfg.train.seed)
    trained, losses = train(model, ctx.data, ctx.sched, epochs=cfg.train.epochs, lr=cfg.train.lr,
                            batch_size=cfg.train.batch_size, seed=cfg.train.seed)
    ckpt = ctx.path("checkpoint", CHECKPOINT)
    save_checkpoint(trained, ckpt, extra={"config": cfg.to_dict()})
    _write_csv(ctx.out / LOSS_CSV, ["epoch", "loss"], [(i, f"{v:.10g}") for i, v in enumerate(losses)])
    logger.info("checkpoint written to %s", ckpt)
    return {"checkpoint": str(ckpt), "final_loss": losses[-1] if losses else None}


def cmd_build_db(ctx: Context) -> dict:
    cfg = ctx.cfg
    model = ctx.model()
    calibs = build_all_stage_calibrations(ctx.data, ctx.partition, ctx.sched, size=cfg.calib_size, seed=cfg.calib_seed)
    trajs = build_stage_trajectories(model, cfg.backend, calibs, cfg.l_max, mlp_group_size=cfg.mlp_group_size,
                                     damping=cfg.damping)
    db = build_db(trajs, l_max=cfg.l_max, partition=ctx.partition, backbone=model)
    path = ctx.path("db", DB_FILE)
    db.save(path)
    report = memory_report(db, uniform_schedule(cfg.n_stages, cfg.n_stages * cfg.target_level, cfg.l_max))
    report["config"] = cfg.to_dict()
    _write_json(ctx.out / MEMORY_JSON, report)
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, sort_keys=True))
    return {"db": str(path)}


def cmd_search(ctx: Context) -> dict:
    cfg = ctx.cfg
    ev = ctx.evaluator(ctx.db())
    result = search(cfg.search_config(), ev)
    best = result.best
    (ctx.out / SCHEDULE_JSON).write_text(json.dumps(list(best.schedule)) + "\n")
    _write_json(ctx.out / SEARCH_JSON, {
        "schedule": list(best.schedule),
        "fitness": best.fitness,
        "n_evaluations": result.n_evaluations,
        "config": cfg.to_dict(),
    })
    _write_csv(ctx.out / HISTORY_CSV, ["generation", "best", "mean"],
               [(h["generation"], repr(h["best"]), repr(h["mean"])) for h in result.history])
    print(json.dumps({"schedule": list(best.schedule), "fitness": best.fitness}))
    return {"schedule": list(best.schedule), "fitness": best.fitness}


def _random_best(cfg: ExperimentConfig, ev, seed: int, count: int = 20):
    scfg = cfg.search_config(seed=seed)
    scfg = dataclasses.replace(scfg, population_size=count, offspring=count - scfg.survivors)
    pop = init_population(scfg, np.random.default_rng(seed), mode="random")
    for ind in pop:
        evaluate_individual(ind, ev)
    return rank(pop)[0], len(pop)


def _evaluate_schedule(db, schedule, ctx: Context, latents, labels, dense, real) -> dict:
    images = sample(route(db, schedule), ctx.sampler, ctx.sched, labels, latents=latents)
    l_max = ctx.cfg.l_max
    return {
        "schedule": list(schedule),
        "global_sparsity": float(np.mean(schedule)) / l_max,
        "stage_density": [1.0 - v / l_max for v in schedule],
        "ssim_vs_dense": float(np.mean(ssim(images, dense))),
        "mse_vs_dense": float(np.mean((images.astype(np.float64) - dense) ** 2)),
        "energy_distance_vs_data": energy_distance(images, real),
        "energy_distance_vs_dense": energy_distance(images, dense),
    }


def cmd_evaluate(ctx: Context) -> dict:
    cfg = ctx.cfg
    db = ctx.db()
    schedule = _load_schedule(ctx)
    nc = cfg.model_config().num_classes
    latents = initial_latents(cfg.eval_seed, cfg.eval_samples)
    labels = [i % nc for i in range(cfg.eval_samples)]
    dense = sample(db.backbone, ctx.sampler, ctx.sched, labels, latents=latents)
    real = ctx.reference_set(cfg.eval_samples, cfg.eval_seed)

    ev = ctx.evaluator(db)
    scfg = cfg.search_config()
    uni = uniform_schedule(cfg.n_stages, scfg.budget, cfg.l_max)
    rows = {"searched": schedule, "uniform": uni}
    if not ctx.args.no_baselines:
        rows["greedy"] = greedy_search(scfg, ev).best.schedule
        rows["random"] = _random_best(cfg, ev, scfg.seed)[0].schedule
    results = {}
    for name, sch in rows.items():
        entry = _evaluate_schedule(db, sch, ctx, latents, labels, dense, real)
        entry["fitness"] = ev(sch)
        results[name] = entry
    results["dense"] = {
        "energy_distance_vs_data": energy_distance(dense, real),
        "ssim_vs_dense": 1.0,
    }
    report = {
        "best_schedule": list(schedule),
        "evaluation": results,
        "memory": memory_report(db, schedule),
        "seeds": {"eval_seed": cfg.eval_seed, "eval_samples": cfg.eval_samples, "fitness_seed": cfg.fitness_seed,
                  "search_seed": cfg.search.seed},
        "config": cfg.to_dict(),
    }
    hist = ctx.out / HISTORY_CSV
    if hist.exists():
        with open(hist) as fh:
            report["fitness_history"] = [
                {"generation": int(r["generation"]), "best": float(r["best"]), "mean": float(r["mean"])}
                for r in csv.DictReader(fh)
            ]
    _write_json(ctx.out / REPORT_JSON, report)
    print(json.dumps({k: {"ssim_vs_dense": v["ssim_vs_dense"]} for k, v in results.items()}, sort_keys=True))
    return report


def cmd_compare(ctx: Context) -> dict:
    cfg = ctx.cfg
    db = ctx.db()
    rows, per_seed = [], []
    for seed in cfg.compare_seeds:
        ev = ctx.evaluator(db, fitness_seed=seed)
        scfg = cfg.search_config(seed=seed)
        es = search(scfg, ev)
        greedy = greedy_search(scfg, ev, max_evaluations=es.n_evaluations)
        rnd, n_rnd = _random_best(cfg, ev, seed)
        uni = uniform_schedule(cfg.n_stages, scfg.budget, cfg.l_max)
        detail = {
            "seed": seed,
            "uniform": {"fitness": ev(uni), "n_evaluations": 1, "schedule": list(uni)},
            "random-best-of-20": {"fitness": rnd.fitness, "n_evaluations": n_rnd, "schedule": list(rnd.schedule)},
            "greedy": {"fitness": greedy.best.fitness, "n_evaluations": greedy.n_evaluations,
                       "schedule": list(greedy.best.schedule)},
            "evolutionary": {"fitness": es.best.fitness, "n_evaluations": es.n_evaluations,
                             "schedule": list(es.best.schedule)},
        }
        per_seed.append(detail)
        for method in ("uniform", "random-best-of-20", "greedy", "evolutionary"):
            d = detail[method]
            rows.append((seed, method, repr(d["fitness"]), d["n_evaluations"], _fmt(d["schedule"])))
        logger.info("seed %d: evolutionary %.6f greedy %.6f", seed, es.best.fitness, greedy.best.fitness)
    _write_csv(ctx.out / COMPARE_CSV, ["seed", "method", "fitness", "n_evaluations", "schedule"], rows)
    methods = ("uniform", "random-best-of-20", "greedy", "evolutionary")
    aggregate = {
        m: {
            "mean": float(np.mean([d[m]["fitness"] for d in per_seed])),
            "std": float(np.std([d[m]["fitness"] for d in per_seed])),
        }
        for m in methods
    }
    wins = sum(d["evolutionary"]["fitness"] >= d["greedy"]["fitness"] for d in per_seed)
    summary = {
        "aggregate": aggregate,
        "evolutionary_ge_greedy": wins,
        "n_seeds": len(per_seed),
        "per_seed": per_seed,
        "config": cfg.to_dict(),
    }
    _write_json(ctx.out / COMPARE_JSON, summary)
    print(json.dumps({"aggregate": aggregate, "evolutionary_ge_greedy": f"{wins}/{len(per_seed)}"}, sort_keys=True))
    return summary


def cmd_memory_report(ctx: Context) -> dict:
    cfg = ctx.cfg
    db = ctx.db()
    if ctx.args.schedule:
        schedule = _load_schedule(ctx)
    else:
        schedule = uniform_schedule(cfg.n_stages, cfg.n_stages * cfg.target_level, cfg.l_max)
    report = memory_report(db, schedule)
    report["config"] = cfg.to_dict()
    _write_json(ctx.out / MEMORY_JSON, report)
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, sort_keys=True))
    return report


COMMANDS = {
    "train": cmd_train,
    "build-db": cmd_build_db,
    "search": cmd_search,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "memory-report": cmd_memory_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stageprune", description="Stage-wise structural pruning of a toy diffusion model.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON experiment config")
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--stages", dest="n_stages", type=int)
        p.add_argument("--backend", choices=["obs", "wanda", "layerdrop"])
        p.add_argument("--l-max", dest="l_max", type=int)
        p.add_argument("--target-level", dest="target_level", type=int)
        p.add_argument("--generations", type=int)
        p.add_argument("--metric")
        p.add_argument("--checkpoint", help=f"defaults to <output-dir>/{CHECKPOINT}")
        if name not in ("train",):
            p.add_argument("--db", help=f"defaults to <output-dir>/{DB_FILE}")
        if name in ("evaluate", "memory-report"):
            p.add_argument("--schedule", help=f"schedule JSON; defaults to <output-dir>/{SCHEDULE_JSON}")
        if name == "evaluate":
            p.add_argument("--no-baselines", action="store_true", help="skip the greedy and random baselines")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config).with_overrides(
            seed=args.seed, n_stages=args.n_stages, backend=args.backend, target_level=args.target_level,
            generations=args.generations, output_dir=args.output_dir, metric=args.metric, l_max=args.l_max,
        )
        COMMANDS[args.command](Context(cfg, args))
    except IncompleteTrajectory as exc:
        print(f"error: incomplete database: {exc}", file=sys.stderr)
        return EXIT_INCOMPLETE
    except (InvalidConfig, InvalidSchedule, MissingReference, ValueError) as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, StagePruneError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
