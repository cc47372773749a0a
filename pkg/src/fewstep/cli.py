"""Command-line front end: ``fewstep <subcommand> [--config PATH] [--seed N] ...``.

Every invocation writes into a fresh timestamped directory under ``--out`` and
echoes the fully resolved config there, so a run can be replayed exactly.
Exit status: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path

import numpy as np

from fewstep.core import (
    InvalidParameterError,
    NoiseRange,
    RunConfig,
    Schedule,
    init_params_from_reference,
    log_schedule,
    rho_schedule,
    schedule_from_params,
    stream,
    uniform_schedule,
)
from fewstep.denoiser import GaussianMixture, GMMDenoiser, MlpDenoiser, MlpSpec, gmm_sample, two_gaussians
from fewstep.evaluation import CSV_HEADER, compare_schedules, initial_noise
from fewstep.finetune import FinetuneState, Problem, export_weight_scheme, pretrain, run_two_stage, stage2_step
from fewstep.optim import Adam
from fewstep.sampler import sample
from fewstep.sched_opt import LossReport, NonFiniteError, run_stage1

FORMAT_VERSION = 1
SUBCOMMANDS = ("gen-data", "optimize", "finetune", "run", "sample", "eval", "export-weights")


class ConfigError(InvalidParameterError):
    pass


def _check_keys(doc: dict, allowed, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


@dataclass
class DenoiserConfig:
    kind: str = "analytic-gmm"
    mlp: MlpSpec = field(default_factory=MlpSpec)
    pretrain_iters: int = 3000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 256


@dataclass
class ScheduleConfig:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    n_steps: int = 5
    init: str = "rho"
    rho: float = 7.0


@dataclass
class ExperimentConfig:
    problem: GaussianMixture = field(default_factory=two_gaussians)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    run: RunConfig = field(default_factory=RunConfig)
    eval_count: int = 512
    output_dir: str = "runs"
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        _check_keys(doc, {f.name for f in fields(cls)}, "config")
        version = doc.get("format_version", FORMAT_VERSION)
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported format_version {version}, expected {FORMAT_VERSION}")
        cfg = cls()
        if "problem" in doc:
            cfg.problem = GaussianMixture.from_dict(doc["problem"])
        if "denoiser" in doc:
            d = dict(doc["denoiser"])
            _check_keys(d, {f.name for f in fields(DenoiserConfig)}, "denoiser")
            mlp = MlpSpec.from_dict({"dim": cfg.problem.dim, **d.pop("mlp", {})})
            cfg.denoiser = DenoiserConfig(mlp=mlp, **d)
        else:
            cfg.denoiser.mlp.dim = cfg.problem.dim
        if cfg.denoiser.kind not in ("analytic-gmm", "trainable-mlp"):
            raise ConfigError(f"unknown denoiser kind {cfg.denoiser.kind!r}")
        if cfg.denoiser.mlp.dim != cfg.problem.dim:
            raise ConfigError("MLP dimension must match the data dimension")
        if "schedule" in doc:
            _check_keys(doc["schedule"], {f.name for f in fields(ScheduleConfig)}, "schedule")
            cfg.schedule = ScheduleConfig(**doc["schedule"])
        if cfg.schedule.init not in ("rho", "uniform", "log"):
            raise ConfigError(f"unknown schedule init {cfg.schedule.init!r}")
        if "run" in doc:
            _check_keys(doc["run"], {f.name for f in fields(RunConfig)}, "run")
            cfg.run = RunConfig(**doc["run"])
        for key in ("eval_count", "output_dir"):
            if key in doc:
                setattr(cfg, key, doc[key])
        cfg.range  # validates the noise range
        return cfg

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "problem": self.problem.to_dict(),
            "denoiser": asdict(self.denoiser),
            "schedule": asdict(self.schedule),
            "run": self.run.to_dict(),
            "eval_count": self.eval_count,
            "output_dir": self.output_dir,
        }

    @property
    def range(self) -> NoiseRange:
        return NoiseRange(self.schedule.sigma_min, self.schedule.sigma_max)

    def initial_schedule(self) -> Schedule:
        sc = self.schedule
        if sc.init == "uniform":
            return uniform_schedule(self.range, sc.n_steps)
        if sc.init == "log":
            return log_schedule(self.range, sc.n_steps)
        return rho_schedule(self.range, sc.n_steps, sc.rho)


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _history_csv(path: Path, history: list[LossReport], n_steps: int):
    header = ["stage", "outer", "iter", "level", "disc_loss", "diff_loss", "stderr"]
    header += [f"sigma_{i}" for i in range(n_steps)]
    _write_csv(path, header, [r.row() for r in history])


def _build_denoiser(cfg: ExperimentConfig, params_path=None):
    if params_path:
        return MlpDenoiser.load(params_path)
    if cfg.denoiser.kind == "analytic-gmm":
        return GMMDenoiser(cfg.problem)
    rng = stream(cfg.run.seed, "init")
    h = MlpDenoiser(cfg.denoiser.mlp, rng=rng)
    d = cfg.denoiser
    pretrain(h, cfg.problem, rng, d.pretrain_iters, d.pretrain_batch, d.pretrain_lr)
    return h


def _load_schedules(spec: str) -> dict:
    out = {}
    for item in spec.split(","):
        item = item.strip()
        if item:
            name = Path(item).stem
            out[item if name in out else name] = Schedule.load(item)
    if not out:
        raise ConfigError("no schedules given")
    return out


def cmd_gen_data(cfg, args, out: Path):
    x, labels = gmm_sample(cfg.problem, args.count, stream(cfg.run.seed, "data"), return_labels=True)
    header = ["index", "component"] + [f"x{j}" for j in range(cfg.problem.dim)]
    rows = [[i, int(k), *(repr(float(v)) for v in row)] for i, (k, row) in enumerate(zip(labels, x))]
    _write_csv(out / "data.csv", header, rows)


def cmd_optimize(cfg, args, out: Path):
    h = _build_denoiser(cfg, args.params)
    p = init_params_from_reference(cfg.initial_schedule())
    data_rng = stream(cfg.run.seed, "data")
    batches = (gmm_sample(cfg.problem, cfg.run.batch_size, data_rng) for _ in iter(int, 1))
    p, history, _ = run_stage1(h, p, cfg.run, batches, stream(cfg.run.seed, "stage1"))
    _history_csv(out / "loss_history.csv", history, p.n_steps)
    schedule_from_params(p).save(out / "schedule.json")


def cmd_finetune(cfg, args, out: Path):
    if cfg.denoiser.kind != "trainable-mlp" and not args.params:
        raise ConfigError("finetune needs a trainable-mlp denoiser")
    h = _build_denoiser(cfg, args.params)
    s = Schedule.load(args.schedule) if args.schedule else cfg.initial_schedule()
    state = FinetuneState(h, s, Adam(cfg.run.theta_lr, cfg.run.beta1, cfg.run.beta2, cfg.run.eps))
    data_rng, rng = stream(cfg.run.seed, "data"), stream(cfg.run.seed, "stage2")
    history = []
    for it in range(cfg.run.stage2_iters):
        stage2_step(state, gmm_sample(cfg.problem, cfg.run.batch_size, data_rng), cfg.run, rng)
        history.append(LossReport(2, 0, it, -1, np.nan, state.history[-1], np.nan, s.sigmas))
    _history_csv(out / "loss_history.csv", history, s.n_steps)
    h.save(out / "denoiser.bin")


def cmd_run(cfg, args, out: Path):
    h = _build_denoiser(cfg, args.params)
    problem = Problem(cfg.problem, cfg.schedule.n_steps, cfg.range, cfg.schedule.rho)
    res = run_two_stage(cfg.run, problem, h)
    res.schedule.save(out / "schedule.json")
    _history_csv(out / "loss_history.csv", res.history, problem.n_steps)
    _write_csv(
        out / "weights.csv",
        ["t", "sigma", "lambda", "active_weight"],
        [[t, repr(s), repr(l), repr(a)] for t, s, l, a in export_weight_scheme(res.schedule)],
    )
    if h.kind == "trainable-mlp":
        h.save(out / "denoiser.bin")


def cmd_sample(cfg, args, out: Path):
    h = _build_denoiser(cfg, args.params)
    s = Schedule.load(args.schedule) if args.schedule else cfg.initial_schedule()
    x0 = initial_noise(s, args.count, h.dim, cfg.run.seed)
    _, traj = sample(h, s, x0)
    d = h.dim
    header = ["seed", "step", "sigma"] + [f"x{j}" for j in range(d)] + [f"d{j}" for j in range(d)]
    rows = []
    for b in range(x0.shape[0]):
        for i, sig in enumerate(s.sigmas):
            rows.append(
                [b, i, repr(float(sig))]
                + [repr(float(v)) for v in traj.iterates[i, b]]
                + [repr(float(v)) for v in traj.denoised[i, b]]
            )
    _write_csv(out / "trajectories.csv", header, rows)


def cmd_eval(cfg, args, out: Path):
    h = _build_denoiser(cfg, args.params)
    scheds = _load_schedules(args.schedules) if args.schedules else {"initial": cfg.initial_schedule()}
    reports = compare_schedules(scheds, h, cfg.problem, args.count or cfg.eval_count, cfg.run.seed, h.kind)
    _write_csv(out / "eval.csv", CSV_HEADER, [row for r in reports for row in r.rows()])


def cmd_export_weights(cfg, args, out: Path):
    s = Schedule.load(args.schedule) if args.schedule else cfg.initial_schedule()
    _write_csv(
        out / "weights.csv",
        ["t", "sigma", "lambda", "active_weight"],
        [[t, repr(sg), repr(l), repr(a)] for t, sg, l, a in export_weight_scheme(s)],
    )


COMMANDS = {
    "gen-data": cmd_gen_data,
    "optimize": cmd_optimize,
    "finetune": cmd_finetune,
    "run": cmd_run,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "export-weights": cmd_export_weights,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fewstep", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--n-steps", type=int)
        p.add_argument("--gamma", type=float)
        p.add_argument("--estimator", choices=["efficient", "full-unroll", "finite-diff"])
        p.add_argument("--weights", choices=["learned", "original"])
        p.add_argument("--format-version", type=int)
        p.add_argument("--params", type=Path, help="trained MLP parameter blob")
        if name in ("finetune", "sample", "export-weights"):
            p.add_argument("--schedule", type=Path)
        if name == "eval":
            p.add_argument("--schedules", help="comma-separated schedule JSON files")
        if name in ("gen-data", "sample", "eval"):
            p.add_argument("--count", type=int, default=None if name == "eval" else 256)
    return parser


def resolve_config(args) -> ExperimentConfig:
    doc = json.loads(args.config.read_text()) if args.config else {}
    if args.format_version is not None and args.format_version != FORMAT_VERSION:
        raise ConfigError(f"unsupported format version {args.format_version}")
    cfg = ExperimentConfig.from_dict(doc)
    run = cfg.run.to_dict()
    for flag, key in (("seed", "seed"), ("gamma", "gamma"), ("estimator", "estimator"), ("weights", "weights")):
        if getattr(args, flag) is not None:
            run[key] = getattr(args, flag)
    cfg.run = RunConfig(**run)
    if args.n_steps is not None:
        cfg.schedule.n_steps = args.n_steps
    if cfg.schedule.n_steps < 2:
        raise ConfigError("n_steps must be at least 2")
    if args.out is not None:
        cfg.output_dir = str(args.out)
    return cfg


def make_run_dir(base: Path, command: str) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    out = base / f"{command}-{stamp}"
    out.mkdir(parents=True, exist_ok=False)
    return out


def dispatch(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if getattr(args, "count", None) is not None and args.count < 1:
            raise ConfigError("--count must be positive")
    except (InvalidParameterError, TypeError, KeyError, json.JSONDecodeError, OSError) as exc:
        print(f"fewstep: invalid configuration: {exc}", file=sys.stderr)
        return 1
    out = make_run_dir(Path(cfg.output_dir), args.command)
    echo = cfg.to_dict()
    echo["command"] = args.command
    echo["argv"] = list(sys.argv[1:] if argv is None else argv)
    (out / "config.json").write_text(json.dumps(echo, indent=2) + "\n")
    try:
        COMMANDS[args.command](cfg, args, out)
    except InvalidParameterError as exc:
        print(f"fewstep: invalid input: {exc}", file=sys.stderr)
        return 1
    except NonFiniteError as exc:
        (out / "failure_dump.json").write_text(json.dumps(exc.dump, indent=2, default=str) + "\n")
        print(f"fewstep: {exc} (state dumped to {out / 'failure_dump.json'})", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"fewstep: {args.command} failed: {exc!r}", file=sys.stderr)
        return 2
    print(out)
    return 0


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
