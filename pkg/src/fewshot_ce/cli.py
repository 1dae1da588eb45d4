"""Command-line front end: dataset generation, training and the evaluation experiments.

Relative dataset and checkpoint paths resolve against the output directory, so
one ``--out-dir`` holds everything a run produces.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import training
from .config import Config, ConfigError, config_from_dict, load_config
from .dataset import Dataset, dataset_manifest
from .models import MODEL_KINDS, CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger("fewshot_ce")

EXIT_OK, EXIT_USAGE, EXIT_ASSERT, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run context
# ---------------------------------------------------------------------------

@dataclass
class Context:
    cfg: Config
    out_dir: Path
    assert_trends: bool = False
    prepare: bool = False
    checks: list = field(default_factory=list)
    _dataset: Dataset | None = None

    @property
    def dataset_dir(self) -> Path:
        p = Path(self.cfg.dataset.path)
        return p if p.is_absolute() else self.out_dir / p

    @property
    def checkpoint_dir(self) -> Path:
        p = Path(self.cfg.experiment.checkpoint_dir or "checkpoints")
        return p if p.is_absolute() else self.out_dir / p

    @property
    def seeds(self) -> list[int]:
        return list(self.cfg.experiment.seeds)

    def dataset(self) -> Dataset:
        if self._dataset is None:
            if not (self.dataset_dir / "manifest.json").exists() and self.prepare:
                generate(self)
            self._dataset = Dataset.load(self.dataset_dir, self.cfg.dataset.heldout_pdps_per_scenario)
        return self._dataset

    def train_config(self, seed: int) -> Config:
        cfg = copy.deepcopy(self.cfg)
        cfg.train.seed = seed
        return cfg

    def training_hash(self, seed: int) -> str:
        d = self.train_config(seed).to_dict()
        d.pop("experiment")
        d["dataset"].pop("path")
        return Config.hash_dict(d)

    def check(self, c: ex.TrendCheck) -> None:
        self.checks.append(c)
        print(c.line())


def _checkpoint_path(ctx: Context, kind: str, seed: int) -> Path:
    return ctx.checkpoint_dir / f"{kind}_seed{seed}.json"


def train_model(ctx: Context, kind: str, seed: int):
    cfg = ctx.train_config(seed)
    ds = ctx.dataset()
    if kind == "switchnet":
        model = training.switchnet_offline_train(ds, cfg.train.switchnet_subnets, cfg)
    else:
        curve = ctx.out_dir / "curves" / f"{kind}_seed{seed}.csv"
        model, rows = training.train(kind, ds, cfg, curve_path=curve)
        print(f"trained {kind} seed {seed}: {len(rows)} steps, final loss {rows[-1]['loss_total']:.5g} "
              f"(curve {curve})")
    payload = {"model": cfg.to_dict()["model"], "training_hash": ctx.training_hash(seed)}
    save_checkpoint(_checkpoint_path(ctx, kind, seed), model, payload)
    return model


def get_model(ctx: Context, kind: str, seed: int):
    """Load a checkpoint trained under the current config, training it when ``--prepare`` is set."""
    path = _checkpoint_path(ctx, kind, seed)
    if path.exists():
        model = load_checkpoint(path)
        manifest = json.loads(path.read_text(encoding="utf-8"))
        if manifest["config"].get("training_hash") == ctx.training_hash(seed):
            return model
        if not ctx.prepare:
            raise CheckpointError(f"{path} was trained under a different config (rerun with --prepare)")
    elif not ctx.prepare:
        raise CheckpointError(f"missing checkpoint {path} (run `train --model {kind}` or pass --prepare)")
    return train_model(ctx, kind, seed)


def _estimator(ctx: Context, kind: str, seed: int) -> ex.Estimator:
    if kind == "ls_interp":
        return ex.Estimator(kind)
    return ex.Estimator(kind, get_model(ctx, kind, seed), ctx.cfg.experiment.eval_batch)


def _write(ctx: Context, name: str, rows, x: str = "snr_db", series: str = "model", title: str = "") -> Path:
    from .plotting import plot_csv
    path = ex.write_results(ctx.out_dir / f"{name}.csv", rows)
    svg = plot_csv(path, ctx.out_dir / f"{name}.svg", x=x, series=series, title=title)
    print(f"wrote {path} and {svg}")
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def generate(ctx: Context) -> dict:
    d = ctx.cfg.dataset
    manifest = dataset_manifest(d.scenarios, d.pdps_per_scenario, d.realizations_per_pdp, d.seed, ctx.dataset_dir)
    print(f"dataset {ctx.dataset_dir}: {len(manifest['scenarios'])} scenarios x {d.pdps_per_scenario} PDPs "
          f"x {d.realizations_per_pdp} realizations (seed {d.seed})")
    for entry in manifest["scenarios"]:
        print(f"  {entry['file']}  sha256 {entry['sha256'][:16]}")
    return manifest


def cmd_generate(ctx: Context, args) -> int:
    generate(ctx)
    return EXIT_OK


def cmd_train(ctx: Context, args) -> int:
    for seed in ctx.seeds:
        train_model(ctx, args.model, seed)
    return EXIT_OK


def eval_snr_rows(ctx: Context, models: list[str]) -> list[ex.ResultRow]:
    rows = []
    for seed in ctx.seeds:
        ests = [_estimator(ctx, k, seed) for k in models]
        rows += ex.run_eval_snr(ests, ctx.dataset(), ctx.cfg, seed)
    return rows


def cmd_eval_snr(ctx: Context, args) -> int:
    models = args.models.split(",")
    rows = eval_snr_rows(ctx, models)
    _write(ctx, "eval_snr", rows, title="MSE vs SNR on held-out PDPs")
    grid = ctx.cfg.experiment.snr_grid_db
    if {"fsl_no_cam", "backbone_only"} <= set(models):
        high = [s for s in grid if s >= 15] or grid
        ctx.check(ex.check_snr_trend(rows, "fsl_no_cam", "backbone_only", high))
    if {"fsl_full", "backbone_only"} <= set(models):
        ctx.check(ex.check_snr_trend(rows, "fsl_full", "backbone_only", grid))
    return EXIT_OK


def cmd_sweep_support(ctx: Context, args) -> int:
    rows = []
    for seed in ctx.seeds:
        fsl = _estimator(ctx, "fsl_full", seed)
        zero = _estimator(ctx, "backbone_only", seed)
        rows += ex.run_sweep_support(fsl, zero, ctx.dataset(), ctx.cfg, seed)
    _write(ctx, "sweep_support", rows, x="n_support", title=f"MSE vs support blocks at "
           f"{ctx.cfg.experiment.sweep_snr_db:g} dB")
    for n in ctx.cfg.experiment.n_support_grid:
        print(f"  n={n:>3d}  median MSE {ex.median_over_seeds(rows, 'fsl_full', 'sweep_support', n_support=n):.5g}")
    if {0, 1, 16, 32} <= set(ctx.cfg.experiment.n_support_grid):
        for c in ex.check_support_trend(rows):
            ctx.check(c)
    return EXIT_OK


def cmd_mismatch(ctx: Context, args) -> int:
    rows = []
    for seed in ctx.seeds:
        rows += ex.run_mismatch(_estimator(ctx, "fsl_full", seed), ctx.dataset(), ctx.cfg, seed,
                                snr_grid=ctx.cfg.experiment.snr_grid_db if args.all_snr else None)
    _write(ctx, "mismatch", rows, series="experiment", title="Match and mismatch")
    ctx.check(ex.check_mismatch_trend(rows, "fsl_full", ctx.cfg.experiment.mismatch_snr_db))
    return EXIT_OK


def cmd_separability(ctx: Context, args) -> int:
    accs = []
    for seed in ctx.seeds:
        rep = ex.run_separability(ctx.dataset(), ctx.cfg, seed)
        print(f"seed {seed}: " + rep.text())
        accs.append(rep.accuracy)
        path = ctx.out_dir / f"separability_seed{seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps({"accuracy": rep.accuracy, "confusion": rep.confusion,
                                    "scenarios": rep.scenarios}, indent=2) + "\n", encoding="utf-8")
    med = float(np.median(accs))
    ctx.check(ex.TrendCheck("scenario separability >= 0.90", bool(med >= 0.9), f"median accuracy {med:.4f}"))
    return EXIT_OK


def cmd_boundary(ctx: Context, args) -> int:
    ds = ctx.dataset()
    cfg = ctx.cfg
    rows = []
    for seed in ctx.seeds:
        generic = _estimator(ctx, "backbone_only", seed)
        fsl = _estimator(ctx, "fsl_full", seed) if args.with_fsl else None
        for s in range(ds.num_scenarios):
            pool = {i: (ds.heldout_pdp_indices(s) if i == s else np.array([], dtype=int))
                    for i in range(ds.num_scenarios)}
            tcfg = ctx.train_config(seed)
            if cfg.experiment.boundary_epochs:
                tcfg.train.epochs = cfg.experiment.boundary_epochs
            model, _ = training.train("backbone_only", ds, tcfg, pdp_pool=pool)
            ests = [ex.Estimator("boundary", model, cfg.experiment.eval_batch), generic] + ([fsl] if fsl else [])
            ids = [ds.scenarios[s].pdps[i].pdp_id for i in ds.heldout_pdp_indices(s)]
            if cfg.experiment.eval_pdps_per_scenario:
                ids = ids[:cfg.experiment.eval_pdps_per_scenario]
            rows += ex.run_eval_snr(ests, ds, cfg, seed, experiment="boundary", pdp_ids=ids)
    _write(ctx, "boundary", rows, title="Testing accuracy boundary")
    if args.with_fsl:
        for snr in cfg.experiment.snr_grid_db:
            gap = (ex.median_over_seeds(rows, "fsl_full", snr_db=float(snr))
                   - ex.median_over_seeds(rows, "boundary", snr_db=float(snr)))
            print(f"  gap(fsl_full, boundary) at {snr:g} dB: {gap:+.5g}")
    ctx.check(ex.check_snr_trend(rows, "boundary", "backbone_only", cfg.experiment.snr_grid_db))
    return EXIT_OK


def cmd_switchnet(ctx: Context, args) -> int:
    ds = ctx.dataset()
    snr = ctx.cfg.experiment.sweep_snr_db
    items = []
    M = ctx.cfg.train.switchnet_subnets
    for seed in ctx.seeds:
        net = get_model(ctx, "switchnet", seed)
        fsl = _estimator(ctx, "fsl_full", seed) if args.with_fsl else None
        for pid in ex.heldout_pdp_ids(ds, ctx.cfg.experiment.eval_pdps_per_scenario):
            items.append(ex.switchnet_compare(net, fsl, ds, pid, ctx.cfg, seed, snr))
    print(f"online trainable parameters (SwitchNet alpha): {items[0].trainable}")
    print(ex.comparison_table(items, M))
    rows = ex.comparison_rows(items, ds, snr, ctx.cfg.train.n_support)
    ex.write_results(ctx.out_dir / "switchnet.csv", rows)
    ctx.check(ex.TrendCheck(
        "switchnet adapted <= subnet0", ex.median_over_seeds(rows, "switchnet_adapted")
        <= ex.median_over_seeds(rows, "switchnet_subnet0"),
        f"{ex.median_over_seeds(rows, 'switchnet_adapted'):.5g} vs "
        f"{ex.median_over_seeds(rows, 'switchnet_subnet0'):.5g}"))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval-snr": cmd_eval_snr,
    "sweep-support": cmd_sweep_support,
    "mismatch": cmd_mismatch,
    "separability": cmd_separability,
    "boundary": cmd_boundary,
    "switchnet": cmd_switchnet,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="YAML config file")
    parser.add_argument("--seed", type=int, default=d, help="run only this seed (generate: dataset seed)")
    parser.add_argument("--out-dir", default=d, help="output directory (overrides experiment.out_dir)")
    parser.add_argument("--assert", dest="assert_trends", action="store_true",
                        default=d if suppress else False, help="exit 2 when a trend check fails")
    parser.add_argument("--prepare", action="store_true", default=d if suppress else False,
                        help="generate the dataset and train missing checkpoints on demand")
    parser.add_argument("-v", "--verbose", action="store_true", default=d if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fewshot-ce", description=__doc__.splitlines()[0])
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parents = _Parser(add_help=False)
    _global_flags(parents, suppress=True)
    cmds = {name: sub.add_parser(name, parents=[parents]) for name in COMMANDS}
    cmds["train"].add_argument("--model", required=True, choices=list(MODEL_KINDS) + ["switchnet"])
    cmds["eval-snr"].add_argument("--models", default="fsl_full,fsl_no_cam,backbone_only,ls_interp",
                                  help="comma-separated model kinds (ls_interp = pilot interpolation)")
    cmds["mismatch"].add_argument("--all-snr", action="store_true", help="evaluate the whole SNR grid")
    cmds["boundary"].add_argument("--with-fsl", action="store_true", help="also report gap(fsl_full, boundary)")
    cmds["switchnet"].add_argument("--no-fsl", dest="with_fsl", action="store_false",
                                   help="skip the fsl_full column")
    return p


def make_context(args) -> Context:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.out_dir:
        cfg.experiment.out_dir = args.out_dir
    if args.seed is not None:
        if args.command == "generate":
            cfg.dataset.seed = args.seed
        else:
            cfg.experiment.seeds = [args.seed]
    if args.command == "eval-snr" and args.models:
        unknown = set(args.models.split(",")) - set(MODEL_KINDS) - {"ls_interp"}
        if unknown:
            raise UsageError(f"unknown model kind(s): {', '.join(sorted(unknown))}")
    return Context(cfg.validate(), Path(cfg.experiment.out_dir), args.assert_trends, args.prepare)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        ctx = make_context(args)
        ctx.out_dir.mkdir(parents=True, exist_ok=True)
        code = COMMANDS[args.command](ctx, args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if ctx.assert_trends and any(not c.passed for c in ctx.checks):
        return EXIT_ASSERT
    return code


if __name__ == "__main__":
    sys.exit(main())
