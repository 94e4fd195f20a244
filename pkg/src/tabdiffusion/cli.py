"""Command-line entry point.

    tabdiff train DATA.csv --out model.ckpt
    tabdiff sample model.ckpt --n 1000 --out synth.csv
    tabdiff reconstruct model.ckpt DATA.csv --sigma-zero --out recon.csv
    tabdiff classify-train LABELED.csv --model model.ckpt --out clf.ckpt
    tabdiff evaluate real.csv synth.csv --kind binary --out report.csv
    tabdiff augment train.csv synth.csv test.csv --out curve.csv

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import checkpoint as ck
from .anderson import accelerated_sample
from .config import RunConfig, describe_defaults, load_config, validate
from .data import load_csv, write_csv
from .denoiser import build_model
from .errors import ConfigError, ContractError, DataError, NumericalError
from .guidance import conditional_sample, train_classifier
from .metrics import (augmentation_curve, bernoulli_binarize, binarize, eval_binary, kde_curves,
                      pearson)
from .sampler import SampleConfig, reconstruct, sample
from .schedule import linear_schedule
from .trainer import TrainConfig, train

log = logging.getLogger("tabdiffusion")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; we reserve 2 for data errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# flag name -> RunConfig field
_OVERRIDES = {"seed": "seed", "mode": "mode", "k": "k", "T": "T_use", "n": "n",
              "kind": "kind", "steps": "steps", "arch": "arch", "scale": "scale",
              "step": "aug_step"}


def _common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--out", required=True, help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _sampling(p):
    p.add_argument("--mode", choices=["ddpm", "ddim"])
    p.add_argument("--k", type=int, help="Anderson table size, 0 disables (ddim only)")
    p.add_argument("--T", type=int, help="number of reverse steps to use (default: all)")
    p.add_argument("--sigma-zero", action="store_true", help="deterministic DDPM chain")
    p.add_argument("--trajectory", metavar="PATH", help="write per-step residual norms here")
    p.add_argument("--literal", action="store_true",
                   help="alternative DDIM update using alpha-bar in place of its square root")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tabdiff", description=__doc__.split("\n\n")[0],
                     epilog="Config defaults: " + describe_defaults(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="fit a denoiser to a CSV dataset")
    p.add_argument("data")
    p.add_argument("--kind", choices=["binary", "continuous"])
    p.add_argument("--labeled", action="store_true", help="last column holds labels (ignored)")
    p.add_argument("--header", action="store_true")
    p.add_argument("--arch", choices=["mlp", "unet1d"])
    p.add_argument("--steps", type=int)
    p.add_argument("--history", metavar="PATH", help="write the loss curve here")
    _common(p)

    p = sub.add_parser("sample", help="generate records from a trained denoiser")
    p.add_argument("model")
    p.add_argument("--n", type=int)
    p.add_argument("--guided", type=int, metavar="LABEL", help="condition on this class label")
    p.add_argument("--classifier", help="classifier checkpoint for --guided")
    p.add_argument("--scale", type=float, help="guidance scale (default 1)")
    p.add_argument("--raw", action="store_true", help="skip thresholding of binary outputs")
    p.add_argument("--bernoulli", action="store_true",
                   help="draw binary outputs as Bernoulli(clip(x)) instead of thresholding")
    p.add_argument("--timing", metavar="PATH",
                   help="write cumulative wall time per iteration (not reproducible)")
    _sampling(p)
    _common(p)

    p = sub.add_parser("reconstruct", help="noise records to x_T and denoise them back")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("--labeled", action="store_true")
    p.add_argument("--header", action="store_true")
    _sampling(p)
    _common(p)

    p = sub.add_parser("classify-train", help="fit a classifier on noisy labeled records")
    p.add_argument("data")
    p.add_argument("--model", help="denoiser checkpoint whose schedule and scaling to share")
    p.add_argument("--header", action="store_true")
    p.add_argument("--steps", type=int)
    _common(p)

    p = sub.add_parser("evaluate", help="compare real and synthetic records")
    p.add_argument("real")
    p.add_argument("synth")
    p.add_argument("--kind", choices=["binary", "continuous"])
    p.add_argument("--labeled", action="store_true")
    p.add_argument("--header", action="store_true")
    _common(p)

    p = sub.add_parser("augment", help="test AUC as synthetic records are added")
    p.add_argument("train")
    p.add_argument("synth")
    p.add_argument("test")
    p.add_argument("--step", type=int)
    p.add_argument("--header", action="store_true")
    _common(p)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    changes = {}
    for flag, key in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            changes[key] = value
    for flag in ("sigma_zero", "literal"):
        if getattr(args, flag, False):
            changes[flag] = True
    return validate(cfg.replace(**changes))


def _sample_cfg(cfg: RunConfig, record=False) -> SampleConfig:
    return SampleConfig(mode=cfg.mode, sigma_mode="zero" if cfg.sigma_zero else "posterior",
                        T_use=cfg.T_use or None, seed=cfg.seed, record_trajectory=record,
                        literal=cfg.literal)


def _write_matrix(path, x, meta):
    """Samples carry a header row only if the training CSV had one."""
    write_csv(path, x.tolist(), header=meta.get("columns") if meta.get("header") else None)


def _write_residuals(path, residuals):
    residuals = np.asarray(residuals)
    header = ["iteration"] + [f"chain{j}" for j in range(residuals.shape[1])]
    write_csv(path, [[i, *row] for i, row in enumerate(residuals.tolist())], header=header)


def cmd_train(args, cfg: RunConfig):
    ds = load_csv(args.data, cfg.kind, labeled=args.labeled, header=args.header)
    sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    model = build_model(cfg.arch, ds.dim, seed=cfg.seed, **cfg.model_hparams())
    tcfg = TrainConfig(lr=cfg.lr, batch_size=cfg.batch, max_steps=cfg.steps, seed=cfg.seed,
                       weighted=cfg.weighted)
    result = train(model, sched, ds.features, tcfg)
    arrays = {}
    if ds.mean is not None:
        arrays = {"data:mean": ds.mean, "data:std": ds.std}
    final = float(result.losses[-1]) if len(result.history) else None
    extra = {"kind": ds.kind, "columns": ds.columns, "header": bool(args.header), "seed": cfg.seed,
             "steps": len(result.history), "final_loss": final}
    ck.save_checkpoint(args.out, ck.model_checkpoint(model, sched, extra, arrays))
    if args.history:
        write_csv(args.history, [[s, v] for s, v in result.history], header=["step", "loss"])
    log.info("trained %d steps, final loss %s", len(result.history), final)


def _unscale(ckpt, x):
    if "data:mean" in ckpt.tensors:
        return x * ckpt.tensors["data:std"] + ckpt.tensors["data:mean"]
    return x


def _scale(ckpt, x):
    if "data:mean" in ckpt.tensors:
        return (x - ckpt.tensors["data:mean"]) / ckpt.tensors["data:std"]
    return x


def cmd_sample(args, cfg: RunConfig):
    ckpt = ck.load_checkpoint(args.model)
    model, sched = ck.restore_model(ckpt)
    scfg = _sample_cfg(cfg, record=bool(args.trajectory))
    residuals = elapsed = None
    if args.guided is not None:
        if not args.classifier:
            raise ConfigError("--guided needs --classifier")
        if cfg.mode != "ddim":
            raise ConfigError("guided sampling runs the DDIM sampler; use --mode ddim")
        clf = ck.restore_classifier(ck.load_checkpoint(args.classifier))
        x, report = conditional_sample(model, clf, sched, scfg, args.guided, cfg.n, cfg.k, cfg.scale)
        residuals, elapsed = report.residuals, report.elapsed_ns
    elif cfg.mode == "ddim" and cfg.k > 0:
        x, report, _ = accelerated_sample(model, sched, scfg, cfg.k, cfg.n)
        residuals, elapsed = report.residuals, report.elapsed_ns
        log.info("restarts per chain: %s, fallbacks: %d", report.restarts, report.fallbacks)
    else:
        res = sample(model, sched, scfg, cfg.n)
        x = res.x
        if res.trajectory is not None:
            residuals = res.trajectory.residual_matrix()
    x = _unscale(ckpt, x)
    if ckpt.meta.get("kind") == "binary" and not args.raw:
        if args.bernoulli:
            # separate stream so the draws never alias the sampler's noise
            x = bernoulli_binarize(x, np.random.default_rng([cfg.seed, 1]))
        else:
            x = binarize(x, cfg.threshold)
    _write_matrix(args.out, x, ckpt.meta)
    if args.trajectory and residuals is not None:
        _write_residuals(args.trajectory, residuals)
    if args.timing:
        if elapsed is None:
            raise ConfigError("--timing needs the accelerated or guided sampler")
        write_csv(args.timing, [[i, int(e)] for i, e in enumerate(elapsed)],
                  header=["iteration", "elapsed_ns"])


def cmd_reconstruct(args, cfg: RunConfig):
    ckpt = ck.load_checkpoint(args.model)
    model, sched = ck.restore_model(ckpt)
    kind = ckpt.meta.get("kind", "continuous")
    ds = load_csv(args.data, kind, labeled=args.labeled, header=args.header, standardize=False)
    x0 = _scale(ckpt, ds.features)
    sigma = "zero" if cfg.sigma_zero else "posterior"
    xr = reconstruct(model, sched, x0, seed=cfg.seed, sigma_mode=sigma)
    xr = _unscale(ckpt, xr)
    _write_matrix(args.out, xr, ckpt.meta)
    for j in range(ds.dim):
        r = pearson(ds.features[:, j], xr[:, j])
        print(f"feature {j}: correlation {'NA' if r is None else f'{r:.4f}'}")


def cmd_classify_train(args, cfg: RunConfig):
    ds = load_csv(args.data, "continuous", labeled=True, header=args.header, standardize=False)
    arrays, x = {}, ds.features
    if args.model:
        ckpt = ck.load_checkpoint(args.model)
        _, sched = ck.restore_model(ckpt)
        x = _scale(ckpt, x)
    else:
        sched = linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    tcfg = TrainConfig(lr=cfg.clf_lr, batch_size=cfg.batch, max_steps=cfg.clf_steps, seed=cfg.seed)
    clf = train_classifier(x, ds.labels, sched, tcfg, kind=cfg.clf_kind)
    acc = float(np.mean(clf.predict(x, 1) == ds.labels))
    ck.save_checkpoint(args.out, ck.classifier_checkpoint(clf, sched, {"train_accuracy_t1": acc}))
    print(f"training accuracy at t=1: {acc:.4f}")


def cmd_evaluate(args, cfg: RunConfig):
    real = load_csv(args.real, cfg.kind, labeled=args.labeled, header=args.header, standardize=False)
    synth = load_csv(args.synth, cfg.kind, labeled=args.labeled, header=args.header,
                     standardize=False)
    if real.dim != synth.dim:
        raise DataError(f"feature counts differ: {real.dim} vs {synth.dim}")
    if cfg.kind == "binary":
        report = eval_binary(real.features, synth.features)
        write_csv(args.out, report.rows(), header=["metric", "value"])
        print(report.summary())
        return
    rows = []
    for j, (grid, dr, dsyn) in enumerate(kde_curves(real.features, synth.features)):
        rows.extend([j, g, a, b] for g, a, b in zip(grid, dr, dsyn))
    write_csv(args.out, rows, header=["feature", "x", "density_real", "density_synth"])


def cmd_augment(args, cfg: RunConfig):
    sets = [load_csv(p, "continuous", labeled=True, header=args.header, standardize=False)
            for p in (args.train, args.synth, args.test)]
    pairs = [(d.features, d.labels) for d in sets]
    curve = augmentation_curve(*pairs, step=cfg.aug_step, seed=cfg.seed)
    write_csv(args.out, curve, header=["n_synthetic", "auc"])


COMMANDS = {"train": cmd_train, "sample": cmd_sample, "reconstruct": cmd_reconstruct,
            "classify-train": cmd_classify_train, "evaluate": cmd_evaluate, "augment": cmd_augment}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        # overflow surfaces as a NumericalError naming the step, not as numpy warnings
        with np.errstate(over="ignore", invalid="ignore"):
            COMMANDS[args.command](args, cfg)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc} (step={exc.step}, seed={exc.seed})", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
