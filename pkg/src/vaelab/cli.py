"""``vae-lab`` command line: train, stats, generate, analyze-kl, experiment-noise, encode.

Every command writes a JSON manifest next to its outputs. Exit codes: 0 ok,
2 usage error, 3 data/format error, 4 numeric divergence.
"""

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .datasets import TileSpec, gen_tiles, load_mnist_dir
from .diagnostics import (
    NoiseSchedule, classify_variables, kl_rho_curve, kl_rho_minimum, latent_stats,
    noise_injection_experiment, relative_mse,
)
from .errors import (
    ConfigError, DivergenceError, DomainError, FormatError, GenerationError,
    PreconditionError, TrainingError,
)
from .images import make_grid, render, write_pgm
from .model import TrainConfig, TrainLog, VaeModel, encode, sample_prior, train
from .model_io import load_model, save_model
from .nn import Rng

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 2, 3, 4
DEFAULT_MNIST_DIR = "data/mnist"


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: object = None
    dataset: dict = None
    artifacts: list = field(default_factory=list)
    duration_s: float = 0.0
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


def read_manifest(path) -> RunManifest:
    return RunManifest.from_json(Path(path).read_text())


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _csv_floats(text, what):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"malformed {what} list: {text!r}") from None


def parse_arch(text):
    try:
        sizes = [int(t) for t in text.split(",")]
    except ValueError:
        raise UsageError(f"malformed --arch {text!r}: expected comma-separated integers") from None
    if len(sizes) < 2 or any(s < 1 for s in sizes):
        raise UsageError(f"malformed --arch {text!r}: need input and latent sizes >= 1")
    return sizes


def load_dataset(args):
    if args.dataset == "mnist":
        ds = load_mnist_dir(args.data_dir, args.split)
    elif args.dataset == "tiles":
        ds = gen_tiles(args.n_images, TileSpec(), Rng(args.data_seed))
    else:
        raise UsageError(f"unknown dataset {args.dataset!r}")
    if getattr(args, "limit", None) is not None:
        ds = ds.subset(min(args.limit, len(ds)))
    return ds


def _emit_manifest(path, args, started, dataset=None, artifacts=(), seed=None, extra=None):
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    if extra:
        cfg.update(extra)
    m = RunManifest(args.command, cfg, seed,
                    dataset.fingerprint() if dataset is not None else None,
                    [str(a) for a in artifacts], round(time.time() - started, 3))
    Path(path).write_text(m.to_json() + "\n")
    return m


def _manifest_for(path):
    return Path(str(path) + ".manifest.json")


def cmd_train(args, started):
    arch = parse_arch(args.arch)
    if args.quadratic_penalty and not args.no_sampling:
        raise UsageError("--quadratic-penalty requires --no-sampling")
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lam=args.lam,
        sampling_enabled=not args.no_sampling,
        penalty_mode="quadratic_mu" if args.quadratic_penalty else "kl",
        seed=args.seed, learning_rate=args.lr, recon_loss=args.recon,
    )
    try:
        cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    ds = load_dataset(args)
    if arch[0] != ds.images.shape[1]:
        raise UsageError(f"--arch input size {arch[0]} does not match data dimension "
                         f"{ds.images.shape[1]}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = VaeModel.build(arch, Rng(args.seed).child(0))
    log = TrainLog(model.latent_dim)
    if args.verbose:
        print(f"training {arch} on {ds.name} ({len(ds)} images), {cfg}", file=sys.stderr)
    train(model, ds, cfg, log=log)
    save_model(model, out / "model.vaes")
    write_csv(out / "train_log.csv", log.header(), log.rows())
    _emit_manifest(out / "manifest.json", args, started, ds,
                   [out / "model.vaes", out / "train_log.csv"], args.seed)


def _report(model, ds, args):
    return classify_variables(latent_stats(model, ds), args.var_threshold, args.sigma_threshold)


def cmd_stats(args, started):
    model = load_model(args.model)
    ds = load_dataset(args)
    rep = _report(model, ds, args)
    rows = [[i, rep.global_mu_variance[i], rep.mean_local_variance[i],
             rep.stationarity_sum[i], rep.status[i]] for i in range(len(rep.status))]
    write_csv(args.out, ["index", "global_mu_variance", "mean_local_variance",
                         "stationarity_sum", "status"], rows)
    _emit_manifest(_manifest_for(args.out), args, started, ds, [args.out],
                   extra={"inactive": rep.inactive})


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"malformed index list {text!r}") from None


def cmd_generate(args, started):
    model = load_model(args.model)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    mask = set(_int_list(args.zero_vars)) if args.zero_vars else set()
    ds = None
    if args.zero_inactive:
        if not args.dataset:
            raise UsageError("--zero-inactive needs --dataset to find the inactive variables")
        ds = load_dataset(args)
        mask |= set(_report(model, ds, args).inactive)
    bad = [i for i in mask if not 0 <= i < model.latent_dim]
    if bad:
        raise UsageError(f"latent indices {sorted(bad)} out of range (latent_dim {model.latent_dim})")
    out = Path(args.out)
    imgs = sample_prior(model, args.n, Rng(args.seed))
    write_pgm(out, render(make_grid(imgs)))
    artifacts, extra = [out], {"zeroed": sorted(mask)}
    if args.zero_inactive or args.zero_vars:
        twin = sample_prior(model, args.n, Rng(args.seed), zero_mask=mask)
        twin_path = out.with_name(out.stem + "_zeroed" + out.suffix)
        write_pgm(twin_path, render(make_grid(twin)))
        artifacts.append(twin_path)
        extra["relative_mse"] = relative_mse(imgs, twin)
    _emit_manifest(_manifest_for(out), args, started, ds, artifacts, args.seed, extra)


def cmd_analyze_kl(args, started):
    rhos = _csv_floats(args.rho2, "--rho2")
    if not rhos or any(r <= 0 for r in rhos):
        raise UsageError("--rho2 values must be positive")
    if not 0 < args.sigma2_min < args.sigma2_max or args.points < 2:
        raise UsageError("need 0 < --sigma2-min < --sigma2-max and --points >= 2")
    grid = np.linspace(args.sigma2_min, args.sigma2_max, args.points)
    curves = [kl_rho_curve(r, grid) for r in rhos]
    header = ["sigma2"] + [f"kl_rho2={fmt(r)}" for r in rhos]
    rows = [[grid[i]] + [c.kl_values[i] for c in curves] for i in range(len(grid))]
    rows.append(["min_sigma2"] + [kl_rho_minimum(r) for r in rhos])
    write_csv(args.out, header, rows)
    _emit_manifest(_manifest_for(args.out), args, started, None, [args.out])


def cmd_experiment_noise(args, started):
    model = load_model(args.model)
    ds = load_dataset(args)
    cfg = TrainConfig(epochs=1, batch_size=args.batch, lam=args.lam, seed=args.seed,
                      learning_rate=args.lr)
    sched = NoiseSchedule(args.step, args.max_amplitude, args.hold_epochs, args.recovery_epochs,
                          stop_hold_on_collapse=not args.full_hold)
    show = None
    if args.verbose:
        def show(r):
            print(f"{r.phase:8s} step {r.step:3d} amp {r.amplitude:.2f} kl {r.kl_contribution:.4f} "
                  f"gain {r.reconstruction_gain:.4f} var {r.global_mu_variance:.4f} "
                  f"sigma2 {r.mean_local_variance:.4f}", file=sys.stderr)
    log = noise_injection_experiment(model, ds, args.var, sched, cfg, log_fn=show)
    write_csv(args.out, log.COLUMNS, log.rows())
    artifacts = [args.out]
    if args.save_model:
        save_model(model, args.save_model)
        artifacts.append(args.save_model)
    trig = log.trigger()
    _emit_manifest(_manifest_for(args.out), args, started, ds, artifacts, args.seed,
                   {"frozen": log.frozen, "trigger_step": None if trig is None else trig.step})


def cmd_encode(args, started):
    model = load_model(args.model)
    ds = load_dataset(args)
    enc = encode(model, ds.images)
    k = model.latent_dim
    header = ["label"] + [f"mu_{i}" for i in range(k)] + [f"sigma2_{i}" for i in range(k)]
    labels = ds.labels if ds.labels is not None else [-1] * len(ds)
    rows = ([labels[i], *enc.mu[i], *enc.var[i]] for i in range(len(ds)))
    write_csv(args.out, header, rows)
    _emit_manifest(_manifest_for(args.out), args, started, ds, [args.out])


def _add_data_flags(p, required=True):
    p.add_argument("--dataset", choices=("mnist", "tiles"), required=required)
    p.add_argument("--data-dir", default=os.environ.get("VAE_LAB_MNIST_DIR", DEFAULT_MNIST_DIR),
                   help="directory holding the MNIST IDX files (.gz accepted)")
    p.add_argument("--split", default="train", choices=("train", "test"))
    p.add_argument("--n-images", type=int, default=60000, help="tile images to generate")
    p.add_argument("--data-seed", type=int, default=0, help="seed of the tile generator")


def _add_threshold_flags(p):
    p.add_argument("--var-threshold", type=float, default=0.01)
    p.add_argument("--sigma-threshold", type=float, default=0.8)


def build_parser():
    ap = argparse.ArgumentParser(prog="vae-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a dense VAE")
    _add_data_flags(p)
    p.add_argument("--limit", type=int, help="use only the first N images")
    p.add_argument("--arch", default="784,256,32,24,16")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--no-sampling", action="store_true")
    p.add_argument("--quadratic-penalty", action="store_true")
    p.add_argument("--recon", choices=("sse", "bce"), default="sse",
                   help="reconstruction term: squared error (default) or Bernoulli cross-entropy")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stats", help="per-variable latent statistics as CSV")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    p.add_argument("--limit", type=int)
    _add_threshold_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("generate", help="decode prior samples into a PGM grid")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--zero-inactive", action="store_true")
    p.add_argument("--zero-vars", help="comma-separated latent indices to zero in the twin grid")
    _add_data_flags(p, required=False)
    p.add_argument("--limit", type=int)
    _add_threshold_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("analyze-kl", help="KL as a function of variance at fixed rho^2")
    p.add_argument("--rho2", required=True, help="comma-separated rho^2 values")
    p.add_argument("--sigma2-min", type=float, default=1e-3)
    p.add_argument("--sigma2-max", type=float, default=2.0)
    p.add_argument("--points", type=int, default=2000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_kl)

    p = sub.add_parser("experiment-noise", help="noise-injection collapse experiment")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    p.add_argument("--limit", type=int)
    p.add_argument("--var", type=int, required=True)
    p.add_argument("--step", type=float, default=0.25)
    p.add_argument("--max-amplitude", type=float, default=5.0)
    p.add_argument("--hold-epochs", type=int, default=10,
                   help="most epochs at the trigger amplitude before noise is removed")
    p.add_argument("--full-hold", action="store_true",
                   help="run all hold epochs even once the variable has collapsed")
    p.add_argument("--recovery-epochs", type=int, default=20)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-model", help="write the model as it stands after the experiment")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_experiment_noise)

    p = sub.add_parser("encode", help="per-example mean and variance vectors as CSV")
    p.add_argument("--model", required=True)
    _add_data_flags(p)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        args.func(args, started)
    except (UsageError, ConfigError, DomainError) as exc:
        print(f"vae-lab {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError, PreconditionError, GenerationError, IndexError) as exc:
        print(f"vae-lab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceError, TrainingError) as exc:
        print(f"vae-lab {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return 0


if __name__ == "__main__":
    sys.exit(main())
