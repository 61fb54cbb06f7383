"""Command-line front end: ``scideq generate | reconstruct | train | diagnose``.

Exit codes: 0 success, 2 configuration or validation error, 3 a solve did
not converge (artifacts are still written), 4 training failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .deq import (
    DE_GAP,
    DE_RNN,
    DeqModel,
    NeumannBackward,
    FixedPointBackward,
    Sample,
    TrainConfig,
    TrainHistory,
    deq_forward,
    make_dataset,
    prepare_params,
    train,
)
from .diagnostics import contractivity_report, inequality_chain, psnr
from .errors import Diverged, NotConverged, SciDeqError, SizeLimitExceeded, TrainingFailed
from .fixedpoint import AndersonConfig
from .nets import DENOISER, RNN, init_params, load_checkpoint, save_checkpoint
from .regularizers import Regularizer, gaussian_denoiser, identity_denoiser, tikhonov_denoiser
from .sensing import (
    GENERATOR_VERSION,
    KIND_CUBE,
    frame_side,
    generate_instance,
    load_instance,
    phi_adjoint,
    phi_apply,
    read_array,
    save_instance,
    write_array,
)
from .solvers import SCALED, UNSCALED, SolverConfig, run_admm, run_gap, run_gd, safe_step

log = logging.getLogger("scideq")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_CONVERGED, EXIT_TRAINING = 0, 2, 3, 4
SOLVERS = ("gd", "admm", "admm-scaled", "gap", DE_GAP, DE_RNN)


class ConfigError(Exception):
    pass


# --- file helpers -------------------------------------------------------------------

def atomic_write_text(path, text: str):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def write_manifest(out: Path, command: str, args, seeds: dict, inputs: dict, outputs: dict, t0: float):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    missing = [p for p in outputs.values() if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"outputs missing before manifest: {missing}")
    write_json(out / "manifest.json", {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "version": __version__,
        "wall_time_s": round(time.time() - t0, 6),
    })
    json.loads((out / "manifest.json").read_text())


def _check_cube_file(path, expected):
    arr, _ = read_array(path)
    if arr.shape != np.shape(expected) or not np.array_equal(arr, np.asarray(expected, dtype="<f4").astype(float)):
        raise RuntimeError(f"round-trip check failed for {path}")


def resolve_seed(args) -> int:
    env = os.environ.get("SCI_SEED")
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"SCI_SEED must be an integer, got {env!r}")
    return args.seed


# --- generate -----------------------------------------------------------------------

def cmd_generate(args) -> int:
    t0 = time.time()
    if args.n < 1 or frame_side(args.n) is None:
        raise ConfigError(f"--n must be a positive perfect square (frames are square), got {args.n}")
    if args.b < 1:
        raise ConfigError("--b must be >= 1")
    if args.sigma < 0:
        raise ConfigError("--sigma must be >= 0")
    seed = resolve_seed(args)
    masks, truth, y = generate_instance(args.n, args.b, seed, args.sigma)
    out = Path(args.out)
    meta = {"n": args.n, "B": args.b, "seed": seed, "noise_sigma": args.sigma, "generator": GENERATOR_VERSION}
    paths = save_instance(out, masks, truth, y, meta)
    m2, t2, y2 = load_instance(out)
    _check_cube_file(paths["masks"], masks.masks)
    _check_cube_file(paths["truth"], truth)
    if not np.array_equal(y2, np.asarray(y, dtype="<f4").astype(float)):
        raise RuntimeError("round-trip check failed for measurement")
    write_manifest(out, "generate", args, {"seed": seed}, {}, paths, t0)
    print(f"wrote instance n={args.n} B={args.b} seed={seed} to {out}")
    return EXIT_OK


# --- reconstruct --------------------------------------------------------------------

def _denoiser(args):
    if args.denoiser == "identity":
        return identity_denoiser
    if args.denoiser == "gaussian":
        return gaussian_denoiser(args.denoiser_sigma)
    if args.denoiser == "tikhonov":
        return tikhonov_denoiser(args.tau, args.rho)
    raise ConfigError(f"unknown denoiser {args.denoiser!r}")


def _load_model(path, map_kind, args) -> DeqModel:
    try:
        params, _ = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}")
    want = DENOISER if map_kind == DE_GAP else RNN
    if params.variant != want:
        raise ConfigError(f"{map_kind} needs a {want!r} checkpoint, got {params.variant!r}")
    fwd = AndersonConfig(args.anderson_s, args.delta, args.max_iters, args.tol)
    return DeqModel(map_kind, params, fwd)


def cmd_reconstruct(args) -> int:
    t0 = time.time()
    if args.solver not in SOLVERS:
        raise ConfigError(f"--solver must be one of {', '.join(SOLVERS)}")
    data = Path(args.data)
    try:
        m, truth, y = load_instance(data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load instance from {data}: {exc}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    status = EXIT_OK
    converged = True
    if args.solver in (DE_GAP, DE_RNN):
        if not args.checkpoint:
            raise ConfigError(f"--checkpoint is required for {args.solver}")
        model = _load_model(args.checkpoint, args.solver, args)
        try:
            x, trace = deq_forward(model, m, y)
        except NotConverged as exc:
            x, trace, converged, status = exc.x, exc.trace, False, EXIT_NOT_CONVERGED
            log.error("%s", exc)
    else:
        r = Regularizer(args.reg, args.tau)
        step = args.step if args.step is not None else safe_step(m, r)
        cfg = SolverConfig(step_alpha=step, rho=args.rho, max_iters=args.max_iters, tol=args.tol)
        if args.solver == "gd":
            x, trace = run_gd(m, y, r, cfg)
        elif args.solver == "admm":
            x, trace = run_admm(m, y, r, cfg, UNSCALED)
        elif args.solver == "admm-scaled":
            x, trace = run_admm(m, y, r, cfg, SCALED)
        else:
            x, trace = run_gap(m, y, _denoiser(args), cfg)
        converged = trace.converged
    recon = write_array(out / "recon.bin", x, KIND_CUBE)
    trace.to_csv(out / "trace.csv")
    metrics = {
        "solver": args.solver,
        "converged": converged,
        "iterations": trace.iterations,
        "final_residual": trace.final_residual,
        "measurement_residual": float(np.linalg.norm(y - phi_apply(m, x))),
    }
    if truth is not None:
        metrics["psnr"] = psnr(x, truth, args.peak)
        metrics["baseline_psnr"] = psnr(phi_adjoint(m, y), truth, args.peak)
    write_json(out / "metrics.json", metrics)
    _check_cube_file(recon, x)
    json.loads((out / "metrics.json").read_text())
    outputs = {"recon": recon, "trace": out / "trace.csv", "metrics": out / "metrics.json"}
    inputs = {"data": data}
    if args.checkpoint:
        inputs["checkpoint"] = args.checkpoint
    write_manifest(out, "reconstruct", args, {}, inputs, outputs, t0)
    line = f"{args.solver}: iterations={trace.iterations} converged={converged}"
    if "psnr" in metrics:
        line += f" psnr={metrics['psnr']:.2f} dB"
    print(line)
    return status


# --- train --------------------------------------------------------------------------

def _load_dataset(directory) -> list[Sample]:
    directory = Path(directory)
    dirs = sorted(p for p in directory.iterdir() if p.is_dir() and (p / "masks.bin").exists())
    if (directory / "masks.bin").exists():
        dirs = [directory]
    if not dirs:
        raise ConfigError(f"no instances found under {directory}")
    samples = []
    for d in dirs:
        m, truth, y = load_instance(d)
        if truth is None:
            raise ConfigError(f"{d} has no ground truth, which training needs")
        samples.append(Sample(m, truth, y))
    return samples


def _train_config(args, seed) -> TrainConfig:
    target = None if args.target is None or args.target <= 0 else args.target
    return TrainConfig(
        learning_rate=args.lr, steps=args.steps, batch=args.batch, seed=seed,
        contraction_target=target, rescale_probes=args.probes, jobs=args.jobs,
        n=args.n, B=args.b, samples=args.samples, noise_sigma=args.sigma,
    )


def cmd_train(args) -> int:
    t0 = time.time()
    seed = resolve_seed(args)
    if args.map not in (DE_GAP, DE_RNN):
        raise ConfigError(f"--map must be {DE_GAP} or {DE_RNN}")
    if args.data is None and frame_side(args.n) is None:
        raise ConfigError(f"--n must be a perfect square, got {args.n}")
    try:
        cfg = _train_config(args, seed)
        backward = NeumannBackward(args.neumann_terms) if args.backward == "neumann" else FixedPointBackward()
        fwd = AndersonConfig(args.anderson_s, args.delta, args.max_iters, args.tol)
    except ValueError as exc:
        raise ConfigError(str(exc))
    dataset = _load_dataset(args.data) if args.data else make_dataset(cfg.n, cfg.B, cfg.samples, cfg.noise_sigma, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.bin"
    hist_path = out / "history.csv"
    variant = DENOISER if args.map == DE_GAP else RNN
    start, history, prepared = 0, TrainHistory(), False
    if args.resume:
        try:
            params, header = load_checkpoint(args.resume)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot load checkpoint {args.resume}: {exc}")
        if params.variant != variant:
            raise ConfigError(f"checkpoint variant {params.variant!r} does not match --map {args.map}")
        start = int(header.get("step", 0))
        prev = Path(args.resume).with_name("history.csv")
        if prev.exists():
            history = TrainHistory.from_csv(prev.read_text())
            history.records = [r for r in history.records if r.step < start]
        prepared = True
    else:
        params = init_params(variant, args.channels, args.kernel, seed=seed)
    model = DeqModel(args.map, params, fwd, backward)
    status = EXIT_OK
    if cfg.steps == 0 and not prepared:
        params = prepare_params(params, cfg)
    else:
        try:
            params, history = train(model, dataset, cfg, start_step=start, history=history, prepared=prepared)
        except TrainingFailed as exc:
            log.error("%s", exc)
            params = exc.params if exc.params is not None else params
            history = exc.history if exc.history is not None else history
            status = EXIT_TRAINING
    done = history.records[-1].step + 1 if history.records else start
    save_checkpoint(ckpt_path, params, step=done, map_kind=args.map, seed=seed)
    history.to_csv(hist_path)
    p2, _ = load_checkpoint(ckpt_path)
    if not np.array_equal(p2.theta, params.theta):
        raise RuntimeError("checkpoint round-trip check failed")
    if TrainHistory.from_csv(hist_path.read_text()).to_csv() != hist_path.read_text():
        raise RuntimeError("history round-trip check failed")
    inputs = {"data": args.data} if args.data else {}
    if args.resume:
        inputs["resume"] = args.resume
    write_manifest(out, "train", args, {"seed": seed}, inputs, {"checkpoint": ckpt_path, "history": hist_path}, t0)
    losses = history.losses
    if losses:
        print(f"trained {len(history.records)} steps: loss {losses[0]:.6g} -> {losses[-1]:.6g}")
    else:
        print("wrote initial checkpoint, no steps run")
    return status


# --- diagnose -----------------------------------------------------------------------

def cmd_diagnose(args) -> int:
    t0 = time.time()
    seed = resolve_seed(args)
    try:
        params, header = load_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot load checkpoint {args.checkpoint}: {exc}")
    try:
        m, truth, y = load_instance(args.data)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load instance from {args.data}: {exc}")
    map_kind = DE_GAP if params.variant == DENOISER else DE_RNN
    model = DeqModel(map_kind, params)
    try:
        report = contractivity_report(model, m, y, pairs=args.pairs, seed=seed, skip_psi=args.skip_psi)
        chain = None
        if args.chain and map_kind == DE_GAP and not args.skip_psi:
            chain = inequality_chain(model, m, y, phi_adjoint(m, y))
    except SizeLimitExceeded as exc:
        raise ConfigError(f"{exc}; pass --skip-psi for large instances")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    if chain is not None:
        payload["chain"] = [vars(s) for s in chain]
    write_json(out / "report.json", payload)
    json.loads((out / "report.json").read_text())
    inputs = {"checkpoint": args.checkpoint, "data": args.data}
    write_manifest(out, "diagnose", args, {"seed": seed}, inputs, {"report": out / "report.json"}, t0)
    print(report.summary())
    return EXIT_OK


# --- argument parsing ---------------------------------------------------------------

def _solver_flags(p):
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--anderson-s", type=int, default=3)
    p.add_argument("--delta", type=float, default=1.0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scideq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic instance")
    g.add_argument("--n", type=int, default=256, help="pixels per frame (perfect square)")
    g.add_argument("--b", type=int, default=4, help="frames per measurement")
    g.add_argument("--sigma", type=float, default=0.0, help="measurement noise std")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("reconstruct", help="reconstruct a cube from an instance")
    r.add_argument("--data", required=True, help="instance directory")
    r.add_argument("--solver", required=True, choices=SOLVERS)
    r.add_argument("--out", required=True)
    r.add_argument("--checkpoint", help="parameters for de-gap / de-rnn")
    r.add_argument("--reg", default="tikhonov", choices=("zero", "tikhonov", "l1"))
    r.add_argument("--tau", type=float, default=0.1)
    r.add_argument("--rho", type=float, default=1.0)
    r.add_argument("--step", type=float, default=None, help="gd step (default: safe 1/L)")
    r.add_argument("--denoiser", default="identity", choices=("identity", "gaussian", "tikhonov"))
    r.add_argument("--denoiser-sigma", type=float, default=1.0)
    r.add_argument("--peak", type=float, default=1.0)
    _solver_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="train a deep-equilibrium model")
    t.add_argument("--out", required=True)
    t.add_argument("--data", help="directory of instance directories (default: generate)")
    t.add_argument("--map", default=DE_GAP, choices=(DE_GAP, DE_RNN))
    t.add_argument("--n", type=int, default=256)
    t.add_argument("--b", type=int, default=4)
    t.add_argument("--samples", type=int, default=8)
    t.add_argument("--sigma", type=float, default=0.0)
    t.add_argument("--channels", type=int, default=2)
    t.add_argument("--kernel", type=int, default=3)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--target", type=float, default=0.5, help="contraction target, <= 0 disables")
    t.add_argument("--probes", type=int, default=4)
    t.add_argument("--backward", default="fixed-point", choices=("fixed-point", "neumann"))
    t.add_argument("--neumann-terms", type=int, default=30)
    t.add_argument("--jobs", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-iters", type=int, default=100)
    t.add_argument("--tol", type=float, default=1e-6)
    t.add_argument("--anderson-s", type=int, default=3)
    t.add_argument("--delta", type=float, default=1.0)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("diagnose", help="contractivity report for a checkpoint")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--pairs", type=int, default=8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--skip-psi", action="store_true", help="skip the dense Psi spectrum")
    d.add_argument("--chain", action="store_true", help="evaluate every link of the Jacobian bound")
    d.set_defaults(func=cmd_diagnose)

    for p in (g, r, t, d):
        p.add_argument("--config", help="JSON file of option defaults; explicit flags win")
    return parser


def parse_args(argv):
    """Parse flags on top of the optional ``--config`` JSON defaults."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    command = next((a for a in argv if a in subparsers), None)
    if known.config and command is not None:
        try:
            overrides = json.loads(Path(known.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {known.config}: {exc}")
        if not isinstance(overrides, dict):
            raise ConfigError("config file must hold a JSON object")
        overrides = {k.replace("-", "_"): v for k, v in overrides.items()}
        sub = subparsers[command]
        dests = {a.dest for a in sub._actions} - {"help", "config"}
        unknown = sorted(set(overrides) - dests)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        sub.set_defaults(**overrides)
        for action in sub._actions:
            if action.dest in overrides:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Diverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (ValueError, SciDeqError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
