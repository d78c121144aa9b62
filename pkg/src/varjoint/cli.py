"""Command-line entry points.

Exit codes: 0 success, 1 numerical failure, 2 configuration or input error,
3 invariant violation detected in a solver trace.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .data import build_dataset, load_sample, load_split, save_dataset
from .errors import ConfigError, FormatError, InvariantViolation, NumericalError
from .io import load_checkpoint, save_array, save_checkpoint
from .lda import unrolled_forward
from .metrics import nmse, psnr, ssim
from .mri import radial_mask, write_pgm, zero_filled
from .nn import Params, init_initnet_params, init_joint_params, initnet_forward
from .train import (HISTORY_COLUMNS, Adam, TrainState, algorithm2_train, attach_initials,
                    train_init_nets)

log = logging.getLogger("varjoint")

EXIT_OK, EXIT_NUMERICAL, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3
MODALITIES = ("x1", "x2", "x3")


def write_manifest(out: Path, command: str, cfg: RunConfig | None, extra: dict) -> None:
    """Record the run before any long computation starts."""
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run_manifest.json"
    doc = {
        "command": command,
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": cfg.to_dict() if cfg else None,
        "seeds": {"seed": cfg.seed} if cfg else {},
        **extra,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=list))


def tree_hash(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(np.ascontiguousarray(tensors[k]).tobytes())
    return h.hexdigest()


def _write_png(path: Path, image: np.ndarray, scale: float) -> None:
    from PIL import Image

    pixels = np.clip(np.abs(image) / (scale if scale > 0 else 1.0), 0.0, 1.0)
    Image.fromarray(np.rint(pixels * 255).astype(np.uint8), mode="L").save(path)


def _split_tensors(tensors: dict[str, np.ndarray], prefix: str) -> Params:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def load_model(checkpoint: str | Path):
    tensors, meta = load_checkpoint(checkpoint)
    theta = _split_tensors(tensors, "theta/")
    init = _split_tensors(tensors, "init/")
    gamma = float(tensors["gamma"][0])
    from .config import parse_config
    cfg = parse_config(meta["config"])
    return theta, gamma, init or None, cfg


# -- commands -----------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_manifest(out, "gen-data", cfg, {"outputs": [str(out)]})
    ds = build_dataset(cfg.data, cfg.seed)
    digest = save_dataset(ds, out)
    print(digest)
    return EXIT_OK


def cmd_gen_mask(args) -> int:
    mask = radial_mask(args.h, args.w, args.ratio, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_array(out / "mask.npy", mask.astype(np.float64))
    write_pgm(out / "mask.pgm", mask)
    print(f"{np.count_nonzero(mask) / mask.size:.6f}")
    return EXIT_OK


def cmd_train_init(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_manifest(out, "train-init", cfg, {"data": str(args.data), "outputs": [str(out)]})
    data_tr = load_split(args.data, "train")
    params = init_initnet_params(cfg.model.init_width, cfg.model.init_depth,
                                 cfg.model.kernel_size, cfg.seed)
    adam, start, losses = Adam(), 0, []
    ckpt = out / "checkpoint"
    if args.resume and (ckpt / "manifest.json").exists():
        tensors, meta = load_checkpoint(ckpt)
        params = _split_tensors(tensors, "init/")
        adam.load_state(tensors)
        start, losses = meta["epoch"] + 1, list(meta["losses"])

    def save(epoch, p, opt, hist):
        save_checkpoint(ckpt, {**{f"init/{k}": v for k, v in p.items()}, **opt.state()},
                        {"epoch": epoch, "losses": hist})
        with open(out / "init_loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            w.writerows([i, repr(v)] for i, v in enumerate(hist))

    params, new_losses = train_init_nets(
        data_tr, params, cfg.init_train.epochs, cfg.init_train.lr, cfg.init_train.batch_size,
        seed=cfg.seed, adam=adam, start_epoch=start,
        callback=lambda e, p, opt, hist: save(e, p, opt, losses + hist))
    losses += new_losses
    print(f"initial {losses[0]:.6f} final {losses[-1]:.6f}" if losses else "nothing to do")
    return EXIT_OK


def _write_history(path: Path, state: TrainState) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in state.history:
            w.writerow([r.outer_iter, repr(r.delta), repr(r.lam), repr(r.gamma), repr(r.loss_val),
                        repr(r.penalty), repr(r.grad_norm_sq), r.inner_iters, repr(r.epoch)])


def _save_model(path: Path, theta: Params, gamma: float, init: Params | None, cfg: RunConfig,
                extra: dict | None = None) -> None:
    tensors = {f"theta/{k}": v for k, v in theta.items()}
    if init:
        tensors.update({f"init/{k}": v for k, v in init.items()})
    tensors["gamma"] = np.array([gamma])
    save_checkpoint(path, tensors, {"config": cfg.to_dict(), **(extra or {})})


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    write_manifest(out, "train", cfg, {"data": str(args.data),
                                       "init_checkpoint": str(args.init_checkpoint),
                                       "outputs": [str(out)]})
    init = None
    if args.init_checkpoint:
        init = _split_tensors(load_checkpoint(args.init_checkpoint)[0], "init/")
    init_hash = tree_hash(init) if init else None
    data_tr, data_val = load_split(args.data, "train"), load_split(args.data, "val")
    attach_initials(data_tr + data_val, init)
    m = cfg.model
    theta = {k: m.weight_scale * v for k, v in
             init_joint_params(m.d, m.depth, m.synth_depth, m.kernel_size, cfg.seed).items()}

    def checkpoint(state: TrainState) -> None:
        _write_history(out / "history.csv", state)
        if (len(state.history)) % cfg.train.checkpoint_every == 0:
            _save_model(out / "checkpoint", state.theta, state.gamma, init, cfg,
                        {"outer_iter": len(state.history)})

    try:
        state = algorithm2_train(data_tr, data_val, theta, m.gamma0, cfg.train, cfg.lda,
                                 seed=cfg.seed, callback=checkpoint)
    except NumericalError as exc:
        st = getattr(exc, "state", None)
        if st is not None:
            _save_model(out / "diagnostic", st.theta, st.gamma, init, cfg)
        raise
    if init is not None and tree_hash(init) != init_hash:
        raise InvariantViolation("INIT-Net parameters changed during training")
    _write_history(out / "history.csv", state)
    _save_model(out / "checkpoint", state.theta, state.gamma, init, cfg,
                {"outer_iter": len(state.history)})
    print(f"gamma {state.gamma:.6f} outer iterations {len(state.history)}")
    return EXIT_OK


def _initials(sample, init):
    attach_initials([sample], init)
    return sample.initial


def cmd_reconstruct(args) -> int:
    theta, gamma, init, cfg = load_model(args.checkpoint)
    out = Path(args.out)
    write_manifest(out, "reconstruct", cfg, {"checkpoint": str(args.checkpoint),
                                             "sample": str(args.sample), "outputs": [str(out)]})
    sample = load_sample(args.sample)
    phases = cfg.train.n_phases if args.phases is None else args.phases
    X, tape = unrolled_forward(_initials(sample, init), theta, gamma, sample.kspace, phases, cfg.lda)
    tape.trace.to_csv(out / "trace.csv")
    for name, x, ref in zip(MODALITIES, X, sample.reference):
        save_array(out / f"{name}.npy", x)
        peak = float(np.max(np.abs(ref)))
        _write_png(out / f"{name}.png", x, peak)
        _write_png(out / f"{name}_error.png", np.abs(x) - np.abs(ref), peak)
    tape.trace.check()
    return EXIT_OK


def _evaluate(samples, outputs) -> list[tuple[str, str, float, float, float]]:
    rows = []
    for s, X in zip(samples, outputs):
        for name, x, ref in zip(MODALITIES, X, s.reference):
            rows.append((s.sample_id, name, psnr(x, ref), ssim(x, ref), nmse(x, ref)))
    return rows


def _write_metrics(path: Path, rows) -> dict[str, tuple[float, float, float]]:
    means = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "modality", "psnr", "ssim", "nmse"])
        for r in rows:
            w.writerow([r[0], r[1], *(repr(float(v)) for v in r[2:5])])
        for name in MODALITIES:
            vals = np.array([r[2:] for r in rows if r[1] == name])
            if len(vals) == 0:
                continue
            means[name] = tuple(vals.mean(axis=0).tolist())
            w.writerow(["mean", name, *map(repr, vals.mean(axis=0).tolist())])
            w.writerow(["std", name, *map(repr, vals.std(axis=0).tolist())])
    return means


def _run_model(samples, theta, gamma, init, cfg, phases):
    outs = []
    for s in samples:
        X, tape = unrolled_forward(_initials(s, init), theta, gamma, s.kspace, phases, cfg.lda)
        tape.trace.check()
        outs.append(X)
    return outs


def cmd_evaluate(args) -> int:
    theta, gamma, init, cfg = load_model(args.checkpoint)
    split_dir = Path(args.data_split)
    root, split = split_dir.parent, split_dir.name
    out = Path(args.out)
    write_manifest(out, "evaluate", cfg, {"checkpoint": str(args.checkpoint),
                                          "data_split": str(split_dir), "outputs": [str(out)]})
    samples = load_split(root, split)
    phases = cfg.train.n_phases if args.phases is None else args.phases
    if args.oracle:
        outputs = [s.reference for s in samples]
    else:
        outputs = _run_model(samples, theta, gamma, init, cfg, phases)
    summary = {"model": _write_metrics(out / "metrics.csv", _evaluate(samples, outputs))}

    train = load_split(root, "train")
    mean_x3 = np.mean([np.abs(s.reference[2]) for s in train], axis=0)
    base = [(zero_filled(s.kspace[0]), zero_filled(s.kspace[1]), mean_x3) for s in samples]
    summary["baseline"] = _write_metrics(out / "baselines.csv", _evaluate(samples, base))

    if args.no_synthesis:
        outputs0 = _run_model(samples, theta, 0.0, init, cfg, phases)
        summary["no_synthesis"] = _write_metrics(out / "metrics_no_synthesis.csv",
                                                 _evaluate(samples, outputs0))
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["modality", "setting", "psnr", "ssim", "nmse"])
            for name in MODALITIES[:2]:
                w.writerow([name, "without_synthesis", *map(repr, summary["no_synthesis"][name])])
                w.writerow([name, "with_synthesis", *map(repr, summary["model"][name])])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    for setting, means in summary.items():
        for name, (p, s_, n) in means.items():
            print(f"{setting:13s} {name}: psnr {p:.3f} ssim {s_:.4f} nmse {n:.5f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="varjoint", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic phantom dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-mask", help="write a radial sampling mask (NPY + PGM)")
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--w", type=int, required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_mask)

    p = sub.add_parser("train-init", help="pre-train the initialization networks")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train_init)

    p = sub.add_parser("train", help="bilevel penalty training of the unrolled network")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--init-checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct and synthesize one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True)
    p.add_argument("--phases", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="PSNR/SSIM/NMSE over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-split", required=True, help="split directory, e.g. dataset/test")
    p.add_argument("--phases", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--no-synthesis", action="store_true",
                   help="also evaluate with gamma = 0 and write the comparison")
    p.add_argument("--oracle", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
