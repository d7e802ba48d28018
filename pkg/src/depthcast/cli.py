"""Command-line entry point: synth, train, predict, eval.

Exit codes: 0 success, 1 runtime failure, 2 config/validation failure.
All commands are deterministic given the same config and seed. The output
root resolves as --out flag, else $DEPTHCAST_OUT, else paths.out_dir.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, RunConfig, load_config, schema_text
from .data import (load_depth_png, load_manifest, load_sequences,
                   regenerate_splits, save_depth_png, save_manifest, Sequence)
from .model import (FrameBatch, SparseDepthFrame, VrnnModel, load_checkpoint,
                    rollout, save_checkpoint)
from .training import (AdamOptimizer, EvalConfig, evaluate,
                       persistence_baseline, train_joint_autoregressive,
                       train_next_frame)

_PHASE_TAGS = {"next_frame": "phase1", "joint_autoregressive": "joint"}


# ---------------------------------------------------------------------------
# image export
# ---------------------------------------------------------------------------

def save_mask_png(path, prob: np.ndarray) -> None:
    """Mask probabilities as 8-bit grayscale; 0.5 maps to pixel value 128."""
    Image.fromarray(np.rint(prob * 255.0).astype(np.uint8)).save(path)


def save_falsecolor_png(path, depth: np.ndarray, max_range: float) -> None:
    """8-bit viridis rendering for eyeballing; invalid pixels stay black."""
    from matplotlib import colormaps
    lut = (colormaps["viridis"](np.linspace(0, 1, 256))[:, :3] * 255).astype(np.uint8)
    idx = np.clip(depth / max_range * 255.0, 0, 255).astype(np.uint8)
    rgb = lut[idx]
    rgb[depth <= 0] = 0
    Image.fromarray(rgb).save(path)


def _out_root(args, cfg: RunConfig) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    env = os.environ.get("DEPTHCAST_OUT")
    if env:
        return Path(env)
    return Path(cfg.paths.out_dir)


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def _load_dataset(cfg: RunConfig) -> tuple[list[Sequence], list[Sequence]]:
    """Manifest-backed synthetic data regenerates in memory (keeping the dense
    ground truth); otherwise PNG drives are windowed from disk."""
    root = Path(cfg.paths.data_dir)
    manifest = root / "manifest.yaml"
    if manifest.is_file():
        syn, n_train, n_val = load_manifest(manifest)
        return regenerate_splits(syn, n_train, n_val)
    need = cfg.train.warmup_len + cfg.train.predict_len
    if (root / "train").is_dir():
        train = load_sequences(root / "train", need, need)
        val = load_sequences(root / "val", need, need) if (root / "val").is_dir() else []
        return train, val
    return load_sequences(root, need, need), []


def _apply_overrides(cfg: RunConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg.synth.seed = args.seed
        cfg.train.seed = args.seed
        cfg.eval.seed = args.seed
    if getattr(args, "epochs", None) is not None:
        cfg.train.max_epochs = args.epochs
    if getattr(args, "phase", None):
        cfg.train.phase = args.phase
    if getattr(args, "jobs", None) is not None:
        cfg.eval.jobs = args.jobs
    if getattr(args, "samples", None) is not None:
        cfg.eval.n_samples = args.samples
    if getattr(args, "horizon", None) is not None:
        cfg.eval.predict_len = args.horizon


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_root(args, cfg)
    train, val = regenerate_splits(cfg.synth, cfg.split.n_train, cfg.split.n_val)
    for split_name, split in (("train", train), ("val", val)):
        for seq in split:
            d = out / split_name / seq.id
            d.mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(seq.frames):
                save_depth_png(d / f"{i:06d}.png", frame)
    save_manifest(out / "manifest.yaml", cfg.synth, cfg.split.n_train, cfg.split.n_val)
    n_frames = sum(len(s) for s in train) + sum(len(s) for s in val)
    print(f"wrote {len(train)} train + {len(val)} val sequences "
          f"({n_frames} frames) under {out}")
    return 0


def _ckpt_path(out: Path, net: str, phase: str) -> Path:
    return out / "checkpoints" / f"{net}_{_PHASE_TAGS[phase]}.ckpt"


def _train_one_net(cfg: RunConfig, net: str, sequences, out: Path,
                   resume: bool) -> None:
    rng = np.random.default_rng(cfg.train.seed)
    model = VrnnModel(cfg.model, net, rng)
    opt = AdamOptimizer.from_config(model.named_parameters(), cfg.train)
    path = _ckpt_path(out, net, "next_frame")
    if resume and path.is_file():
        models, _meta, opt_state = load_checkpoint(path)
        model = models[net]
        opt = AdamOptimizer.from_config(model.named_parameters(), cfg.train)
        if opt_state:
            opt.load_state_dict(opt_state)
        print(f"resumed {net} from {path}")

    def progress(epoch, stats):
        print(f"[{net}/phase1] epoch {epoch}: total {stats['total']:.4f} "
              f"recon {stats['recon']:.4f} kl {stats['kl']:.4f}")
        every = cfg.train.checkpoint_every
        if every and (epoch + 1) % every == 0:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(path, {net: model}, meta={"epoch": epoch + 1},
                            optimizer_state=opt.state_dict())

    report = train_next_frame(model, sequences, cfg.train, optimizer=opt,
                              on_epoch=progress)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, {net: model}, meta={"epoch": cfg.train.max_epochs},
                    optimizer_state=opt.state_dict())
    report.write_csv(out / f"train_{net}_phase1.csv")


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_root(args, cfg)
    train_seqs, _val = _load_dataset(cfg)
    if not train_seqs:
        raise ConfigError(f"no training sequences under {cfg.paths.data_dir}")
    out.mkdir(parents=True, exist_ok=True)

    if cfg.train.phase == "next_frame":
        nets = ("depth", "mask") if args.net == "both" else (args.net,)
        for net in nets:
            _train_one_net(cfg, net, train_seqs, out, args.resume)
        return 0

    # joint phase needs both phase-1 checkpoints unless explicitly waived
    d_path = _ckpt_path(out, "depth", "next_frame")
    m_path = _ckpt_path(out, "mask", "next_frame")
    j_path = out / "checkpoints" / "joint.ckpt"
    if args.resume and j_path.is_file():
        models, _meta, _opt = load_checkpoint(j_path)
        depth_model, mask_model = models["depth"], models["mask"]
        print(f"resumed joint training from {j_path}")
    elif d_path.is_file() and m_path.is_file():
        depth_model = load_checkpoint(d_path)[0]["depth"]
        mask_model = load_checkpoint(m_path)[0]["mask"]
    elif cfg.train.require_pretrained:
        raise ConfigError(
            f"joint phase expects phase-1 checkpoints at {d_path} and {m_path}; "
            f"run `depthcast train --phase next_frame --net both` first, or set "
            f"train.require_pretrained: false to start from scratch")
    else:
        rng = np.random.default_rng(cfg.train.seed)
        depth_model = VrnnModel(cfg.model, "depth", rng)
        mask_model = VrnnModel(cfg.model, "mask", rng)

    def progress(epoch, stats):
        print(f"[joint] epoch {epoch}: total {stats['total']:.4f} "
              f"recon {stats['recon']:.4f} kl {stats['kl']:.4f}")

    report = train_joint_autoregressive(depth_model, mask_model, train_seqs,
                                        cfg.train, pretrained=True,
                                        on_epoch=progress)
    j_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(j_path, {"depth": depth_model, "mask": mask_model},
                    meta={"epoch": cfg.train.max_epochs})
    report.write_csv(out / "train_joint.csv")
    return 0


def _load_models(paths: list[str]) -> tuple[VrnnModel, VrnnModel]:
    models = {}
    for p in paths:
        if not Path(p).is_file():
            raise ConfigError(f"checkpoint {p} does not exist")
        models.update(load_checkpoint(p)[0])
    if "depth" not in models or "mask" not in models:
        raise ConfigError(f"checkpoints {paths} must cover both the depth and "
                          f"mask networks, found {sorted(models)}")
    return models["depth"], models["mask"]


def _load_input_frames(path: str, minimum: int) -> list[SparseDepthFrame]:
    p = Path(path)
    if not p.is_dir():
        raise ConfigError(f"input {p} is not a directory")
    files = sorted(p.glob("*.png"))
    if len(files) < minimum:
        raise ConfigError(f"input {p} holds {len(files)} frames, need >= {minimum}")
    return [load_depth_png(f) for f in files]


def cmd_predict(cfg: RunConfig, args) -> int:
    out = _out_root(args, cfg)
    depth_model, mask_model = _load_models(args.checkpoint)
    horizon = cfg.eval.predict_len
    warmup_len = cfg.eval.warmup_len
    frames = _load_input_frames(args.input, warmup_len)
    if args.compare and len(frames) < warmup_len + horizon:
        raise ConfigError(f"ground-truth comparison needs {warmup_len}+{horizon} "
                          f"frames, input has {len(frames)}")
    n = cfg.eval.n_samples
    rng = np.random.default_rng(cfg.eval.seed)
    warmup = [FrameBatch.replicate(f, n) for f in frames[:warmup_len]]
    result = rollout(depth_model, mask_model, warmup, horizon, rng)

    max_range = depth_model.config.max_range
    for s in range(n):
        d = out / f"sample_{s:02d}"
        d.mkdir(parents=True, exist_ok=True)
        for t, step in enumerate(result.steps):
            dense = step.dense[s, 0]
            mask_prob = step.mask_prob[s, 0]
            composed = step.composed.to_frames()[s]
            save_depth_png(d / f"dense_{t:03d}.png",
                           SparseDepthFrame(np.where(dense > 0, dense, 0.0),
                                            (dense > 0).astype(np.float64)))
            save_mask_png(d / f"mask_{t:03d}.png", mask_prob)
            save_depth_png(d / f"composed_{t:03d}.png", composed)
            if args.falsecolor:
                fc = out / "falsecolor" / f"sample_{s:02d}"
                fc.mkdir(parents=True, exist_ok=True)
                save_falsecolor_png(fc / f"dense_{t:03d}_0to{max_range:g}m.png",
                                    dense, max_range)
    print(f"wrote {n} samples x {horizon} steps x 3 images under {out}")

    if args.compare:
        rows = []
        for t, step in enumerate(result.steps):
            truth = frames[warmup_len + t]
            valid = truth.mask > 0
            diff = step.dense[:, 0, valid] - truth.depth[valid]
            rows.append((t, float(np.sqrt(np.mean(diff ** 2)))))
        with open(out / "compare.csv", "w") as fh:
            fh.write("frame_index,rmse_mean\n")
            for t, r in rows:
                fh.write(f"{t},{r}\n")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _out_root(args, cfg)
    depth_model, mask_model = _load_models(args.checkpoint)
    train_seqs, val_seqs = _load_dataset(cfg)
    seqs = val_seqs or train_seqs
    if not seqs:
        raise ConfigError(f"no sequences under {cfg.paths.data_dir}")
    out.mkdir(parents=True, exist_ok=True)

    table = evaluate(depth_model, mask_model, seqs, cfg.eval)
    base = np.mean([persistence_baseline(s, cfg.eval)["rmse"] for s in seqs], axis=0)
    for row, b in zip(table, base):
        row["baseline_rmse"] = float(b)

    fields = ["frame_index", "rmse_mean", "rmse_ci95", "mae_mean", "cd_mean",
              "baseline_rmse"]
    with open(out / "metrics.csv", "w") as fh:
        fh.write(",".join(fields) + "\n")
        for row in table:
            fh.write(",".join(str(row[f]) for f in fields) + "\n")
    _plot_rmse(out / "rmse_plot.png", table)
    print(f"evaluated {len(seqs)} sequences x {cfg.eval.n_samples} samples; "
          f"metrics under {out}")
    return 0


def _plot_rmse(path, table) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    t = [row["frame_index"] for row in table]
    mean = np.array([row["rmse_mean"] for row in table])
    ci = np.array([row["rmse_ci95"] for row in table])
    base = np.array([row["baseline_rmse"] for row in table])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(t, mean, label="model (mean of samples)", color="tab:blue")
    ax.fill_between(t, mean - ci, mean + ci, alpha=0.3, color="tab:blue",
                    label="95% CI")
    ax.plot(t, base, label="copy last frame", color="tab:gray", linestyle="--")
    ax.set_xlabel("predicted frame index")
    ax.set_ylabel("RMSE [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="depthcast",
        description="Stochastic prediction and completion of sparse depth videos.")
    parser.add_argument("--print-schema", action="store_true",
                        help="print the config file schema and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output root "
                       "(default: $DEPTHCAST_OUT, then paths.out_dir)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p)

    p = sub.add_parser("train", help="train one phase")
    common(p)
    p.add_argument("--phase", choices=("next_frame", "joint_autoregressive"),
                   default=None)
    p.add_argument("--net", choices=("depth", "mask", "both"), default="both")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("predict", help="roll a trained model forward")
    common(p)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--input", required=True, help="directory of depth PNGs")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--compare", action="store_true",
                   help="also score predictions against later input frames")
    p.add_argument("--falsecolor", action="store_true",
                   help="additionally export 8-bit false-color renderings")

    p = sub.add_parser("eval", help="stochastic evaluation protocol")
    common(p)
    p.add_argument("--checkpoint", nargs="+", required=True)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    return parser


_DISPATCH = {"synth": cmd_synth, "train": cmd_train,
             "predict": cmd_predict, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        print(schema_text())
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    try:
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        return _DISPATCH[args.command](cfg, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure, distinct from bad input
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
