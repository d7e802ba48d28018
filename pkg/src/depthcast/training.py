"""TBPTT training in two phases, plus the stochastic evaluation protocol.

Phase one trains each network in isolation on next-frame prediction with
ground-truth inputs. Phase two runs both networks autoregressively on their
own composed predictions while the losses still target ground truth. Weights
update after every frame and the recurrent states cross frame boundaries as
values only, so no gradient flows into earlier frames.
"""

from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .geometry import backproject, chamfer
from .losses import LossBreakdown, depth_loss, mask_loss
from .model import (FrameBatch, SparseDepthFrame, VrnnModel, VrnnState,
                    as_batch, compose, warm_states)
from .tensor import Tensor


class NonFiniteLoss(RuntimeError):
    """Training produced a NaN/inf loss; carries the offending step's inputs."""

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class TrainConfig:
    phase: str = "next_frame"  # or "joint_autoregressive"
    warmup_len: int = 15
    predict_len: int = 15
    batch_size: int = 8
    lambda1: float = 1e-4
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 0        # epochs; 0 disables
    checkpoint_path: str | None = None
    mask_bce: bool = False
    strict_teacher_forcing: bool = False  # phase 2 ablation: ground-truth inputs
    require_pretrained: bool = True

    def __post_init__(self):
        if self.phase not in ("next_frame", "joint_autoregressive"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.warmup_len < 1 or self.predict_len < 1:
            raise ValueError("warmup_len and predict_len must be >= 1")
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be >= 0")
        for name in ("learning_rate", "lambda1"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class TrainReport:
    history: list[dict] = field(default_factory=list)   # per-step loss values
    validation: list[dict] = field(default_factory=list)  # per-epoch metrics
    wall_seconds: float = 0.0

    def moving_average(self, key: str = "total", window: int = 50) -> np.ndarray:
        vals = np.array([h[key] for h in self.history])
        if len(vals) < window:
            return vals
        kernel = np.ones(window) / window
        return np.convolve(vals, kernel, mode="valid")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["step", "recon", "kl", "total", "lr"])
            writer.writeheader()
            for i, h in enumerate(self.history):
                writer.writerow({"step": i, "recon": h["recon"], "kl": h["kl"],
                                 "total": h["total"], "lr": h["lr"]})


class AdamOptimizer:
    """Adaptive-moment updates with bias correction.

    step = lr * m_hat / (sqrt(v_hat) + eps), elementwise per weight tensor.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 2e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}

    @classmethod
    def from_config(cls, params: dict[str, Tensor], cfg: TrainConfig) -> "AdamOptimizer":
        return cls(params, lr=cfg.learning_rate, beta1=cfg.beta1, beta2=cfg.beta2,
                   epsilon=cfg.epsilon)

    def step(self) -> None:
        """Apply one update from the gradients accumulated on the parameters."""
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.epsilon)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m/{k}"] = self.m[k].copy()
            out[f"v/{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = state[f"m/{k}"].copy()
            self.v[k] = state[f"v/{k}"].copy()


def _check_finite(loss: LossBreakdown, context: dict) -> None:
    vals = loss.values()
    if not all(np.isfinite(v) for v in vals.values()):
        raise NonFiniteLoss(f"non-finite loss {vals}", dump=context)


def _loss_for(model: VrnnModel, result, target: FrameBatch,
              cfg: TrainConfig) -> LossBreakdown:
    if model.head == "depth":
        return depth_loss(Tensor(target.depth), result.prediction,
                          result.posterior_params, result.prior_params,
                          kl_weight=cfg.lambda1)
    return mask_loss(Tensor(target.mask), result.prediction,
                     result.posterior_params, result.prior_params,
                     kl_weight=cfg.lambda1, use_bce=cfg.mask_bce)


def tbptt_step(model: VrnnModel, optimizer: AdamOptimizer, frame_prev,
               frame_target, state: VrnnState | None, cfg: TrainConfig,
               rng: np.random.Generator) -> tuple[LossBreakdown, VrnnState]:
    """One train-mode forward, one backprop, one weight update.

    The returned state is detached: it carries activations as plain values and
    the tape is cut at the frame boundary.
    """
    prev = as_batch(frame_prev)
    target = as_batch(frame_target)
    result = model.next_frame(prev, target, state, rng, mode="train")
    loss = _loss_for(model, result, target, cfg)
    _check_finite(loss, {"prev_depth": prev.depth, "target_depth": target.depth,
                         "prediction": result.prediction.data})
    # per-item losses are summed by the loss ops; normalize by batch only
    scaled = T.scale(loss.total, 1.0 / prev.batch)
    optimizer.zero_grad()
    scaled.backward()
    optimizer.step()
    optimizer.zero_grad()
    return loss, result.state.detach()


def _batches(sequences, batch_size: int):
    """Stack same-length sequences into FrameBatch lists, one per time step."""
    for lo in range(0, len(sequences), batch_size):
        chunk = sequences[lo:lo + batch_size]
        n = min(len(s) for s in chunk)
        yield [FrameBatch.from_frames([s.frames[t] for s in chunk])
               for t in range(n)]


def _epoch_stats(history: list[dict], since: int) -> dict:
    chunk = history[since:]
    keys = ("total", "recon", "kl")
    out = {k: float(np.mean([h[k] for h in chunk])) for k in keys} if chunk \
        else {k: float("nan") for k in keys}
    out["steps"] = len(chunk)
    return out


def train_next_frame(model: VrnnModel, sequences, cfg: TrainConfig,
                     optimizer: AdamOptimizer | None = None,
                     on_epoch=None) -> TrainReport:
    """Phase one: teacher-forced next-frame prediction for a single network."""
    if not sequences:
        raise ValueError("empty dataset")
    if optimizer is None:
        optimizer = AdamOptimizer.from_config(model.named_parameters(), cfg)
    report = TrainReport()
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.max_epochs):
        since = len(report.history)
        for steps in _batches(sequences, cfg.batch_size):
            state = None
            for prev, target in zip(steps, steps[1:]):
                loss, state = tbptt_step(model, optimizer, prev, target, state,
                                         cfg, rng)
                entry = loss.values()
                entry["lr"] = cfg.learning_rate
                report.history.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, _epoch_stats(report.history, since))
    report.wall_seconds = time.perf_counter() - start
    return report


def train_joint_autoregressive(depth_model: VrnnModel, mask_model: VrnnModel,
                               sequences, cfg: TrainConfig,
                               depth_opt: AdamOptimizer | None = None,
                               mask_opt: AdamOptimizer | None = None,
                               pretrained: bool = True,
                               on_epoch=None) -> TrainReport:
    """Phase two: warm on ground truth, then predict autoregressively.

    For each predicted frame both networks consume the composed prediction
    (teacher forcing applies to the targets, not the inputs), compute their
    losses against ground truth, and update immediately. Losses are applied
    to predicted frames only; warmup runs without gradients.
    """
    if not sequences:
        raise ValueError("empty dataset")
    if cfg.require_pretrained and not pretrained:
        raise ValueError("phase 2 expects phase-1 checkpoints; pass pretrained=True "
                         "or set require_pretrained=False")
    if depth_opt is None:
        depth_opt = AdamOptimizer.from_config(depth_model.named_parameters(), cfg)
    if mask_opt is None:
        mask_opt = AdamOptimizer.from_config(mask_model.named_parameters(), cfg)

    need = cfg.warmup_len + cfg.predict_len
    report = TrainReport()
    start = time.perf_counter()
    rng = np.random.default_rng(cfg.seed)
    threshold = depth_model.config.mask_threshold
    for epoch in range(cfg.max_epochs):
        since = len(report.history)
        for steps in _batches(sequences, cfg.batch_size):
            if len(steps) < need:
                warnings.warn(f"sequence of {len(steps)} frames < "
                              f"warmup+predict {need}, skipped")
                continue
            with T.no_grad():
                ds, ms, inp = warm_states(depth_model, mask_model,
                                          steps[:cfg.warmup_len], rng)
            for t in range(cfg.warmup_len, cfg.warmup_len + cfg.predict_len):
                target = steps[t]
                rd = depth_model.next_frame(inp, target, ds, rng, mode="train")
                rm = mask_model.next_frame(inp, target, ms, rng, mode="train")
                dl = _loss_for(depth_model, rd, target, cfg)
                ml = _loss_for(mask_model, rm, target, cfg)
                _check_finite(dl, {"t": t, "input_depth": inp.depth})
                _check_finite(ml, {"t": t, "input_mask": inp.mask})
                for opt, loss in ((depth_opt, dl), (mask_opt, ml)):
                    opt.zero_grad()
                    T.scale(loss.total, 1.0 / target.batch).backward()
                    opt.step()
                    opt.zero_grad()
                ds, ms = rd.state.detach(), rm.state.detach()
                if cfg.strict_teacher_forcing:
                    inp = target
                else:
                    inp = compose(rd.prediction.data, rm.prediction.data, threshold)
                entry = dl.values()
                entry["mask_recon"] = ml.recon.item()
                entry["mask_kl"] = ml.kl.item()
                entry["lr"] = cfg.learning_rate
                report.history.append(entry)
        if on_epoch is not None:
            on_epoch(epoch, _epoch_stats(report.history, since))
    report.wall_seconds = time.perf_counter() - start
    return report


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def masked_rmse_mae(predicted: FrameBatch, truth: FrameBatch) -> tuple[np.ndarray, np.ndarray]:
    """Per-item RMSE and MAE over pixels valid in the ground truth."""
    rmse = np.empty(truth.batch)
    mae = np.empty(truth.batch)
    for i in range(truth.batch):
        valid = truth.mask[i, 0] > 0
        if not valid.any():
            rmse[i] = mae[i] = 0.0
            continue
        diff = predicted.depth[i, 0][valid] - truth.depth[i, 0][valid]
        rmse[i] = np.sqrt(np.mean(diff ** 2))
        mae[i] = np.mean(np.abs(diff))
    return rmse, mae


def _frame_chamfer(predicted: FrameBatch, truth: FrameBatch, intrinsics) -> np.ndarray:
    out = np.empty(truth.batch)
    for i in range(truth.batch):
        pred_cloud = backproject(SparseDepthFrame(predicted.depth[i, 0],
                                                  predicted.mask[i, 0]), intrinsics)
        true_cloud = backproject(SparseDepthFrame(truth.depth[i, 0],
                                                  truth.mask[i, 0]), intrinsics)
        if len(pred_cloud) == 0 or len(true_cloud) == 0:
            out[i] = np.nan
            continue
        out[i] = chamfer(pred_cloud, true_cloud)
    return out


@dataclass
class EvalConfig:
    warmup_len: int = 15
    predict_len: int = 15
    n_samples: int = 20
    seed: int = 0
    jobs: int = 1
    use_dense_truth: bool = True   # score against noise-free values when available
    with_chamfer: bool = True


def _rollout_steps(depth_model, mask_model, warmup, horizon, rng):
    from .model import rollout
    return rollout(depth_model, mask_model, warmup, horizon, rng).steps


def _eval_sequence(depth_model: VrnnModel, mask_model: VrnnModel, seq,
                   cfg: EvalConfig, seed) -> dict[str, np.ndarray]:
    """All-samples rollout for one sequence, batched in the batch dimension.

    Masked RMSE/MAE means masked by the ground truth: errors are scored at
    the pixels the sparse target frame actually measured. use_dense_truth
    only swaps in noise-free depth values at those pixels when the sequence
    carries a dense rendering; it never widens the scored pixel set.
    """
    rng = np.random.default_rng(seed)
    warmup = [FrameBatch.replicate(f, cfg.n_samples)
              for f in seq.frames[:cfg.warmup_len]]
    steps = _rollout_steps(depth_model, mask_model, warmup, cfg.predict_len, rng)

    value_frames = seq.dense if (cfg.use_dense_truth and seq.dense is not None) \
        else seq.frames
    rmse = np.empty((cfg.predict_len, cfg.n_samples))
    mae = np.empty_like(rmse)
    cd = np.full_like(rmse, np.nan)
    density = np.empty_like(rmse)
    for t, step in enumerate(steps):
        sparse_t = seq.frames[cfg.warmup_len + t]
        vals = value_frames[cfg.warmup_len + t]
        truth = FrameBatch.replicate(
            SparseDepthFrame(vals.depth * sparse_t.mask, sparse_t.mask),
            cfg.n_samples)
        dense_pred = FrameBatch(step.dense, (step.dense > 0).astype(np.float64))
        rmse[t], mae[t] = masked_rmse_mae(dense_pred, truth)
        density[t] = step.composed.mask.mean(axis=(1, 2, 3))
        if cfg.with_chamfer:
            sparse_truth = FrameBatch.replicate(sparse_t, cfg.n_samples)
            cd[t] = _frame_chamfer(step.composed, sparse_truth, seq.intrinsics)
    return {"rmse": rmse, "mae": mae, "cd": cd, "density": density}


def persistence_baseline(seq, cfg: EvalConfig) -> dict[str, np.ndarray]:
    """Copy-last-frame predictor: the last warmup frame repeated forward.

    Scored at the pixels measured by both the copy and the target frame,
    against the same depth values evaluate() uses, so the curves are
    directly comparable.
    """
    last = seq.frames[cfg.warmup_len - 1]
    value_frames = seq.dense if (cfg.use_dense_truth and seq.dense is not None) \
        else seq.frames
    valid = last.mask > 0
    rmse = np.empty(cfg.predict_len)
    mae = np.empty(cfg.predict_len)
    cd = np.full(cfg.predict_len, np.nan)
    for t in range(cfg.predict_len):
        sparse_t = seq.frames[cfg.warmup_len + t]
        vals = value_frames[cfg.warmup_len + t]
        measurable = valid & (sparse_t.mask > 0)
        diff = last.depth[measurable] - vals.depth[measurable]
        rmse[t] = np.sqrt(np.mean(diff ** 2))
        mae[t] = np.mean(np.abs(diff))
        if cfg.with_chamfer:
            cd[t] = _frame_chamfer(FrameBatch.single(last),
                                   FrameBatch.single(sparse_t),
                                   seq.intrinsics)[0]
    return {"rmse": rmse, "mae": mae, "cd": cd}


def next_frame_comparison(depth_model: VrnnModel, sequences,
                          seed: int = 0) -> tuple[float, float]:
    """Pooled next-frame masked RMSE of the model vs the copy-last-frame copy.

    Inputs are always ground truth (teacher forcing); latents come from the
    prior mean so the point estimate is deterministic. Errors are pooled over
    pixels valid in both the target and the previous frame, where the copy
    baseline is defined, so both predictors are scored on identical pixels.
    """
    rng = np.random.default_rng(seed)
    model_sq, base_sq, n = 0.0, 0.0, 0
    with T.no_grad():
        for seq in sequences:
            state = None
            for prev, target in zip(seq.frames, seq.frames[1:]):
                result = depth_model.next_frame(FrameBatch.single(prev), None,
                                                state, rng, mode="infer",
                                                force_sigma_zero=True)
                state = result.state
                measurable = (prev.mask > 0) & (target.mask > 0)
                if not measurable.any():
                    continue
                pred = result.prediction.data[0, 0][measurable]
                true = target.depth[measurable]
                model_sq += float(((pred - true) ** 2).sum())
                base_sq += float(((prev.depth[measurable] - true) ** 2).sum())
                n += int(measurable.sum())
    if n == 0:
        raise ValueError("no jointly-valid pixels to score")
    return float(np.sqrt(model_sq / n)), float(np.sqrt(base_sq / n))


def evaluate(depth_model: VrnnModel, mask_model: VrnnModel, sequences,
             cfg: EvalConfig) -> list[dict]:
    """Per predicted-frame mean and 95% CI of RMSE/MAE/CD over all rollouts.

    Each sequence gets an independent child seed; with jobs > 1 sequences
    are evaluated concurrently and reduced in submission order, so the
    result is identical to the serial run.
    """
    if not sequences:
        raise ValueError("empty dataset")
    if cfg.n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    for seq in sequences:
        if len(seq) < cfg.warmup_len + cfg.predict_len:
            raise ValueError(f"sequence {seq.id} too short for "
                             f"warmup {cfg.warmup_len} + predict {cfg.predict_len}")

    seeds = np.random.SeedSequence(cfg.seed).spawn(len(sequences))
    if cfg.jobs > 1:
        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [pool.submit(_eval_sequence, depth_model, mask_model,
                                   seq, cfg, seed)
                       for seq, seed in zip(sequences, seeds)]
            per_seq = [f.result() for f in futures]
    else:
        per_seq = [_eval_sequence(depth_model, mask_model, seq, cfg, seed)
                   for seq, seed in zip(sequences, seeds)]

    table = []
    for t in range(cfg.predict_len):
        row = {"frame_index": t}
        for key in ("rmse", "mae", "cd", "density"):
            vals = np.concatenate([r[key][t] for r in per_seq])
            vals = vals[np.isfinite(vals)]
            if len(vals) == 0:
                row[f"{key}_mean"] = float("nan")
                row[f"{key}_ci95"] = float("nan")
                continue
            row[f"{key}_mean"] = float(vals.mean())
            row[f"{key}_ci95"] = float(1.96 * vals.std(ddof=1) / np.sqrt(len(vals))) \
                if len(vals) > 1 else 0.0
        table.append(row)
    return table


METRICS_CSV_FIELDS = ("frame_index", "rmse_mean", "rmse_ci95", "mae_mean", "cd_mean")


def write_metrics_csv(path, table: list[dict]) -> None:
    """Emit the fixed metrics schema; extra in-memory columns are dropped."""
    if not table:
        raise ValueError("empty metrics table")
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(METRICS_CSV_FIELDS),
                                extrasaction="ignore")
        writer.writeheader()
        for row in table:
            writer.writerow({k: row[k] for k in METRICS_CSV_FIELDS})
