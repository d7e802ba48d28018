"""Phase-2 pilot: mask training, joint phase, eval, density, stochasticity."""
import time

import numpy as np

from depthcast.data import SynthConfig, regenerate_splits
from depthcast.model import FrameBatch, ModelConfig, VrnnModel, load_checkpoint, rollout
from depthcast.training import (EvalConfig, TrainConfig, evaluate,
                                next_frame_comparison, persistence_baseline,
                                train_joint_autoregressive, train_next_frame)

syn = SynthConfig(height=48, width=160, n_objects=4, z_min=3.0, z_max=40.0,
                  vel_xy=2.5, vel_z=2.0, vel_z_min=1.0,
                  background_vel_z=2.0, background_vel_min=1.0,
                  scanlines=12, jitter=0.0, dropout=0.0, length=30, seed=7)
train_seqs, val_seqs = regenerate_splits(syn, 20, 4)

models, meta, _ = load_checkpoint("pilot_d.ckpt")
depth = models["depth"]
print(f"loaded depth checkpoint from epoch {meta.get('epoch')}", flush=True)
t0 = time.perf_counter()

mask_tc = TrainConfig(phase="next_frame", warmup_len=15, predict_len=15,
                      batch_size=8, lambda1=1e-4, learning_rate=1e-3,
                      max_epochs=3, seed=0)
mask = VrnnModel(depth.config, "mask", np.random.default_rng(1))
train_next_frame(mask, train_seqs, mask_tc)
print(f"mask phase 1 done  elapsed {time.perf_counter() - t0:.0f}s", flush=True)

joint_tc = TrainConfig(phase="joint_autoregressive", warmup_len=15, predict_len=15,
                       batch_size=8, lambda1=1e-4, learning_rate=3e-4,
                       max_epochs=2, seed=0)
train_joint_autoregressive(depth, mask, train_seqs, joint_tc)
print(f"joint done  elapsed {time.perf_counter() - t0:.0f}s", flush=True)

mf, bf = next_frame_comparison(depth, train_seqs, seed=1)
print(f"post-joint full-20 next-frame ratio {mf / bf:.3f}", flush=True)

ec = EvalConfig(warmup_len=15, predict_len=15, n_samples=20, seed=0)
table = evaluate(depth, mask, val_seqs, ec)
base = np.mean([persistence_baseline(s, ec)["rmse"] for s in val_seqs], axis=0)
for t, row in enumerate(table):
    mark = "OK " if row["rmse_mean"] < base[t] else "BAD"
    print(f"  t={t:2d}  model {row['rmse_mean']:.3f} +- {row['rmse_ci95']:.3f}  "
          f"baseline {base[t]:.3f}  {mark}", flush=True)
print(f"eval done  elapsed {time.perf_counter() - t0:.0f}s", flush=True)

pairs = ok_pairs = 0
rollouts = []
for seq, seed in zip(val_seqs, np.random.SeedSequence(99).spawn(len(val_seqs))):
    warm = [FrameBatch.replicate(f, 20) for f in seq.frames[:15]]
    ro = rollout(depth, mask, warm, 15, np.random.default_rng(seed))
    rollouts.append(ro)
    warm_density = float(np.mean([f.mask.mean() for f in seq.frames[:15]]))
    ratios = []
    for step in ro.steps:
        d = float(step.composed.mask.mean())
        pairs += 1
        ok_pairs += int(abs(d - warm_density) <= 0.2 * warm_density)
        ratios.append(d / warm_density)
    print(f"  seq {seq.id}: density ratio range {min(ratios):.2f}..{max(ratios):.2f}",
          flush=True)
print(f"density: {ok_pairs}/{pairs} within +-20%", flush=True)

ro = rollouts[0]
depth_videos = np.stack([s.composed.depth for s in ro.steps])
mask_videos = np.stack([s.composed.mask for s in ro.steps])
flat = np.concatenate([depth_videos, mask_videos], axis=2) \
    .transpose(1, 0, 2, 3, 4).reshape(20, -1)
distinct = all(np.any(flat[i] != flat[j]) for i in range(20) for j in range(i + 1, 20))
valid_any = mask_videos.any(axis=1)
frac_var = float((depth_videos.var(axis=1)[valid_any] > 0).mean())
print(f"distinct {distinct}  var frac {frac_var:.4f}", flush=True)

warm = [FrameBatch.replicate(f, 20) for f in val_seqs[0].frames[:15]]
frozen = rollout(depth, mask, warm, 15, np.random.default_rng(5),
                 force_sigma_zero=True)
collapsed = all(np.array_equal(arr[s], arr[0])
                for step in frozen.steps
                for arr in (step.dense, step.mask_prob,
                            step.composed.depth, step.composed.mask)
                for s in range(1, 20))
print(f"sigma0 collapse {collapsed}  elapsed {time.perf_counter() - t0:.0f}s",
      flush=True)
