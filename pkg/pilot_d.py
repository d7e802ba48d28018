"""Scratch: arm D pilot, faster per-sequence drift + LR-decay schedule."""
import time

import numpy as np

from depthcast.model import ModelConfig, VrnnModel, save_checkpoint
from depthcast.data import SynthConfig, synth_dataset
from depthcast.training import (TrainConfig, AdamOptimizer, train_next_frame,
                                next_frame_comparison)

syn = SynthConfig(height=48, width=160, n_objects=4, z_min=3.0, z_max=40.0,
                  vel_xy=2.5, vel_z=2.0, vel_z_min=1.0,
                  background_vel_z=2.0, background_vel_min=1.0,
                  scanlines=12, jitter=0.0, dropout=0.0, length=30, seed=7)
train_seqs = synth_dataset(syn, 20)

thin = ModelConfig(height=48, width=160, sparse_channels=(8, 8), sparse_kernels=(7, 5),
                   stage_channels=(8, 12, 16, 16), blocks_per_stage=1, gn_groups=4,
                   latent_channels=16, rnn_hidden=16, predictor_hidden=32,
                   max_range=250.0)
tc = TrainConfig(max_epochs=1, batch_size=8, seed=0, learning_rate=1e-3)

model = VrnnModel(thin, "depth", np.random.default_rng(0))
opt = AdamOptimizer.from_config(model.named_parameters(), tc)

t_start = time.time()
for epoch in range(30):
    if epoch == 18:
        opt.lr = 3e-4
        print("decayed lr to 3e-4", flush=True)
    train_next_frame(model, train_seqs, tc, optimizer=opt)
    m6, b6 = next_frame_comparison(model, train_seqs[:6], seed=1)
    line = f"epoch {epoch:2d}  probe6 ratio {m6/b6:.3f}"
    if m6 / b6 <= 0.82 or epoch % 3 == 2:
        mf, bf = next_frame_comparison(model, train_seqs, seed=1)
        line += f"  FULL-20 model {mf:.3f} baseline {bf:.3f} ratio {mf/bf:.3f}"
        save_checkpoint("pilot_d.ckpt", {"depth": model}, {"epoch": epoch},
                        opt.state_dict())
        if mf / bf <= 0.78:
            print(line + f"  elapsed {time.time()-t_start:.0f}s", flush=True)
            print("gate reached with margin, stopping", flush=True)
            break
    print(line + f"  elapsed {time.time()-t_start:.0f}s", flush=True)
