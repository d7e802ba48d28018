"""Scratch pilot: does the thin fixture model learn the drift fast enough?"""
import sys
import time

import numpy as np

from depthcast.model import ModelConfig, VrnnModel, save_checkpoint, load_checkpoint
from depthcast.data import SynthConfig, synth_dataset
from depthcast.training import (TrainConfig, AdamOptimizer, train_next_frame,
                                next_frame_comparison)

ARM = sys.argv[1] if len(sys.argv) > 1 else "a"
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 30
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3

if ARM == "a":
    syn = SynthConfig(height=48, width=160, n_objects=2, z_min=3.0, z_max=60.0,
                      vel_xy=0.0, vel_z=0.5, vel_z_min=0.3,
                      background_vel_z=0.5, background_vel_min=0.3,
                      scanlines=12, jitter=0.0, dropout=0.0, length=30, seed=7)
    max_range = 80.0
elif ARM == "b":
    syn = SynthConfig(height=48, width=160, n_objects=2, z_min=3.0, z_max=120.0,
                      vel_xy=0.0, vel_z=1.5, vel_z_min=1.0,
                      background_vel_z=1.5, background_vel_min=1.0,
                      scanlines=12, jitter=0.0, dropout=0.0, length=30, seed=7)
    max_range = 130.0
else:
    # lateral sprite motion: the copy baseline pays |z_obj - z_bg| over the
    # displaced bands while drift keeps it honest everywhere else
    syn = SynthConfig(height=48, width=160, n_objects=4, z_min=3.0, z_max=40.0,
                      vel_xy=2.5, vel_z=1.0, vel_z_min=0.5,
                      background_vel_z=1.0, background_vel_min=0.5,
                      scanlines=12, jitter=0.0, dropout=0.0, length=30, seed=7)
    max_range = 250.0

train_seqs = synth_dataset(syn, 20)

thin = ModelConfig(height=48, width=160, sparse_channels=(8, 8), sparse_kernels=(7, 5),
                   stage_channels=(8, 12, 16, 16), blocks_per_stage=1, gn_groups=4,
                   latent_channels=16, rnn_hidden=16, predictor_hidden=32,
                   max_range=max_range)
tc = TrainConfig(max_epochs=1, batch_size=8, seed=0, learning_rate=LR)

ckpt = f"pilot_{ARM}.ckpt"
start_epoch = 0
try:
    models, meta, opt_state = load_checkpoint(ckpt)
    model = models["depth"]
    opt = AdamOptimizer.from_config(model.named_parameters(), tc)
    opt.load_state_dict(opt_state)
    start_epoch = meta["epoch"] + 1
    print(f"resumed {ckpt} at epoch {start_epoch}", flush=True)
except FileNotFoundError:
    model = VrnnModel(thin, "depth", np.random.default_rng(0))
    opt = AdamOptimizer.from_config(model.named_parameters(), tc)

t_start = time.time()
for epoch in range(start_epoch, EPOCHS):
    train_next_frame(model, train_seqs, tc, optimizer=opt)
    m, b = next_frame_comparison(model, train_seqs[:6], seed=1)
    save_checkpoint(ckpt, {"depth": model}, {"epoch": epoch},
                    opt.state_dict())
    print(f"epoch {epoch:2d}  model {m:.3f}  baseline {b:.3f}  ratio {m/b:.3f}  "
          f"elapsed {time.time()-t_start:.0f}s", flush=True)
