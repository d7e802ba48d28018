"""Scratch: full-20 probe of pilot_c.ckpt, then LR-decay continuation."""
import time

import numpy as np

from depthcast.model import save_checkpoint, load_checkpoint
from depthcast.data import SynthConfig, synth_dataset
from depthcast.training import (TrainConfig, AdamOptimizer, train_next_frame,
                                next_frame_comparison)

syn = SynthConfig(height=48, width=160, n_objects=4, z_min=3.0, z_max=40.0,
                  vel_xy=2.5, vel_z=1.0, vel_z_min=0.5,
                  background_vel_z=1.0, background_vel_min=0.5,
                  scanlines=12, jitter=0.0, dropout=0.0, length=30, seed=7)
train_seqs = synth_dataset(syn, 20)

tc = TrainConfig(max_epochs=1, batch_size=8, seed=0, learning_rate=3e-4)

models, meta, opt_state = load_checkpoint("pilot_c.ckpt")
model = models["depth"]
opt = AdamOptimizer.from_config(model.named_parameters(), tc)
opt.load_state_dict(opt_state)
start_epoch = meta["epoch"] + 1

m, b = next_frame_comparison(model, train_seqs, seed=1)
print(f"epoch {start_epoch - 1:2d}  FULL-20 probe: model {m:.3f}  "
      f"baseline {b:.3f}  ratio {m/b:.3f}", flush=True)

t_start = time.time()
for epoch in range(start_epoch, start_epoch + 8):
    train_next_frame(model, train_seqs, tc, optimizer=opt)
    m6, b6 = next_frame_comparison(model, train_seqs[:6], seed=1)
    save_checkpoint("pilot_c.ckpt", {"depth": model}, {"epoch": epoch},
                    opt.state_dict())
    print(f"epoch {epoch:2d}  probe6 ratio {m6/b6:.3f}  elapsed "
          f"{time.time()-t_start:.0f}s", flush=True)

m, b = next_frame_comparison(model, train_seqs, seed=1)
print(f"final FULL-20 probe: model {m:.3f}  baseline {b:.3f}  "
      f"ratio {m/b:.3f}", flush=True)
