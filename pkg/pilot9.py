"""Pilot for the KL sanity gates: weight-copy nulling and the lambda sweep."""
import numpy as np

from depthcast import tensor as T
from depthcast.data import SynthConfig, regenerate_splits
from depthcast.losses import kl_gauss
from depthcast.model import VrnnModel, as_batch, load_checkpoint
from depthcast.training import TrainConfig, train_next_frame

syn = SynthConfig(height=48, width=160, n_objects=4, z_min=3.0, z_max=40.0,
                  vel_xy=2.5, vel_z=2.0, vel_z_min=1.0,
                  background_vel_z=2.0, background_vel_min=1.0,
                  scanlines=12, jitter=0.0, dropout=0.0, length=30, seed=7)
train_seqs, val_seqs = regenerate_splits(syn, 20, 4)

models, _, _ = load_checkpoint("pilot_d.ckpt")
model = models["depth"]
params = model.named_parameters()
post_names = model.gaussian_head_names("posterior")
print(f"posterior branch: {len(post_names)} tensors", flush=True)
for pn in post_names:
    tn = "prior" + pn[len("posterior"):]
    params[tn].data[...] = params[pn].data

frame = as_batch(val_seqs[0].frames[0])
total, state = 0.0, None
rng = np.random.default_rng(0)
with T.no_grad():
    for _ in range(len(val_seqs[0]) - 1):
        res = model.next_frame(frame, frame, state, rng, mode="train")
        state = res.state
        total += abs(kl_gauss(res.posterior_params, res.prior_params).item())
print(f"9a: total |KL| over constant sequence = {total:.3e}", flush=True)

for lam in (0.0, 1e-3):
    m = VrnnModel(model.config, "depth", np.random.default_rng(0))
    tc = TrainConfig(phase="next_frame", warmup_len=15, predict_len=15,
                     batch_size=8, lambda1=lam, learning_rate=1e-3,
                     max_epochs=4, seed=0)
    rep = train_next_frame(m, train_seqs[:6], tc)
    kl = np.array([h["kl"] for h in rep.history])
    per_epoch = kl.reshape(tc.max_epochs, -1).mean(axis=1)
    print(f"9b: lambda1={lam:g} per-epoch mean KL {np.array2string(per_epoch, precision=2)}",
          flush=True)
