"""The four-part variational recurrent model, instantiated twice.

One network regresses a dense depth map, its twin regresses the sparsity mask
that downsamples the dense map back into a plausible sparse frame. Both share
the same architecture: a sparse-convolution front end, a residual trunk with
group normalization, prior/posterior ConvLSTM heads emitting per-cell Gaussian
parameters over a coarse latent grid, a frame-predictor ConvLSTM, and a
skip-connected upsampling decoder. Only the output nonlinearity differs.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from . import recurrent as R
from .sparse import MaskedFeature, sparse_conv2d
from .tensor import ShapeError, Tensor

_CKPT_MAGIC = b"DEPTHCASTCKPT1\n"


# ---------------------------------------------------------------------------
# frame containers
# ---------------------------------------------------------------------------

class FrameError(ValueError):
    """A depth/mask pair violates the sparse-frame invariant."""


def _check_depth_mask(depth: np.ndarray, mask: np.ndarray) -> None:
    if depth.shape != mask.shape:
        raise FrameError(f"depth {depth.shape} and mask {mask.shape} differ")
    if not np.all(np.isfinite(depth)):
        raise FrameError("depth contains non-finite values")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise FrameError("mask entries must be exactly 0 or 1")
    if np.any(depth[mask == 0.0] != 0.0):
        raise FrameError("invalid pixels must carry depth exactly 0")
    if np.any(depth[mask == 1.0] <= 0.0):
        raise FrameError("valid pixels must carry depth > 0")


@dataclass
class SparseDepthFrame:
    """A depth map in meters plus its binary validity mask.

    Invariant: depth > 0 exactly where mask = 1; holes carry depth exactly 0.
    """

    depth: np.ndarray  # (H, W) meters
    mask: np.ndarray   # (H, W) in {0, 1}

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.depth.ndim != 2:
            raise FrameError(f"frames are 2d, got {self.depth.shape}")
        _check_depth_mask(self.depth, self.mask)

    @property
    def shape(self):
        return self.depth.shape

    def density(self) -> float:
        return float(self.mask.mean())


@dataclass
class FrameBatch:
    """A batch of sparse frames stacked into (B, 1, H, W) arrays."""

    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.depth.ndim != 4 or self.depth.shape[1] != 1:
            raise FrameError(f"frame batches are (B,1,H,W), got {self.depth.shape}")
        _check_depth_mask(self.depth, self.mask)

    @classmethod
    def from_frames(cls, frames) -> "FrameBatch":
        return cls(np.stack([f.depth for f in frames])[:, None],
                   np.stack([f.mask for f in frames])[:, None])

    @classmethod
    def single(cls, frame: SparseDepthFrame) -> "FrameBatch":
        return cls.from_frames([frame])

    @classmethod
    def replicate(cls, frame: SparseDepthFrame, n: int) -> "FrameBatch":
        return cls(np.repeat(frame.depth[None, None], n, axis=0),
                   np.repeat(frame.mask[None, None], n, axis=0))

    def to_frames(self) -> list[SparseDepthFrame]:
        return [SparseDepthFrame(self.depth[i, 0], self.mask[i, 0])
                for i in range(self.depth.shape[0])]

    @property
    def batch(self) -> int:
        return self.depth.shape[0]

    @property
    def spatial(self):
        return self.depth.shape[2], self.depth.shape[3]


def as_batch(frame) -> FrameBatch:
    if isinstance(frame, FrameBatch):
        return frame
    return FrameBatch.single(frame)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by the depth and mask networks.

    The residual trunk halves the resolution once per stage, so the encoder
    downsampling factor is 2**len(stage_channels); the final stage width must
    equal the latent channel count.
    """

    height: int = 48
    width: int = 160
    sparse_channels: tuple = (16, 16, 16)
    sparse_kernels: tuple = (11, 7, 5)
    sparse_eps: float = 1e-8
    stage_channels: tuple = (32, 48, 64, 64)
    blocks_per_stage: int = 2
    gn_groups: int = 8
    latent_channels: int = 64
    rnn_hidden: int = 64
    predictor_hidden: int = 128
    max_range: float = 100.0
    mask_threshold: float = 0.5
    feedback: str = "composed"  # or "dense": ablation, feed the dense map back

    def __post_init__(self):
        self.sparse_channels = tuple(self.sparse_channels)
        self.sparse_kernels = tuple(self.sparse_kernels)
        self.stage_channels = tuple(self.stage_channels)
        self.validate()

    @property
    def downsample(self) -> int:
        return 2 ** len(self.stage_channels)

    @property
    def latent_grid(self) -> tuple[int, int]:
        return self.height // self.downsample, self.width // self.downsample

    def validate(self) -> None:
        d = self.downsample
        if self.height % d or self.width % d:
            raise ShapeError(
                f"resolution {self.height}x{self.width} is not divisible by the "
                f"{d}x encoder downsampling ({len(self.stage_channels)} stages)")
        if len(self.sparse_channels) != len(self.sparse_kernels):
            raise ShapeError("sparse_channels and sparse_kernels lengths differ")
        if any(k % 2 == 0 for k in self.sparse_kernels):
            raise ShapeError("sparse kernels must be odd")
        if self.stage_channels[-1] != self.latent_channels:
            raise ShapeError("last trunk stage must emit latent_channels")
        for c in self.stage_channels:
            if c % self.gn_groups:
                raise ShapeError(f"stage width {c} not divisible by {self.gn_groups} groups")
        if self.sparse_eps <= 0:
            raise ShapeError("sparse_eps must be positive")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ShapeError("mask_threshold must lie in (0,1)")
        if self.max_range <= 0:
            raise ShapeError("max_range must be positive")
        if self.feedback not in ("composed", "dense"):
            raise ShapeError("feedback must be 'composed' or 'dense'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sparse_channels"] = list(self.sparse_channels)
        d["sparse_kernels"] = list(self.sparse_kernels)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class GaussianParams:
    """Per-cell mean and log-std over the latent grid."""

    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ShapeError("mu and log_sigma must share a shape")

    def sigma(self) -> Tensor:
        return T.exp(self.log_sigma)


@dataclass
class VrnnState:
    prior: R.ConvLstmState
    posterior: R.ConvLstmState
    predictor: R.ConvLstmState

    def detach(self) -> "VrnnState":
        return VrnnState(self.prior.detach(), self.posterior.detach(),
                         self.predictor.detach())


@dataclass
class NextFrameResult:
    prediction: Tensor          # (B, 1, H, W)
    prior_params: GaussianParams
    posterior_params: GaussianParams | None
    state: VrnnState


# ---------------------------------------------------------------------------
# weight containers
# ---------------------------------------------------------------------------

@dataclass
class ConvWeights:
    kernel: Tensor
    bias: Tensor


@dataclass
class NormWeights:
    gamma: Tensor
    beta: Tensor


def _init_conv(rng, out_ch, in_ch, k, zero=False) -> ConvWeights:
    if zero:
        w = np.zeros((out_ch, in_ch, k, k))
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / (in_ch * k * k)), size=(out_ch, in_ch, k, k))
    return ConvWeights(Tensor(w, requires_grad=True),
                       Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True))


def _init_norm(ch) -> NormWeights:
    return NormWeights(Tensor(np.ones((1, ch, 1, 1)), requires_grad=True),
                       Tensor(np.zeros((1, ch, 1, 1)), requires_grad=True))


class VrnnModel:
    """Encoder + prior/posterior/predictor heads + skip-connected decoder.

    ``head`` selects the output mapping: "depth" squashes into [0, max_range)
    with a saturating softplus, "mask" applies a sigmoid into (0, 1).
    """

    def __init__(self, config: ModelConfig, head: str, rng: np.random.Generator):
        if head not in ("depth", "mask"):
            raise ValueError(f"head must be 'depth' or 'mask', got {head!r}")
        self.config = config
        self.head = head
        cfg = config
        cz = cfg.latent_channels

        # sparse front end
        self.sparse_layers: list[ConvWeights] = []
        in_ch = 1
        for out_ch, k in zip(cfg.sparse_channels, cfg.sparse_kernels):
            self.sparse_layers.append(_init_conv(rng, out_ch, in_ch, k))
            in_ch = out_ch

        # residual trunk; +1 channel for the saturated validity map
        self.stages = []
        in_ch = cfg.sparse_channels[-1] + 1
        for out_ch in cfg.stage_channels:
            stage = {
                "down": _init_conv(rng, out_ch, in_ch, 3),
                "down_gn": _init_norm(out_ch),
                "blocks": [],
            }
            for _ in range(cfg.blocks_per_stage):
                stage["blocks"].append({
                    "conv1": _init_conv(rng, out_ch, out_ch, 3),
                    "gn1": _init_norm(out_ch),
                    "conv2": _init_conv(rng, out_ch, out_ch, 3),
                    "gn2": _init_norm(out_ch),
                })
            self.stages.append(stage)
            in_ch = out_ch

        # Gaussian heads: zero-initialized 1x1 convs so the untrained model
        # emits mu=0, log_sigma=0 (a unit Gaussian)
        self.prior_rnn = R.init_convlstm(cz, cfg.rnn_hidden, rng)
        self.prior_head = _init_conv(rng, 2 * cz, cfg.rnn_hidden, 1, zero=True)
        self.posterior_rnn = R.init_convlstm(cz, cfg.rnn_hidden, rng)
        self.posterior_head = _init_conv(rng, 2 * cz, cfg.rnn_hidden, 1, zero=True)

        self.predictor_rnn = R.init_convlstm(2 * cz, cfg.predictor_hidden, rng)

        # decoder: one upsampling stage per trunk stage, each consuming a skip
        self.dec_stages = []
        dec_widths = tuple(reversed(cfg.stage_channels))
        in_ch = cfg.predictor_hidden + cfg.stage_channels[-1]
        for i, out_ch in enumerate(dec_widths):
            self.dec_stages.append({
                "conv": _init_conv(rng, out_ch, in_ch, 3),
                "gn": _init_norm(out_ch),
            })
            # next stage sees the upsampled output plus the shallower skip
            skip_ch = cfg.stage_channels[len(dec_widths) - 2 - i] if i + 1 < len(dec_widths) else 0
            in_ch = out_ch + skip_ch
        head_ch = dec_widths[-1]
        self.dec_head_conv1 = _init_conv(rng, head_ch, head_ch, 3)
        self.dec_head_gn = _init_norm(head_ch)
        # the last conv also sees the full-resolution scale-bearing skip
        # (masked raw depth, mask, sparse front-end features); every other
        # feature reaching the head has been group-normalized, which strips
        # per-sample absolute scale and makes metric regression needlessly slow
        self.dec_head_conv2 = _init_conv(rng, 1, head_ch + 2 + cfg.sparse_channels[-1],
                                         3, zero=True)
        # pass-through init: the zeroed output conv starts as an identity read
        # of the skip (previous depth for the depth net, previous mask pattern
        # for the mask net), so training starts at the copy-last-frame solution
        # and only has to learn corrections. Zero-initializing a final conv
        # still feeds gradient to every weight on the first step.
        if head == "depth":
            self.dec_head_conv2.kernel.data[0, head_ch, 1, 1] = 1.0
        else:
            self.dec_head_conv2.kernel.data[0, head_ch + 1, 1, 1] = 4.0
            self.dec_head_conv2.bias.data[:] = -2.0

    # -- parameter access ---------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}

        def put(prefix, obj):
            if isinstance(obj, ConvWeights):
                params[f"{prefix}.kernel"] = obj.kernel
                params[f"{prefix}.bias"] = obj.bias
            elif isinstance(obj, NormWeights):
                params[f"{prefix}.gamma"] = obj.gamma
                params[f"{prefix}.beta"] = obj.beta
            elif isinstance(obj, R.ConvLstmWeights):
                params[f"{prefix}.kernel"] = obj.kernel
                params[f"{prefix}.bias"] = obj.bias
            else:
                raise TypeError(obj)

        for i, layer in enumerate(self.sparse_layers):
            put(f"enc.sparse{i}", layer)
        for i, st in enumerate(self.stages):
            put(f"enc.stage{i}.down", st["down"])
            put(f"enc.stage{i}.down_gn", st["down_gn"])
            for j, blk in enumerate(st["blocks"]):
                for name in ("conv1", "gn1", "conv2", "gn2"):
                    put(f"enc.stage{i}.block{j}.{name}", blk[name])
        put("prior.rnn", self.prior_rnn)
        put("prior.head", self.prior_head)
        put("posterior.rnn", self.posterior_rnn)
        put("posterior.head", self.posterior_head)
        put("predictor.rnn", self.predictor_rnn)
        for i, st in enumerate(self.dec_stages):
            put(f"dec.stage{i}.conv", st["conv"])
            put(f"dec.stage{i}.gn", st["gn"])
        put("dec.head.conv1", self.dec_head_conv1)
        put("dec.head.gn", self.dec_head_gn)
        put("dec.head.conv2", self.dec_head_conv2)
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, weights: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(weights)
        extra = set(weights) - set(params)
        if missing or extra:
            raise ShapeError(f"weight names mismatch: missing={sorted(missing)[:3]} "
                             f"extra={sorted(extra)[:3]}")
        for name, tensor in params.items():
            arr = np.asarray(weights[name], dtype=np.float64)
            if arr.shape != tensor.shape:
                raise ShapeError(f"{name}: stored shape {arr.shape} != model {tensor.shape}")
            tensor.data = arr.copy()

    def gaussian_head_names(self, which: str) -> list[str]:
        return [n for n in self.named_parameters() if n.startswith(which)]

    # -- forward ops ----------------------------------------------------------
    def init_state(self, batch: int) -> VrnnState:
        hz, wz = self.config.latent_grid
        return VrnnState(
            R.init_state(self.prior_rnn, batch, hz, wz),
            R.init_state(self.posterior_rnn, batch, hz, wz),
            R.init_state(self.predictor_rnn, batch, hz, wz),
        )

    def encode(self, frames: FrameBatch) -> tuple[Tensor, list[Tensor], Tensor]:
        """Sparse front end + residual trunk.

        Returns (h, skips shallow->deep, head_skip). The head skip bundles
        masked raw depth, the mask, and the sparse features at full
        resolution; depth is multiplied by the mask so invalid pixels are
        exact zeros no matter what the depth array holds there.
        """
        cfg = self.config
        if frames.spatial != (cfg.height, cfg.width):
            raise ShapeError(f"frame resolution {frames.spatial} does not match "
                             f"model ({cfg.height}, {cfg.width})")
        feat = MaskedFeature(Tensor(frames.depth), Tensor(frames.mask))
        for layer in self.sparse_layers:
            feat = sparse_conv2d(feat, layer.kernel, layer.bias, eps=cfg.sparse_eps)
            feat = MaskedFeature(T.relu(feat.features), feat.validity)
        head_skip = T.concat_channels([Tensor(frames.depth * frames.mask),
                                       Tensor(frames.mask), feat.features])

        x = T.concat_channels([feat.features, feat.validity])
        skips: list[Tensor] = []
        for st in self.stages:
            x = T.conv2d(x, st["down"].kernel, st["down"].bias, stride=2, pad=1)
            x = T.relu(T.group_norm(x, cfg.gn_groups, st["down_gn"].gamma, st["down_gn"].beta))
            for blk in st["blocks"]:
                y = T.conv2d(x, blk["conv1"].kernel, blk["conv1"].bias, stride=1, pad=1)
                y = T.relu(T.group_norm(y, cfg.gn_groups, blk["gn1"].gamma, blk["gn1"].beta))
                y = T.conv2d(y, blk["conv2"].kernel, blk["conv2"].bias, stride=1, pad=1)
                y = T.group_norm(y, cfg.gn_groups, blk["gn2"].gamma, blk["gn2"].beta)
                x = T.relu(T.add(x, y))
            skips.append(x)
        return skips[-1], skips, head_skip

    def _gaussian_step(self, h: Tensor, state, rnn, head):
        out, new_state = R.convlstm_step(h, state, rnn)
        raw = T.conv2d(out, head.kernel, head.bias, stride=1, pad=0)
        cz = self.config.latent_channels
        return GaussianParams(T.slice_channels(raw, 0, cz),
                              T.slice_channels(raw, cz, 2 * cz)), new_state

    def prior_step(self, h_prev: Tensor, state: R.ConvLstmState):
        return self._gaussian_step(h_prev, state, self.prior_rnn, self.prior_head)

    def posterior_step(self, h_t: Tensor, state: R.ConvLstmState):
        return self._gaussian_step(h_t, state, self.posterior_rnn, self.posterior_head)

    def sample_latent(self, params: GaussianParams, rng: np.random.Generator,
                      force_sigma_zero: bool = False) -> Tensor:
        """Reparameterized draw z = mu + sigma * eps; gradients reach mu and sigma."""
        if force_sigma_zero:
            return params.mu
        eps = Tensor(rng.standard_normal(params.mu.shape))
        return T.add(params.mu, T.mul(T.exp(params.log_sigma), eps))

    def predict_decode(self, h_prev: Tensor, z: Tensor, skips: list[Tensor],
                       head_skip: Tensor,
                       state: R.ConvLstmState) -> tuple[Tensor, R.ConvLstmState]:
        """ConvLSTM over (h, z), then decode with skip connections to H x W."""
        cfg = self.config
        g, new_state = R.convlstm_step(T.concat_channels([h_prev, z]), state,
                                       self.predictor_rnn)
        x = T.concat_channels([g, skips[-1]])
        n = len(self.dec_stages)
        for i, st in enumerate(self.dec_stages):
            x = T.conv2d(x, st["conv"].kernel, st["conv"].bias, stride=1, pad=1)
            x = T.relu(T.group_norm(x, cfg.gn_groups, st["gn"].gamma, st["gn"].beta))
            x = T.upsample_nearest(x, 2)
            if i + 1 < n:
                x = T.concat_channels([x, skips[n - 2 - i]])
        x = T.conv2d(x, self.dec_head_conv1.kernel, self.dec_head_conv1.bias, stride=1, pad=1)
        x = T.relu(T.group_norm(x, cfg.gn_groups, self.dec_head_gn.gamma, self.dec_head_gn.beta))
        # everything above has passed through a group norm at some point, so
        # inject the un-normalized skip right before the output conv
        x = T.concat_channels([x, head_skip])
        x = T.conv2d(x, self.dec_head_conv2.kernel, self.dec_head_conv2.bias, stride=1, pad=1)
        if self.head == "depth":
            # saturating softplus: nonnegative, asymptotically max_range,
            # near-identity for mid-range meters
            x = T.scale(T.tanh(T.scale(T.softplus(x), 1.0 / cfg.max_range)), cfg.max_range)
        else:
            x = T.sigmoid(x)
        return x, new_state

    def next_frame(self, frame_prev, frame_target=None, state: VrnnState | None = None,
                   rng: np.random.Generator | None = None, mode: str = "infer",
                   force_sigma_zero: bool = False) -> NextFrameResult:
        """One recurrence step: encode, sample a latent, predict the next frame.

        mode="train" samples z from the posterior of the target frame and
        returns both Gaussian parameter sets; mode="infer" samples from the
        prior and needs no target.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        prev = as_batch(frame_prev)
        if state is None:
            state = self.init_state(prev.batch)
        if rng is None:
            rng = np.random.default_rng()

        h_prev, skips, head_skip = self.encode(prev)
        prior_params, prior_state = self.prior_step(h_prev, state.prior)
        posterior_params = None
        posterior_state = state.posterior
        if mode == "train":
            if frame_target is None:
                raise ValueError("mode='train' requires a target frame")
            h_t, _, _ = self.encode(as_batch(frame_target))
            posterior_params, posterior_state = self.posterior_step(h_t, state.posterior)
            z = self.sample_latent(posterior_params, rng, force_sigma_zero)
        else:
            z = self.sample_latent(prior_params, rng, force_sigma_zero)
        prediction, predictor_state = self.predict_decode(h_prev, z, skips, head_skip,
                                                          state.predictor)
        return NextFrameResult(prediction, prior_params, posterior_params,
                               VrnnState(prior_state, posterior_state, predictor_state))


# ---------------------------------------------------------------------------
# composition and rollout
# ---------------------------------------------------------------------------

def compose(dense, mask_prob, threshold: float = 0.5) -> FrameBatch:
    """Binarize the mask at ``threshold`` and gate the dense map with it.

    Pixels whose dense value is exactly 0 are dropped from the mask as well,
    which keeps the depth>0 <=> mask=1 frame invariant airtight.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0,1)")
    d = dense.data if isinstance(dense, Tensor) else np.asarray(dense, dtype=np.float64)
    m = mask_prob.data if isinstance(mask_prob, Tensor) else np.asarray(mask_prob, dtype=np.float64)
    if d.shape != m.shape:
        raise ShapeError(f"dense {d.shape} and mask {m.shape} differ")
    binary = ((m >= threshold) & (d > 0.0)).astype(np.float64)
    return FrameBatch(d * binary, binary)


@dataclass
class RolloutStep:
    dense: np.ndarray      # (B, 1, H, W)
    mask_prob: np.ndarray  # (B, 1, H, W)
    composed: FrameBatch


@dataclass
class RolloutResult:
    steps: list[RolloutStep]
    depth_state: VrnnState
    mask_state: VrnnState


def warm_states(depth_model: VrnnModel, mask_model: VrnnModel, warmup: list,
                rng: np.random.Generator,
                force_sigma_zero: bool = False) -> tuple[VrnnState, VrnnState, FrameBatch]:
    """Drive both networks over the ground-truth conditioning frames.

    Warmup steps run in train mode (the next frame is available, so latents
    come from the posterior, as in generation-time conditioning).
    """
    if not warmup:
        raise ValueError("warmup must contain at least one frame")
    batches = [as_batch(f) for f in warmup]
    ds = depth_model.init_state(batches[0].batch)
    ms = mask_model.init_state(batches[0].batch)
    for prev, target in zip(batches, batches[1:]):
        ds = depth_model.next_frame(prev, target, ds, rng, mode="train",
                                    force_sigma_zero=force_sigma_zero).state
        ms = mask_model.next_frame(prev, target, ms, rng, mode="train",
                                   force_sigma_zero=force_sigma_zero).state
    return ds, ms, batches[-1]


def rollout(depth_model: VrnnModel, mask_model: VrnnModel, warmup: list,
            horizon: int, rng: np.random.Generator,
            force_sigma_zero: bool = False) -> RolloutResult:
    """Warm on ground truth, then predict ``horizon`` frames autoregressively.

    Each future step runs both networks in infer mode on the previously
    composed frame (or the dense map when the model is configured for the
    dense-feedback ablation).
    """
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    cfg = depth_model.config
    with T.no_grad():
        ds, ms, inp = warm_states(depth_model, mask_model, warmup, rng,
                                  force_sigma_zero=force_sigma_zero)
        steps: list[RolloutStep] = []
        for _ in range(horizon):
            rd = depth_model.next_frame(inp, None, ds, rng, mode="infer",
                                        force_sigma_zero=force_sigma_zero)
            rm = mask_model.next_frame(inp, None, ms, rng, mode="infer",
                                       force_sigma_zero=force_sigma_zero)
            ds, ms = rd.state, rm.state
            composed = compose(rd.prediction, rm.prediction, cfg.mask_threshold)
            steps.append(RolloutStep(rd.prediction.data, rm.prediction.data, composed))
            if cfg.feedback == "composed":
                inp = composed
            else:
                dense_mask = (rd.prediction.data > 0).astype(np.float64)
                inp = FrameBatch(rd.prediction.data * dense_mask, dense_mask)
    return RolloutResult(steps, ds, ms)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _write_container(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    names = sorted(arrays)
    offset = 0
    index = {}
    for name in names:
        arr = arrays[name]
        index[name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.size * 8
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack(">Q", len(header)))
        fh.write(header)
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def _read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path} is not a depthcast checkpoint")
        (hlen,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    arrays = {}
    for name, info in header["tensors"].items():
        shape = tuple(info["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=size,
                                     offset=start).reshape(shape).astype(np.float64)
    return arrays, header["meta"]


def save_checkpoint(path, models: dict[str, VrnnModel], meta: dict | None = None,
                    optimizer_state: dict[str, np.ndarray] | None = None) -> None:
    """Write every weight tensor with shape metadata plus the architecture config."""
    arrays: dict[str, np.ndarray] = {}
    heads = {}
    config = None
    for name, model in models.items():
        heads[name] = model.head
        config = model.config
        for pname, tensor in model.named_parameters().items():
            arrays[f"{name}/{pname}"] = tensor.data
    if optimizer_state:
        for oname, arr in optimizer_state.items():
            arrays[f"opt/{oname}"] = arr
    meta = dict(meta or {})
    meta["config"] = config.to_dict()
    meta["heads"] = heads
    _write_container(path, arrays, meta)


def load_checkpoint(path, rng: np.random.Generator | None = None):
    """Rebuild the stored models; returns (models, meta, optimizer_state)."""
    arrays, meta = _read_container(path)
    config = ModelConfig.from_dict(meta["config"])
    rng = rng if rng is not None else np.random.default_rng(0)
    models: dict[str, VrnnModel] = {}
    for name, head in meta["heads"].items():
        model = VrnnModel(config, head, rng)
        weights = {k[len(name) + 1:]: v for k, v in arrays.items()
                   if k.startswith(name + "/")}
        model.load_state_dict(weights)
        models[name] = model
    opt_state = {k[4:]: v for k, v in arrays.items() if k.startswith("opt/")}
    return models, meta, opt_state
