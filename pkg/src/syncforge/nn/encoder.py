"""Desk-scale residual Conv-BN-PReLU encoder with BlurPool and DropBlock.

The encoder maps an (C, H, W) input to a unit-norm embedding.  Each block
computes  y = skip(x) + PReLU(BN(Conv(x)))  with a 1x1 projection skip when
the channel count changes, optionally followed by BlurPool and DropBlock.
A bias-free dense head plus L2 normalization produces the embedding.

Parameters live in an insertion-ordered dict so checkpoint serialization
and optimizer state have a stable layout.
"""

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidConfig, InvalidPhase, ShapeError
from .ops import (
    batchnorm,
    batchnorm_backward,
    blurpool,
    blurpool_backward,
    conv2d,
    conv2d_backward,
    dropblock,
    dropblock_backward,
    prelu,
    prelu_backward,
)

_MODES = ("train", "eval", "bn_tune")


@dataclass(frozen=True)
class TrainPhase:
    """mode plus whether DropBlock is active; bn_tune forces drop off."""

    mode: str
    drop_enabled: bool = None

    def __post_init__(self):
        if self.mode not in _MODES:
            raise InvalidPhase(f"unknown mode {self.mode!r}")
        if self.drop_enabled is None:
            object.__setattr__(self, "drop_enabled", self.mode == "train")
        if self.mode == "bn_tune" and self.drop_enabled:
            raise InvalidPhase("bn_tune requires drop_enabled=False")
        if self.mode == "eval" and self.drop_enabled:
            raise InvalidPhase("eval never drops")

    @classmethod
    def train(cls, drop_enabled: bool = True):
        return cls("train", drop_enabled)

    @classmethod
    def eval(cls):
        return cls("eval", False)

    @classmethod
    def bn_tune(cls):
        return cls("bn_tune", False)

    @property
    def uses_batch_stats(self) -> bool:
        return self.mode in ("train", "bn_tune")


@dataclass(frozen=True)
class EncoderArch:
    input_shape: tuple          # (C, H, W)
    channels: tuple             # out-channels per residual block
    embed_dim: int = 64
    kernel_size: int = 3
    pool_after: tuple = ()      # block indices followed by BlurPool
    dropblocks: tuple = ()      # (block_idx, drop_rate, block_size, '2d'|'3d')

    def __post_init__(self):
        if len(self.input_shape) != 3 or any(s < 1 for s in self.input_shape):
            raise InvalidConfig(f"bad input_shape {self.input_shape}")
        if not self.channels:
            raise InvalidConfig("need at least one block")
        if self.kernel_size % 2 != 1:
            raise InvalidConfig("kernel_size must be odd (same-size padding)")
        if self.embed_dim < 1:
            raise InvalidConfig("embed_dim must be positive")
        n = len(self.channels)
        if any(not 0 <= i < n for i in self.pool_after):
            raise InvalidConfig("pool_after references a missing block")
        for spec in self.dropblocks:
            idx, rate, block, dims = spec
            if not 0 <= idx < n:
                raise InvalidConfig(f"dropblock after missing block {idx}")
            if dims not in ("2d", "3d"):
                raise InvalidConfig(f"dropblock dims {dims!r}")
            if not (0 <= rate < 1) or block < 1:
                raise InvalidConfig(f"bad dropblock spec {spec}")

    def feature_shape(self) -> tuple:
        """(C, H, W) entering the dense head."""
        _, h, w = self.input_shape
        c = self.input_shape[0]
        for i, c_out in enumerate(self.channels):
            c = c_out
            if i in self.pool_after:
                h = -(-h // 2)
                w = -(-w // 2)
        return (c, h, w)

    def flat_dim(self) -> int:
        c, h, w = self.feature_shape()
        return c * h * w


def is_bn_param(name: str) -> bool:
    return name.endswith("bn_gamma") or name.endswith("bn_beta")


class ToyEncoder:
    """Parameter + running-stat container for one encoder."""

    def __init__(self, arch: EncoderArch, params: dict, stats: dict):
        self.arch = arch
        self.params = params
        self.stats = stats

    @classmethod
    def build(cls, arch: EncoderArch, rng: np.random.Generator = None):
        rng = rng or np.random.default_rng(0)
        k = arch.kernel_size
        params, stats = {}, {}
        c_in = arch.input_shape[0]
        for i, c_out in enumerate(arch.channels):
            fan_in = c_in * k * k
            params[f"block{i}.conv_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                                    (c_out, c_in, k, k))
            if c_out != c_in:
                params[f"block{i}.proj_w"] = rng.normal(0.0, np.sqrt(2.0 / c_in),
                                                        (c_out, c_in, 1, 1))
            params[f"block{i}.bn_gamma"] = np.ones(c_out)
            params[f"block{i}.bn_beta"] = np.zeros(c_out)
            params[f"block{i}.prelu_slope"] = np.array(0.25)
            stats[f"block{i}.bn_rmean"] = np.zeros(c_out)
            stats[f"block{i}.bn_rvar"] = np.ones(c_out)
            c_in = c_out
        flat = arch.flat_dim()
        params["head.w"] = rng.normal(0.0, 1.0 / np.sqrt(flat), (arch.embed_dim, flat))
        return cls(arch, params, stats)

    def copy(self):
        return ToyEncoder(self.arch,
                          {k: v.copy() for k, v in self.params.items()},
                          {k: v.copy() for k, v in self.stats.items()})

    def zero_like_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # ---------------------------------------------------------- forward

    def forward_cached(self, x, phase: TrainPhase, rng=None, update_stats=True,
                       bn_momentum: float = None):
        """Returns (embeddings, cache).  x is (N,C,H,W) or a single (C,H,W).

        bn_momentum overrides the running-stat blend for this call; feeding
        1/t on the t-th batch of a stream turns the stats into a cumulative
        average over the stream instead of an exponential one.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.arch.input_shape):
            raise ShapeError(
                f"input shape {x.shape} does not match encoder input "
                f"{self.arch.input_shape}")
        training = phase.uses_batch_stats
        drop_on = phase.mode == "train" and phase.drop_enabled
        if drop_on and rng is None:
            raise InvalidConfig("training with DropBlock needs an rng")
        pad = (self.arch.kernel_size - 1) // 2
        steps = []
        for i in range(len(self.arch.channels)):
            p = self.params
            z, conv_cache = conv2d(x, p[f"block{i}.conv_w"], padding=pad)
            bn_out, bn_cache, new_rm, new_rv = batchnorm(
                z, p[f"block{i}.bn_gamma"], p[f"block{i}.bn_beta"],
                self.stats[f"block{i}.bn_rmean"], self.stats[f"block{i}.bn_rvar"],
                training=training,
                **({} if bn_momentum is None else {"momentum": bn_momentum}))
            if training and update_stats:
                self.stats[f"block{i}.bn_rmean"] = new_rm
                self.stats[f"block{i}.bn_rvar"] = new_rv
            branch, pr_cache = prelu(bn_out, float(p[f"block{i}.prelu_slope"]))
            proj_cache = None
            if f"block{i}.proj_w" in p:
                skip, proj_cache = conv2d(x, p[f"block{i}.proj_w"])
            else:
                skip = x
            y = skip + branch
            pool_cache = None
            if i in self.arch.pool_after:
                y, pool_cache = blurpool(y)
            drop_caches = []
            for spec in self.arch.dropblocks:
                if spec[0] != i:
                    continue
                _, rate, block, dims = spec
                y, dc = dropblock(y, rate, block, dims, training=drop_on, rng=rng)
                drop_caches.append(dc)
            steps.append((conv_cache, bn_cache, pr_cache, proj_cache,
                          pool_cache, drop_caches))
            x = y
        feat_shape = x.shape
        flat = x.reshape(x.shape[0], -1)
        z = flat @ self.params["head.w"].T
        norms = np.linalg.norm(z, axis=1, keepdims=True)
        emb = z / norms
        cache = (steps, feat_shape, flat, z, norms, emb, single)
        return (emb[0] if single else emb), cache

    # --------------------------------------------------------- backward

    def backward(self, cache, grad_emb):
        """Gradient of a scalar loss wrt all params given d(loss)/d(embedding).

        Returns (grads dict, grad_input).
        """
        steps, feat_shape, flat, z, norms, emb, single = cache
        g = np.asarray(grad_emb, dtype=np.float64)
        if single:
            g = g[None]
        # through y = z/|z|:  dz = (g - y (y.g)) / |z|
        dot = (emb * g).sum(axis=1, keepdims=True)
        gz = (g - emb * dot) / norms
        grads = {"head.w": gz.T @ flat}
        gflat = gz @ self.params["head.w"]
        gx = gflat.reshape(feat_shape)
        for i in reversed(range(len(self.arch.channels))):
            conv_cache, bn_cache, pr_cache, proj_cache, pool_cache, drop_caches = steps[i]
            for dc in reversed(drop_caches):
                gx = dropblock_backward(gx, dc)
            if pool_cache is not None:
                gx = blurpool_backward(gx, pool_cache)
            g_branch, g_slope = prelu_backward(gx, pr_cache)
            g_bn_in, g_gamma, g_beta = batchnorm_backward(g_branch, bn_cache)
            g_from_conv, g_conv_w = conv2d_backward(g_bn_in, conv_cache)
            if proj_cache is not None:
                g_skip_in, g_proj_w = conv2d_backward(gx, proj_cache)
                grads[f"block{i}.proj_w"] = g_proj_w
            else:
                g_skip_in = gx
            grads[f"block{i}.conv_w"] = g_conv_w
            grads[f"block{i}.bn_gamma"] = g_gamma
            grads[f"block{i}.bn_beta"] = g_beta
            grads[f"block{i}.prelu_slope"] = np.array(g_slope)
            gx = g_from_conv + g_skip_in
        ordered = {k: grads[k] for k in self.params}
        return ordered, (gx[0] if single else gx)


def encoder_forward(encoder: ToyEncoder, x, phase: TrainPhase, rng=None,
                    update_stats=True):
    """Unit-norm embedding(s) for x; see ToyEncoder.forward_cached."""
    emb, _ = encoder.forward_cached(x, phase, rng=rng, update_stats=update_stats)
    return emb


def encoder_forward_backward(encoder: ToyEncoder, x, phase: TrainPhase,
                             grad_emb, rng=None, update_stats=True):
    """Forward plus backward for a fixed upstream gradient.

    grad_emb may be an array matching the embedding shape or a callable
    emb -> array.  Returns (emb, grads, grad_input).
    """
    emb, cache = encoder.forward_cached(x, phase, rng=rng, update_stats=update_stats)
    if callable(grad_emb):
        grad_emb = grad_emb(emb)
    grads, gx = encoder.backward(cache, grad_emb)
    return emb, grads, gx


def bn_tune_step(encoder: ToyEncoder, batch, phase: TrainPhase,
                 loss_grad=None, lr: float = 1e-3, bn_momentum: float = None):
    """One drop-and-tune step: refresh running stats, optionally nudge gamma/beta.

    Every non-BN parameter is left bit-identical.  loss_grad, if given, maps
    the batch embeddings to d(loss)/d(embeddings); gamma and beta then take
    one SGD step against it.  bn_momentum=1/t on the t-th call averages the
    stats cumulatively.  Returns the batch embeddings.
    """
    if phase.mode != "bn_tune":
        raise InvalidPhase(f"bn_tune_step called in mode {phase.mode!r}")
    emb, cache = encoder.forward_cached(batch, phase, update_stats=True,
                                        bn_momentum=bn_momentum)
    if loss_grad is not None:
        g = loss_grad(emb) if callable(loss_grad) else np.asarray(loss_grad)
        grads, _ = encoder.backward(cache, g)
        for name in encoder.params:
            if is_bn_param(name):
                encoder.params[name] = encoder.params[name] - lr * grads[name]
    return emb


def default_visual(embed_dim: int = 64, rng=None) -> ToyEncoder:
    """Encoder for stacked image windows: 15 channels (5 RGB frames), 32x64."""
    arch = EncoderArch(input_shape=(15, 32, 64), channels=(32, 64),
                       embed_dim=embed_dim, pool_after=(0, 1),
                       dropblocks=((0, 0.1, 3, "3d"), (1, 0.1, 3, "3d")))
    return ToyEncoder.build(arch, rng or np.random.default_rng(1))


def default_audio(embed_dim: int = 64, rng=None) -> ToyEncoder:
    """Encoder for one 32x80 mel window."""
    arch = EncoderArch(input_shape=(1, 32, 80), channels=(32, 64),
                       embed_dim=embed_dim, pool_after=(0, 1),
                       dropblocks=((0, 0.1, 3, "3d"), (1, 0.1, 3, "3d")))
    return ToyEncoder.build(arch, rng or np.random.default_rng(2))
