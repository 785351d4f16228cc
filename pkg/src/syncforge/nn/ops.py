"""Forward/backward kernels: conv2d, batchnorm, PReLU, BlurPool, DropBlock.

Every forward returns (output, cache); the matching *_backward consumes the
upstream gradient plus that cache and returns analytic gradients.  All
arithmetic is float64; each backward is checked against central finite
differences in the test suite and by the gradcheck command.

Tensors are NCHW.  Convolutions are stride-1 cross-correlations; all
spatial reduction goes through blurpool.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import InvalidBatch, InvalidConfig, ShapeError


# ---------------------------------------------------------------- conv2d


def conv2d(x, w, stride: int = 1, padding: int = 0):
    """Cross-correlate x (N,C,H,W) with w (O,C,kh,kw).

    padding adds that many zero rows/columns on each spatial side, so
    padding=(k-1)//2 keeps odd-kernel outputs the same size as the input.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if stride != 1:
        raise InvalidConfig("conv2d is stride-1 only; reduce with blurpool")
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-D input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, weights {w.shape[1]}")
    kh, kw = w.shape[2:]
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"kernel {w.shape[2:]} larger than padded input {xp.shape[2:]}")
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("nchwuv,ocuv->nohw", win, w, optimize=True)
    return out, (x.shape, xp, w, padding)


def conv2d_backward(grad, cache):
    """Returns (grad_input, grad_weights)."""
    x_shape, xp, w, padding = cache
    grad = np.asarray(grad, dtype=np.float64)
    kh, kw = w.shape[2:]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    grad_w = np.einsum("nohw,nchwuv->ocuv", grad, win, optimize=True)
    gp = np.pad(grad, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
    grad_xp = np.einsum("nohwuv,ocuv->nchw", gwin, w[:, :, ::-1, ::-1], optimize=True)
    if padding:
        grad_x = grad_xp[:, :, padding:padding + x_shape[2], padding:padding + x_shape[3]]
    else:
        grad_x = grad_xp
    return np.ascontiguousarray(grad_x), grad_w


# ------------------------------------------------------------- batchnorm


def batchnorm(x, gamma, beta, running_mean, running_var, training: bool,
              momentum: float = 0.1, eps: float = 1e-5):
    """Per-channel normalization over all non-channel axes.

    x is (N, C, ...) with the channel axis second.  Training mode uses
    biased batch statistics and returns refreshed running stats; eval
    normalizes by the running stats passed in (returned unchanged).

    Returns (out, cache, new_running_mean, new_running_var).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2:
        raise ShapeError("batchnorm input needs at least (N, C)")
    C = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta)):
        if np.shape(arr) != (C,):
            raise ShapeError(f"{name} must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    shape = (1, C) + (1,) * (x.ndim - 2)

    if training:
        if x.shape[0] < 2:
            raise InvalidBatch("batchnorm needs batch size >= 2 in training mode")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)  # biased, matches the normalization below
        new_rm = (1.0 - momentum) * running_mean + momentum * mean
        new_rv = (1.0 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    cache = (xhat, gamma, inv_std, axes, shape, training)
    return out, cache, new_rm, new_rv


def batchnorm_backward(grad, cache):
    """Returns (grad_x, grad_gamma, grad_beta)."""
    xhat, gamma, inv_std, axes, shape, training = cache
    grad = np.asarray(grad, dtype=np.float64)
    grad_gamma = (grad * xhat).sum(axis=axes)
    grad_beta = grad.sum(axis=axes)
    g = grad * gamma.reshape(shape)
    if training:
        # batch stats depend on x, hence the two mean-subtraction terms
        grad_x = inv_std.reshape(shape) * (
            g
            - g.mean(axis=axes).reshape(shape)
            - xhat * (g * xhat).mean(axis=axes).reshape(shape)
        )
    else:
        grad_x = g * inv_std.reshape(shape)
    return grad_x, grad_gamma, grad_beta


# ----------------------------------------------------------------- prelu


def prelu(x, slope: float):
    """x where positive, slope*x elsewhere.  slope is a learnable scalar."""
    x = np.asarray(x, dtype=np.float64)
    pos = x > 0
    out = np.where(pos, x, slope * x)
    return out, (x, pos, slope)


def prelu_backward(grad, cache):
    """Returns (grad_x, grad_slope)."""
    x, pos, slope = cache
    grad = np.asarray(grad, dtype=np.float64)
    grad_x = np.where(pos, grad, slope * grad)
    grad_slope = float((grad * np.where(pos, 0.0, x)).sum())
    return grad_x, grad_slope


# -------------------------------------------------------------- blurpool


def _blur_matrix(n: int, kernel) -> np.ndarray:
    """Dense matrix applying reflect-pad + kernel + stride-2 subsample along one axis."""
    k = np.asarray(kernel, dtype=np.float64)
    k = k / k.sum()
    r = k.size // 2
    pad_index = list(range(r, 0, -1)) + list(range(n)) + list(range(n - 2, n - 2 - r, -1))
    m = -(-n // 2)
    B = np.zeros((m, n))
    for i in range(m):
        for t in range(k.size):
            B[i, pad_index[2 * i + t]] += k[t]
    return B


def blurpool(x, kernel=(1.0, 2.0, 1.0), stride: int = 2):
    """Separable low-pass filter then 2x subsample on H and W.

    Output spatial size is ceil(n/2) per axis.  The default kernel is the
    binomial [1,2,1]/4; boundaries reflect.
    """
    x = np.asarray(x, dtype=np.float64)
    if stride != 2:
        raise InvalidConfig("blurpool supports stride 2 only")
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    H, W = x.shape[2:]
    if H < 2 or W < 2:
        raise ShapeError("spatial dims must be >= 2")
    Bh = _blur_matrix(H, kernel)
    Bw = _blur_matrix(W, kernel)
    out = np.einsum("ph,qw,nchw->ncpq", Bh, Bw, x, optimize=True)
    return out, (Bh, Bw)


def blurpool_backward(grad, cache):
    Bh, Bw = cache
    grad = np.asarray(grad, dtype=np.float64)
    return np.einsum("ph,qw,ncpq->nchw", Bh, Bw, grad, optimize=True)


# ------------------------------------------------------------- dropblock


def dropblock(x, drop_rate: float, block_size: int, dims: str, training: bool,
              rng: np.random.Generator):
    """Zero contiguous feature blocks, rescaling survivors per sample.

    dims='2d' drops (block x block) patches independently per channel;
    '3d' drops (block x block x block) volumes spanning the channel axis
    too.  Seed probability follows the DropBlock calibration so the mean
    dropped fraction approximates drop_rate.  Identity when not training
    or when drop_rate is 0.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeError(f"expected NCHW input, got shape {x.shape}")
    if not 0.0 <= drop_rate < 1.0:
        raise InvalidConfig(f"drop_rate {drop_rate} outside [0, 1)")
    if dims not in ("2d", "3d"):
        raise InvalidConfig(f"dims must be '2d' or '3d', got {dims!r}")
    if not training or drop_rate == 0.0:
        return x.copy(), None

    N, C, H, W = x.shape
    feats = (C, H, W) if dims == "3d" else (H, W)
    for f in feats:
        if block_size > f:
            raise InvalidConfig(f"block_size {block_size} exceeds feature size {f}")
    valid = [f - block_size + 1 for f in feats]
    gamma = drop_rate / block_size ** len(feats)
    for f, v in zip(feats, valid):
        gamma *= f / v

    mask = np.ones((N, C, H, W))
    if dims == "3d":
        seeds = rng.random((N,) + tuple(valid)) < gamma
        for n, c0, i0, j0 in zip(*np.nonzero(seeds)):
            mask[n, c0:c0 + block_size, i0:i0 + block_size, j0:j0 + block_size] = 0.0
    else:
        seeds = rng.random((N, C) + tuple(valid)) < gamma
        for n, c, i0, j0 in zip(*np.nonzero(seeds)):
            mask[n, c, i0:i0 + block_size, j0:j0 + block_size] = 0.0

    kept = mask.reshape(N, -1).sum(axis=1)
    scale = np.where(kept > 0, mask[0].size / np.maximum(kept, 1.0), 1.0)
    gate = mask * scale[:, None, None, None]
    return x * gate, gate


def dropblock_backward(grad, cache):
    if cache is None:
        return np.asarray(grad, dtype=np.float64).copy()
    return np.asarray(grad, dtype=np.float64) * cache
