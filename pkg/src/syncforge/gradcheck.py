"""Finite-difference verification of every hand-written backward pass.

Each check draws random small instances, compares the analytic gradient
against central differences at 64-bit precision, and reports the worst
relative error seen.  The suite is the ground truth the loss and kernel
implementations answer to; it also powers the `gradcheck` CLI command.

Relative error is ||a - n||_inf / max(||a||_inf, ||n||_inf, 1e-6): the
floor keeps genuinely tiny gradients from turning roundoff into a ratio
of noise over noise.
"""

import time
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput
from .losses import (
    BbceConfig,
    ScoreBatch,
    Temperature,
    bbce_loss,
    bce_loss,
    infonce_loss,
    pm_loss,
    syncnet_contrastive_loss,
    PairBatch,
)
from .nn.encoder import EncoderArch, ToyEncoder, TrainPhase
from .nn import ops

EPS = 1e-6
TOLERANCE = 1e-5


def numerical_grad(f, x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central finite differences of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(analytic, numeric) -> float:
    """Error of the full gradient vector, relative to its own scale.

    Accepts single arrays or sequences of arrays (one instance's gradient
    blocks).  Normalizing per block would measure FD roundoff against
    near-zero saturated components; one instance is one vector.
    """
    if not isinstance(analytic, (list, tuple)):
        analytic, numeric = [analytic], [numeric]
    a = np.concatenate([np.ravel(np.asarray(v, dtype=np.float64))
                        for v in analytic])
    n = np.concatenate([np.ravel(np.asarray(v, dtype=np.float64))
                        for v in numeric])
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-6)
    return float(np.abs(a - n).max(initial=0.0) / scale)


@dataclass(frozen=True)
class CheckResult:
    name: str
    instances: int
    max_rel_err: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE

    def to_json(self) -> dict:
        return {"name": self.name, "instances": self.instances,
                "max_rel_err": self.max_rel_err, "passed": self.passed}


@dataclass(frozen=True)
class SuiteReport:
    results: tuple
    runtime_seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def total_instances(self) -> int:
        return sum(r.instances for r in self.results)

    def failures(self):
        return [r for r in self.results if not r.passed]

    def to_json(self) -> dict:
        return {"results": [r.to_json() for r in self.results],
                "total_instances": self.total_instances,
                "runtime_seconds": self.runtime_seconds,
                "tolerance": TOLERANCE,
                "passed": self.passed}

    def to_text(self) -> str:
        lines = []
        for r in self.results:
            mark = "ok  " if r.passed else "FAIL"
            lines.append(f"{mark} {r.name:<22} n={r.instances:<5} "
                         f"max_rel_err={r.max_rel_err:.3e}")
        lines.append(f"total instances: {self.total_instances}  "
                     f"runtime: {self.runtime_seconds:.1f}s  "
                     f"tolerance: {TOLERANCE:g}")
        return "\n".join(lines)


def _flip(grads, fault: bool):
    # fault injection for the self-test path: a sign flip is the classic
    # backward-pass bug shape and must trip the suite
    return [-g for g in grads] if fault else list(grads)


# ------------------------------------------------------------- loss checks


def _random_scores(rng):
    B = int(rng.integers(1, 5))
    nh = int(rng.integers(1, 5))
    ne = int(rng.integers(0, 5))
    phi = rng.uniform(-0.9, 0.9, (B, 1 + nh + ne))
    temp = Temperature.from_tau(float(rng.uniform(0.05, 0.5)))
    scores = ScoreBatch(phi[:, 0], phi[:, 1:1 + nh], phi[:, 1 + nh:], temp)
    return scores, nh, ne


def _check_bbce(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        scores, nh, ne = _random_scores(rng)
        w_e = float(rng.uniform(0.0, 1.0)) if ne else 0.0
        cfg = BbceConfig(N_h=nh, N_e=ne, w_e=w_e)
        simplified = bool(rng.integers(0, 2))

        def run(pos, hard, easy, lit):
            sb = ScoreBatch(pos, hard, easy, Temperature(lit))
            return bbce_loss(sb, cfg, simplified=simplified)

        _, g = run(scores.pos, scores.hard, scores.easy,
                   scores.temperature.log_inv_tau)
        analytic = _flip([g.pos, g.hard, g.easy,
                          np.float64(g.log_inv_tau)], fault)
        lit0 = scores.temperature.log_inv_tau
        numeric = [
            numerical_grad(lambda p: run(p, scores.hard, scores.easy, lit0)[0],
                           scores.pos.copy()),
            numerical_grad(lambda h: run(scores.pos, h, scores.easy, lit0)[0],
                           scores.hard.copy()),
            numerical_grad(lambda e: run(scores.pos, scores.hard, e, lit0)[0],
                           scores.easy.copy()),
            numerical_grad(lambda l: run(scores.pos, scores.hard, scores.easy,
                                         float(l))[0],
                           np.float64(lit0)),
        ]
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _check_infonce(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        B = int(rng.integers(1, 5))
        k = int(rng.integers(1, 7))
        phi = rng.uniform(-0.9, 0.9, (B, 1 + k))
        lit0 = Temperature.from_tau(float(rng.uniform(0.05, 0.5))).log_inv_tau
        split = int(rng.integers(1, k + 1))

        def run(pos, hard, easy, lit):
            sb = ScoreBatch(pos, hard, easy, Temperature(lit))
            return infonce_loss(sb)

        pos, hard, easy = phi[:, 0], phi[:, 1:1 + split], phi[:, 1 + split:]
        _, g = run(pos, hard, easy, lit0)
        analytic = _flip([g.pos, g.hard, g.easy,
                          np.float64(g.log_inv_tau)], fault)
        numeric = [
            numerical_grad(lambda p: run(p, hard, easy, lit0)[0], pos.copy()),
            numerical_grad(lambda h: run(pos, h, easy, lit0)[0], hard.copy()),
            numerical_grad(lambda e: run(pos, hard, e, lit0)[0], easy.copy()),
            numerical_grad(lambda l: run(pos, hard, easy, float(l))[0],
                           np.float64(lit0)),
        ]
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _check_bce(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(1, 9))
        p = rng.uniform(0.02, 0.98, k)
        y = rng.integers(0, 2, k).astype(np.float64)
        _, g = bce_loss(p, y)
        a = _flip([g], fault)[0]
        m = numerical_grad(lambda q: bce_loss(q, y)[0], p.copy())
        worst = max(worst, rel_error(a, m))
    return worst


def _check_contrastive(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(1, 9))
        margin = float(rng.uniform(0.5, 1.5))
        # stay away from the hinge corner at d = margin and from d = 0
        d = rng.uniform(0.05, 2.0, k)
        d = d[np.abs(d - margin) > 0.05]
        if d.size == 0:
            d = np.array([margin / 2.0])
        y = rng.integers(0, 2, d.size).astype(np.float64)

        def run(dist):
            return syncnet_contrastive_loss(PairBatch(y, dist, margin))

        _, g = run(d)
        a = _flip([g], fault)[0]
        m = numerical_grad(lambda q: run(q)[0], d.copy())
        worst = max(worst, rel_error(a, m))
    return worst


def _check_pm(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        k = int(rng.integers(2, 9))
        d = rng.uniform(0.05, 2.0, k)
        _, g = pm_loss(d)
        a = _flip([g], fault)[0]
        m = numerical_grad(lambda q: pm_loss(q)[0], d.copy())
        worst = max(worst, rel_error(a, m))
    return worst


# ----------------------------------------------------------- kernel checks


def _proj_loss(out, R):
    return float((out * R).sum())


def _check_conv2d(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        N, C, O = (int(rng.integers(1, 3)) for _ in range(3))
        H, W = int(rng.integers(3, 7)), int(rng.integers(3, 7))
        kh = int(rng.integers(1, min(4, H + 1)))
        kw = int(rng.integers(1, min(4, W + 1)))
        padding = int(rng.integers(0, 2))
        x = rng.standard_normal((N, C, H, W))
        w = rng.standard_normal((O, C, kh, kw))
        out, cache = ops.conv2d(x, w, padding=padding)
        R = rng.standard_normal(out.shape)
        gx, gw = ops.conv2d_backward(R, cache)
        gx, gw = _flip([gx, gw], fault)
        nx = numerical_grad(
            lambda q: _proj_loss(ops.conv2d(q, w, padding=padding)[0], R),
            x.copy())
        nw = numerical_grad(
            lambda q: _proj_loss(ops.conv2d(x, q, padding=padding)[0], R),
            w.copy())
        worst = max(worst, rel_error([gx, gw], [nx, nw]))
    return worst


def _check_batchnorm(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        N = int(rng.integers(2, 5))
        C = int(rng.integers(1, 4))
        H, W = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        x = rng.standard_normal((N, C, H, W))
        gamma = rng.uniform(0.5, 1.5, C)
        beta = rng.standard_normal(C)
        rmean = rng.standard_normal(C)
        rvar = rng.uniform(0.5, 2.0, C)
        training = bool(rng.integers(0, 2))

        def fwd(q, g_, b_):
            out, _, _, _ = ops.batchnorm(q, g_, b_, rmean, rvar, training)
            return out

        out, cache, _, _ = ops.batchnorm(x, gamma, beta, rmean, rvar, training)
        R = rng.standard_normal(out.shape)
        gx, gg, gb = ops.batchnorm_backward(R, cache)
        gx, gg, gb = _flip([gx, gg, gb], fault)
        nx = numerical_grad(lambda q: _proj_loss(fwd(q, gamma, beta), R),
                            x.copy())
        ng = numerical_grad(lambda q: _proj_loss(fwd(x, q, beta), R),
                            gamma.copy())
        nb = numerical_grad(lambda q: _proj_loss(fwd(x, gamma, q), R),
                            beta.copy())
        worst = max(worst, rel_error([gx, gg, gb], [nx, ng, nb]))
    return worst


def _check_prelu(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        shape = tuple(int(rng.integers(1, 5)) for _ in range(3))
        x = rng.standard_normal(shape)
        x = np.where(np.abs(x) < 0.05, 0.1, x)   # keep clear of the kink
        slope = np.array(float(rng.uniform(0.05, 0.9)))
        out, cache = ops.prelu(x, slope)
        R = rng.standard_normal(out.shape)
        gx, gs = ops.prelu_backward(R, cache)
        gx, gs = _flip([gx, gs], fault)
        nx = numerical_grad(lambda q: _proj_loss(ops.prelu(q, slope)[0], R),
                            x.copy())
        ns = numerical_grad(lambda q: _proj_loss(ops.prelu(x, q)[0], R),
                            slope.copy())
        worst = max(worst, rel_error([gx, gs], [nx, ns]))
    return worst


def _check_blurpool(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        N, C = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        H, W = int(rng.integers(2, 8)), int(rng.integers(2, 8))
        x = rng.standard_normal((N, C, H, W))
        out, cache = ops.blurpool(x)
        R = rng.standard_normal(out.shape)
        gx = ops.blurpool_backward(R, cache)
        gx = _flip([gx], fault)[0]
        nx = numerical_grad(lambda q: _proj_loss(ops.blurpool(q)[0], R),
                            x.copy())
        worst = max(worst, rel_error(gx, nx))
    return worst


def _check_dropblock(rng, n, fault=False):
    worst = 0.0
    for _ in range(n):
        N, C = int(rng.integers(1, 3)), int(rng.integers(2, 4))
        H, W = int(rng.integers(4, 7)), int(rng.integers(4, 7))
        dims = "3d" if rng.integers(0, 2) else "2d"
        block = int(rng.integers(1, 3))
        seed = int(rng.integers(0, 2 ** 31))
        x = rng.standard_normal((N, C, H, W))

        def fwd(q):
            # fresh identical-seed rng per call: the mask draw must not move
            out, _ = ops.dropblock(q, 0.2, block, dims, True,
                                   np.random.default_rng(seed))
            return out

        out, gate = ops.dropblock(x, 0.2, block, dims, True,
                                  np.random.default_rng(seed))
        R = rng.standard_normal(out.shape)
        gx = ops.dropblock_backward(R, gate)
        gx = _flip([gx], fault)[0]
        nx = numerical_grad(lambda q: _proj_loss(fwd(q), R), x.copy())
        worst = max(worst, rel_error(gx, nx))
    return worst


def _check_encoder(rng, n, fault=False, coords_per_instance=20):
    arch = EncoderArch(input_shape=(1, 4, 6), channels=(3, 4), embed_dim=4,
                       kernel_size=3, pool_after=(1,), dropblocks=())
    phase = TrainPhase.train(drop_enabled=False)
    worst = 0.0
    for _ in range(n):
        enc = ToyEncoder.build(arch, rng)
        x = rng.standard_normal((2, *arch.input_shape))
        R = rng.standard_normal((2, arch.embed_dim))

        def fwd():
            emb, _ = enc.forward_cached(x, phase, update_stats=False)
            return _proj_loss(emb, R)

        emb, cache = enc.forward_cached(x, phase, update_stats=False)
        grads, gx = enc.backward(cache, R)
        names = list(enc.params)
        anas, nums = [], []

        def probe(arr, idx, ana):
            orig = arr.flat[idx]
            arr.flat[idx] = orig + EPS
            hi = fwd()
            arr.flat[idx] = orig - EPS
            lo = fwd()
            arr.flat[idx] = orig
            anas.append(-ana if fault else ana)
            nums.append((hi - lo) / (2.0 * EPS))

        for k in rng.integers(0, len(names), coords_per_instance):
            name = names[int(k)]
            idx = int(rng.integers(enc.params[name].size))
            probe(enc.params[name], idx, grads[name].flat[idx])
        # a few input coordinates as well
        for _ in range(4):
            idx = int(rng.integers(x.size))
            probe(x, idx, gx.flat[idx])
        worst = max(worst, rel_error(np.array(anas), np.array(nums)))
    return worst


_CHECKS = (
    ("loss/bbce", _check_bbce, 200),
    ("loss/infonce", _check_infonce, 150),
    ("loss/bce", _check_bce, 150),
    ("loss/contrastive", _check_contrastive, 150),
    ("loss/pm", _check_pm, 150),
    ("kernel/conv2d", _check_conv2d, 60),
    ("kernel/batchnorm", _check_batchnorm, 60),
    ("kernel/prelu", _check_prelu, 60),
    ("kernel/blurpool", _check_blurpool, 40),
    ("kernel/dropblock", _check_dropblock, 40),
    ("encoder/full", _check_encoder, 30),
)

FAULT_NAMES = tuple(name for name, _, _ in _CHECKS)


def run_suite(seed: int = 0, inject_fault: str = None) -> SuiteReport:
    """Run every check; inject_fault flips the named check's analytic sign.

    The fault hook exists so the failure path of the suite (and of the CLI
    wrapping it) is itself testable.
    """
    if inject_fault is not None and inject_fault not in FAULT_NAMES:
        raise InvalidInput(
            f"unknown fault {inject_fault!r}; choose from {FAULT_NAMES}")
    t0 = time.perf_counter()
    results = []
    for name, fn, n in _CHECKS:
        rng = np.random.default_rng(seed)
        err = fn(rng, n, fault=(name == inject_fault))
        results.append(CheckResult(name=name, instances=n, max_rel_err=err))
    return SuiteReport(results=tuple(results),
                       runtime_seconds=time.perf_counter() - t0)
