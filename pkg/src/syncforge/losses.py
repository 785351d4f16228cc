"""Synchronization losses with analytic gradients.

Five interchangeable objectives over (positive, hard-negative, easy-negative)
cosine similarities:

- bbce_loss: balanced binary cross entropy; one positive term plus hard and
  easy negative terms whose weights sum to one, halved.
- infonce_loss: softmax cross entropy of the positive against all negatives.
- bce_loss: plain binary cross entropy over probabilities.
- syncnet_contrastive_loss: margin loss over embedding distances.
- pm_loss: multi-way classification over inverse distances.

Everything is computed in log space (log-sigmoid / log-sum-exp), because the
verbatim formulas underflow at small temperature.  Gradients come back in a
LossGrads record: d(loss)/d(phi) per similarity plus d(loss)/d(log_inv_tau)
for the learnable temperature.  Each gradient is finite-difference checked
in the test suite and by ``syncforge gradcheck``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDistance, InvalidConfig, InvalidInput

TAU_INIT = 0.1
TAU_MIN = 0.01
TAU_MAX = 10.0

LOSS_NAMES = ("bbce", "infonce", "bce", "contrastive", "pm")


# ------------------------------------------------------------- numerics


def _softplus(z):
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


# ---------------------------------------------------------- temperature


@dataclass
class Temperature:
    """Learnable temperature, parameterized as log(1/tau).

    tau = exp(-log_inv_tau) clamped to [0.01, 10]; the clamp gates the
    gradient to zero, like a projected update.  Starts at tau = 0.1.
    """

    log_inv_tau: float = math.log(1.0 / TAU_INIT)

    @classmethod
    def from_tau(cls, tau: float):
        if tau <= 0:
            raise InvalidConfig("tau must be positive")
        return cls(log_inv_tau=math.log(1.0 / tau))

    @property
    def tau(self) -> float:
        # compare in log space so exp cannot overflow; return the exact
        # constant at either boundary (exp(-log(1/x)) misses x by an ulp)
        if self.log_inv_tau <= -math.log(TAU_MAX):
            return TAU_MAX
        if self.log_inv_tau >= -math.log(TAU_MIN):
            return TAU_MIN
        return min(max(math.exp(-self.log_inv_tau), TAU_MIN), TAU_MAX)

    @property
    def grad_gate(self) -> float:
        """1 when tau is strictly inside the clamp range, else 0."""
        in_range = -math.log(TAU_MAX) < self.log_inv_tau < -math.log(TAU_MIN)
        return 1.0 if in_range else 0.0


def sync_probability(phi, tau):
    """p = sigmoid(phi / tau): probability the pair is in sync."""
    t = tau.tau if isinstance(tau, Temperature) else float(tau)
    return _sigmoid(np.asarray(phi, dtype=np.float64) / t)


def cosine_similarity(v, a) -> float:
    v = np.asarray(v, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    nv = np.linalg.norm(v)
    na = np.linalg.norm(a)
    if nv == 0.0 or na == 0.0:
        raise InvalidInput("cosine similarity of a zero vector is undefined")
    return float(np.clip(np.dot(v, a) / (nv * na), -1.0, 1.0))


# ------------------------------------------------------------ score sets

_PHI_TOL = 1e-6


@dataclass(frozen=True)
class ScoreSet:
    """Similarities for one anchor: a positive plus hard/easy negatives."""

    phi_pos: float
    phi_hard: np.ndarray
    phi_easy: np.ndarray
    tau: Temperature

    def __post_init__(self):
        object.__setattr__(self, "phi_hard",
                           np.atleast_1d(np.asarray(self.phi_hard, dtype=np.float64)))
        object.__setattr__(self, "phi_easy",
                           np.atleast_1d(np.asarray(self.phi_easy, dtype=np.float64))
                           if np.size(self.phi_easy) else np.zeros(0))
        allphi = np.concatenate(([self.phi_pos], self.phi_hard, self.phi_easy))
        if not np.all(np.isfinite(allphi)):
            raise InvalidInput("similarities must be finite")
        if np.any(np.abs(allphi) > 1.0 + _PHI_TOL):
            raise InvalidInput("cosine similarities must lie in [-1, 1]")


class ScoreBatch:
    """Vectorized view of B ScoreSets sharing one temperature."""

    def __init__(self, pos, hard, easy, temperature: Temperature):
        self.pos = np.atleast_1d(np.asarray(pos, dtype=np.float64))
        self.hard = np.asarray(hard, dtype=np.float64).reshape(self.pos.size, -1)
        easy = np.asarray(easy, dtype=np.float64)
        self.easy = easy.reshape(self.pos.size, -1) if easy.size else \
            np.zeros((self.pos.size, 0))
        self.temperature = temperature

    @classmethod
    def from_sets(cls, sets):
        sets = list(sets)
        if not sets:
            raise InvalidInput("empty score batch")
        n_h = {s.phi_hard.size for s in sets}
        n_e = {s.phi_easy.size for s in sets}
        if len(n_h) != 1 or len(n_e) != 1:
            raise InvalidInput("ragged negative counts in one batch")
        taus = {s.tau.log_inv_tau for s in sets}
        if len(taus) != 1:
            raise InvalidInput("score sets in one batch must share a temperature")
        return cls(np.array([s.phi_pos for s in sets]),
                   np.stack([s.phi_hard for s in sets]),
                   np.stack([s.phi_easy for s in sets]) if sets[0].phi_easy.size
                   else np.zeros((len(sets), 0)),
                   sets[0].tau)

    @property
    def B(self) -> int:
        return self.pos.size

    @property
    def n_hard(self) -> int:
        return self.hard.shape[1]

    @property
    def n_easy(self) -> int:
        return self.easy.shape[1]


def _as_batch(scores) -> ScoreBatch:
    if isinstance(scores, ScoreBatch):
        return scores
    if isinstance(scores, ScoreSet):
        return ScoreBatch.from_sets([scores])
    return ScoreBatch.from_sets(scores)


@dataclass(frozen=True)
class BbceConfig:
    N_h: int
    N_e: int
    w_e: float

    def __post_init__(self):
        if self.N_h < 1:
            raise InvalidConfig("need at least one hard negative")
        if self.N_e < 0 or not 0.0 <= self.w_e <= 1.0:
            raise InvalidConfig("N_e must be >= 0 and w_e within [0, 1]")
        if self.N_e == 0 and self.w_e != 0.0:
            raise InvalidConfig("w_e must be 0 when there are no easy negatives")


@dataclass(frozen=True)
class LossGrads:
    """d(loss)/d(similarity) arrays plus the temperature gradient."""

    pos: np.ndarray                      # (B,)
    hard: np.ndarray                     # (B, N_h)
    easy: np.ndarray                     # (B, N_e)
    log_inv_tau: float = 0.0


@dataclass(frozen=True)
class GradReport:
    """Misclassification-probability weights behind a loss gradient.

    weight_pos is the probability the positive pair is mistaken for a
    negative; each negative weight is the probability that negative is
    mistaken for a positive.  grad_* are the assembled d(loss)/d(phi).
    """

    weight_pos: float
    weights_hard: np.ndarray
    weights_easy: np.ndarray
    grad_pos: float
    grad_hard: np.ndarray
    grad_easy: np.ndarray


# ------------------------------------------------------------------ bbce


def _check_sizes(b: ScoreBatch, cfg: BbceConfig):
    if b.n_hard != cfg.N_h or b.n_easy != cfg.N_e:
        raise InvalidConfig(
            f"batch carries {b.n_hard} hard / {b.n_easy} easy negatives, "
            f"config expects {cfg.N_h} / {cfg.N_e}")


def bbce_loss(scores, cfg: BbceConfig, simplified: bool = False):
    """Balanced BCE over score sets.  Returns (loss, LossGrads).

    Full form, per anchor:
        -(1/2) [ ln p+  +  (1-w_e)/N_h sum ln(1-p_h)  +  w_e/N_e sum ln(1-p_e) ]
    averaged over the batch, p = sigmoid(phi/tau).  With simplified=True the
    hard/easy split and the one-half factor are dropped: all negatives are
    pooled with weight 1/N.
    """
    b = _as_batch(scores)
    _check_sizes(b, cfg)
    t = b.temperature
    tau = t.tau
    zp = b.pos / tau
    zh = b.hard / tau
    ze = b.easy / tau

    # log p = -softplus(-z); log(1-p) = -softplus(z)
    pos_term = -_softplus(-zp)                      # (B,)
    hard_term = -_softplus(zh)                      # (B, N_h)
    easy_term = -_softplus(ze)                      # (B, N_e)

    B = b.B
    if simplified:
        neg = np.concatenate([hard_term, easy_term], axis=1)
        loss = -(pos_term + neg.mean(axis=1)).mean()
        w_hard = np.full(cfg.N_h, 1.0 / (cfg.N_h + cfg.N_e))
        w_easy = np.full(cfg.N_e, 1.0 / (cfg.N_h + cfg.N_e))
        scale = 1.0 / B
    else:
        loss = pos_term + (1.0 - cfg.w_e) / cfg.N_h * hard_term.sum(axis=1)
        if cfg.N_e:
            loss = loss + cfg.w_e / cfg.N_e * easy_term.sum(axis=1)
        loss = -0.5 * loss.mean()
        w_hard = np.full(cfg.N_h, (1.0 - cfg.w_e) / cfg.N_h)
        w_easy = np.full(cfg.N_e, cfg.w_e / cfg.N_e) if cfg.N_e else np.zeros(0)
        scale = 0.5 / B

    q_pos = _sigmoid(-zp)        # 1 - sigmoid(zp), computed stably
    q_hard = _sigmoid(zh)
    q_easy = _sigmoid(ze)

    dzp = -scale * q_pos
    dzh = scale * w_hard[None, :] * q_hard
    dze = scale * w_easy[None, :] * q_easy if cfg.N_e else np.zeros_like(ze)

    dlit = float((dzp * zp).sum() + (dzh * zh).sum() + (dze * ze).sum()) * t.grad_gate
    grads = LossGrads(pos=dzp / tau, hard=dzh / tau, easy=dze / tau,
                      log_inv_tau=dlit)
    return float(loss), grads


def bbce_grad_decomposition(scores: ScoreSet, cfg: BbceConfig,
                            simplified: bool = False) -> GradReport:
    """Misclassification weights q-, q_i- for one anchor's BBCE gradient.

    q- = 1 - sigmoid(phi+/tau) and q_i- = sigmoid(phi_i-/tau); scaling each
    similarity's gradient contribution by these weights reproduces the
    analytic gradient of bbce_loss for a batch of one.
    """
    b = _as_batch(scores)
    if b.B != 1:
        raise InvalidInput("decomposition reports a single anchor")
    loss, g = bbce_loss(b, cfg, simplified=simplified)
    tau = b.temperature.tau
    return GradReport(
        weight_pos=float(_sigmoid(-b.pos[0] / tau)),
        weights_hard=_sigmoid(b.hard[0] / tau),
        weights_easy=_sigmoid(b.easy[0] / tau),
        grad_pos=float(g.pos[0]),
        grad_hard=g.hard[0].copy(),
        grad_easy=g.easy[0].copy(),
    )


# --------------------------------------------------------------- infonce


def infonce_loss(scores):
    """Softmax cross entropy of the positive against all negatives.

    Per anchor: -ln( exp(z+) / (exp(z+) + sum exp(z_i)) ), z = phi/tau,
    averaged over the batch.  Returns (loss, LossGrads).
    """
    b = _as_batch(scores)
    if b.n_hard + b.n_easy < 1:
        raise InvalidInput("infonce needs at least one negative")
    t = b.temperature
    tau = t.tau
    z = np.concatenate([b.pos[:, None], b.hard, b.easy], axis=1) / tau
    lse = _logsumexp(z, axis=1)
    loss = float((lse - z[:, 0]).mean())
    p = np.exp(z - lse[:, None])                 # softmax rows
    B = b.B
    dz = p / B
    dz[:, 0] -= 1.0 / B
    dlit = float((dz * z).sum()) * t.grad_gate
    nh = b.n_hard
    grads = LossGrads(pos=dz[:, 0] / tau,
                      hard=dz[:, 1:1 + nh] / tau,
                      easy=dz[:, 1 + nh:] / tau,
                      log_inv_tau=dlit)
    return loss, grads


def infonce_grad_decomposition(scores: ScoreSet) -> GradReport:
    """Softmax weights p-, p_i- with the identity p- = sum(p_i-)."""
    b = _as_batch(scores)
    if b.B != 1:
        raise InvalidInput("decomposition reports a single anchor")
    loss, g = infonce_loss(b)
    tau = b.temperature.tau
    z = np.concatenate([b.pos, b.hard[0], b.easy[0]]) / tau
    p = np.exp(z - _logsumexp(z))
    nh = b.n_hard
    return GradReport(
        weight_pos=float(1.0 - p[0]),            # p-, misclassified positive
        weights_hard=p[1:1 + nh].copy(),
        weights_easy=p[1 + nh:].copy(),
        grad_pos=float(g.pos[0]),
        grad_hard=g.hard[0].copy(),
        grad_easy=g.easy[0].copy(),
    )


# ------------------------------------------------------------------- bce


def bce_loss(probabilities, labels, clamp: float = 1e-12):
    """Mean binary cross entropy.  Returns (loss, d loss/d p).

    Probabilities are clamped to [clamp, 1-clamp] so endpoint inputs stay
    finite; the gradient is taken at the clamped values.
    """
    p = np.clip(np.asarray(probabilities, dtype=np.float64), clamp, 1.0 - clamp)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise InvalidInput(f"shape mismatch: {p.shape} vs {y.shape}")
    n = p.size
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n)
    grad = (p - y) / (p * (1.0 - p)) / n
    return loss, grad


# ----------------------------------------------------------- contrastive


@dataclass(frozen=True)
class PairBatch:
    """Labeled pair distances for the margin contrastive loss."""

    labels: np.ndarray      # 1 = genuine pair, 0 = impostor
    distances: np.ndarray   # Euclidean, >= 0
    margin: float

    def __post_init__(self):
        object.__setattr__(self, "labels",
                           np.atleast_1d(np.asarray(self.labels, dtype=np.float64)))
        object.__setattr__(self, "distances",
                           np.atleast_1d(np.asarray(self.distances, dtype=np.float64)))
        if self.labels.shape != self.distances.shape:
            raise InvalidInput("labels and distances must align")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise InvalidInput("labels must be 0 or 1")
        if np.any(self.distances < 0):
            raise InvalidInput("distances must be non-negative")
        if self.margin <= 0:
            raise InvalidConfig("margin must be positive")

    @property
    def B(self) -> int:
        return self.labels.size


def syncnet_contrastive_loss(batch: PairBatch):
    """(1/2B) sum[ y d^2 + (1-y) max(m-d, 0)^2 ].  Returns (loss, d loss/d d)."""
    y, d, m = batch.labels, batch.distances, batch.margin
    hinge = np.maximum(m - d, 0.0)
    B = batch.B
    loss = float((y * d ** 2 + (1.0 - y) * hinge ** 2).sum() / (2.0 * B))
    grad = (y * d - (1.0 - y) * hinge) / B
    return loss, grad


# -------------------------------------------------------------------- pm


EPS_FLOOR = 1e-3


def pm_loss(distances, eps_floor: float = EPS_FLOOR):
    """Multi-way classification over exp(1/d), positive in column 0.

    distances is (B, K) with K >= 2.  Returns (loss, d loss/d d).  Any
    distance at or below eps_floor raises DegenerateDistance: 1/d blows up
    there and the formulation gives no guidance.
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim == 1:
        d = d[None, :]
    if d.shape[1] < 2:
        raise InvalidInput("need the positive plus at least one candidate")
    if np.any(d <= eps_floor):
        raise DegenerateDistance(f"distance at or below {eps_floor}")
    z = 1.0 / d
    lse = _logsumexp(z, axis=1)
    B = d.shape[0]
    loss = float((lse - z[:, 0]).mean())
    p = np.exp(z - lse[:, None])
    dz = p / B
    dz[:, 0] -= 1.0 / B
    grad = dz * (-1.0 / d ** 2)
    return loss, grad


# ------------------------------------------------- uniform score adapter


def loss_on_scores(name: str, scores, cfg: BbceConfig = None,
                   margin: float = 1.0, simplified: bool = False):
    """Evaluate any of the five losses over a ScoreBatch.

    Distance-based losses see d = sqrt(2 - 2 phi), the Euclidean distance
    between unit vectors; their gradients are mapped back onto phi by the
    chain rule.  Returns (loss, LossGrads).
    """
    if name not in LOSS_NAMES:
        raise InvalidConfig(f"unknown loss {name!r}; expected one of {LOSS_NAMES}")
    b = _as_batch(scores)
    if name == "bbce":
        if cfg is None:
            cfg = BbceConfig(N_h=b.n_hard, N_e=b.n_easy,
                             w_e=0.5 if b.n_easy else 0.0)
        return bbce_loss(b, cfg, simplified=simplified)
    if name == "infonce":
        return infonce_loss(b)

    phi = np.concatenate([b.pos[:, None], b.hard, b.easy], axis=1)
    nh = b.n_hard
    if name == "bce":
        t = b.temperature
        z = phi / t.tau
        p = _sigmoid(z)
        y = np.zeros_like(phi)
        y[:, 0] = 1.0
        loss, dp = bce_loss(p, y)
        dz = dp * p * (1.0 - p)
        dlit = float((dz * z).sum()) * t.grad_gate
        return loss, LossGrads(pos=dz[:, 0] / t.tau, hard=dz[:, 1:1 + nh] / t.tau,
                               easy=dz[:, 1 + nh:] / t.tau, log_inv_tau=dlit)

    # unit-norm embeddings: |v - a|^2 = 2 - 2 phi
    d = np.sqrt(np.maximum(2.0 - 2.0 * phi, 1e-12))
    dd_dphi = -1.0 / d
    if name == "contrastive":
        y = np.zeros_like(phi)
        y[:, 0] = 1.0
        pair = PairBatch(labels=y.ravel(), distances=d.ravel(), margin=margin)
        loss, gd = syncnet_contrastive_loss(pair)
        gphi = gd.reshape(d.shape) * dd_dphi
    else:  # pm
        loss, gd = pm_loss(d)
        gphi = gd * dd_dphi
    return loss, LossGrads(pos=gphi[:, 0], hard=gphi[:, 1:1 + nh],
                           easy=gphi[:, 1 + nh:], log_inv_tau=0.0)
