"""Two-phase deterministic trainer for the dual-encoder sync model.

Phase 1 fits both encoders plus the temperature with Adam on the chosen
loss.  Phase 2 repeats the loop with stochastic dropping disabled and the
update masked to batch-norm scale/shift only, so running statistics settle
on the drop-free activation distribution while every other parameter stays
bit-identical.  A final forward-only sweep then recomputes the running
statistics as a plain average over fresh batches with all parameters
frozen; an exponential average carries per-batch noise no matter how long
it runs, a cumulative one does not.

The whole run is a deterministic function of (corpus, config): batches come
from one seeded generator, updates are single-threaded, and reductions run
in fixed order.
"""

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import (
    AvBatch,
    BatchSpec,
    CLIP_FRAMES,
    Corpus,
    sample_batch,
    split_corpus,
)
from .embeddings import EmbeddingSequence
from .errors import InvalidConfig, TrainingDiverged
from .evaluation import accuracy_table
from .losses import (
    LossGrads,
    LOSS_NAMES,
    ScoreBatch,
    BbceConfig,
    Temperature,
    loss_on_scores,
    sync_probability,
)
from .nn.encoder import EncoderArch, ToyEncoder, TrainPhase, is_bn_param


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "bbce"
    batch: BatchSpec = field(default_factory=lambda: BatchSpec(
        B=8, N_h=15, N_e=15, w_e=0.1))
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs_main: int = 40
    epochs_bn_tune: int = 5
    bn_refresh_steps: int = 512
    steps_per_epoch: int = 24
    seed: int = 0
    dropblock: bool = True
    margin: float = 1.0            # contrastive only
    embed_dim: int = 32
    channels: tuple = (16, 32)
    heldout_videos: int = 4

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise InvalidConfig(f"unknown loss {self.loss!r}")
        if self.learning_rate <= 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.epochs_main < 1 or self.epochs_bn_tune < 0 or self.steps_per_epoch < 1:
            raise InvalidConfig("bad epoch/step counts")
        if self.bn_refresh_steps < 0:
            raise InvalidConfig("bn_refresh_steps must be >= 0")

    def bbce(self) -> BbceConfig:
        return BbceConfig(N_h=self.batch.N_h, N_e=self.batch.N_e,
                          w_e=self.batch.w_e)


def desk_config(**overrides) -> TrainConfig:
    """Fast single-machine preset; finishes in well under ten minutes."""
    return TrainConfig(**overrides)


def paper_scale_config(**overrides) -> TrainConfig:
    """The published protocol's hyperparameters, stored for reference.

    Running it at desk scale is possible but pointless; it exists so the
    values live in exactly one place.
    """
    base = dict(loss="bbce",
                batch=BatchSpec(B=256, N_h=15, N_e=15, w_e=0.1),
                learning_rate=1e-4, epochs_main=600, epochs_bn_tune=50)
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EpochStats:
    epoch: int
    phase: int
    loss: float
    mean_pos_sim: float
    mean_neg_sim: float
    tau: float
    fp: int
    fn: int
    mean_q_pos: float      # mean misclassification weight of positives
    mean_q_neg: float      # mean misclassification weight of negatives

    def to_json(self) -> dict:
        d = asdict(self)
        d["loss"] = float(d["loss"])
        return d


@dataclass
class TrainResult:
    """Checkpoint-shaped container: encoders + temperature + diagnostics."""

    encoders: dict                 # {"visual": ToyEncoder, "audio": ToyEncoder}
    temperature: Temperature
    diagnostics: list              # of EpochStats
    config: TrainConfig

    @property
    def log_inv_tau(self) -> float:
        return self.temperature.log_inv_tau


# ------------------------------------------------------------------ adam


@dataclass(frozen=True)
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper,
              mask=None):
    """Standard Adam with bias correction over a dict of arrays.

    mask, if given, selects by name which parameters move; the rest keep
    both their values and their optimizer state untouched.  Updates params
    and state in place and returns them.
    """
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        if mask is not None and not mask(name):
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        mhat = state.m[name] / c1
        vhat = state.v[name] / c2
        params[name] = params[name] - hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)
    return params, state


# -------------------------------------------------------------- training


def _arches(config: TrainConfig, obs_dim: int):
    drops = ((0, 0.1, 2, "3d"), (1, 0.1, 2, "3d")) if config.dropblock else ()
    shape = (1, CLIP_FRAMES, obs_dim)
    return (EncoderArch(input_shape=shape, channels=config.channels,
                        embed_dim=config.embed_dim, pool_after=(0, 1),
                        dropblocks=drops),
            EncoderArch(input_shape=shape, channels=config.channels,
                        embed_dim=config.embed_dim, pool_after=(0, 1),
                        dropblocks=drops))


def _batch_arrays(batch: AvBatch):
    """(B,1,C,F) visual plus flattened (B*(1+Nh+Ne),1,C,F) audio windows."""
    vis = batch.visual[:, None]
    audio = np.concatenate([batch.audio_pos[:, None],
                            batch.audio_hard,
                            batch.audio_easy], axis=1)
    B, K = audio.shape[0], audio.shape[1]
    return vis, audio.reshape(B * K, 1, *audio.shape[2:]), K


def _step(v_enc, a_enc, temp, batch, config, phase, drop_rng):
    """One forward/backward pass; returns (loss, grads_v, grads_a, dlit, stats)."""
    vis, audio, K = _batch_arrays(batch)
    B = vis.shape[0]
    v_emb, v_cache = v_enc.forward_cached(vis, phase, rng=drop_rng)
    a_emb, a_cache = a_enc.forward_cached(audio, phase, rng=drop_rng)
    a_emb = a_emb.reshape(B, K, -1)
    phi = np.einsum("bd,bkd->bk", v_emb, a_emb)
    nh = config.batch.N_h
    scores = ScoreBatch(phi[:, 0], phi[:, 1:1 + nh], phi[:, 1 + nh:], temp)
    cfg = config.bbce() if config.loss == "bbce" else None
    loss, g = loss_on_scores(config.loss, scores, cfg=cfg, margin=config.margin)
    gphi = np.concatenate([g.pos[:, None], g.hard, g.easy], axis=1)
    gv = np.einsum("bk,bkd->bd", gphi, a_emb)
    ga = gphi[:, :, None] * v_emb[:, None, :]
    grads_v, _ = v_enc.backward(v_cache, gv)
    grads_a, _ = a_enc.backward(a_cache, ga.reshape(B * K, -1))
    return loss, grads_v, grads_a, g.log_inv_tau, phi


def _phi_stats(phi, temp, nh):
    pos = phi[:, 0]
    neg = phi[:, 1:]
    p_pos = sync_probability(pos, temp)
    p_neg = sync_probability(neg, temp)
    return {
        "pos": float(pos.mean()),
        "neg": float(neg.mean()),
        "fp": int((p_neg >= 0.5).sum()),
        "fn": int((p_pos < 0.5).sum()),
        "q_pos": float((1.0 - p_pos).mean()),
        "q_neg": float(p_neg.mean()),
    }


def _snapshot(v_enc, a_enc, temp, diagnostics, config):
    return TrainResult(encoders={"visual": v_enc.copy(), "audio": a_enc.copy()},
                       temperature=Temperature(temp.log_inv_tau),
                       diagnostics=list(diagnostics), config=config)


def train(corpus: Corpus, config: TrainConfig):
    """Returns (TrainResult, diagnostics list).

    Raises TrainingDiverged (carrying the last epoch-end snapshot) if the
    loss leaves the reals.
    """
    if config.heldout_videos and len(corpus) > config.heldout_videos + 1:
        fit_corpus, _ = split_corpus(corpus, config.heldout_videos)
    else:
        fit_corpus = corpus
    arch_v, arch_a = _arches(config, corpus.obs_dim)
    v_enc = ToyEncoder.build(arch_v, np.random.default_rng(config.seed + 1))
    a_enc = ToyEncoder.build(arch_a, np.random.default_rng(config.seed + 2))
    temp = Temperature()
    batch_rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 3)
    hyper = AdamHyper(lr=config.learning_rate, beta1=config.beta1,
                      beta2=config.beta2, eps=config.eps)
    st_v, st_a, st_t = AdamState(), AdamState(), AdamState()
    diagnostics = []
    last_good = _snapshot(v_enc, a_enc, temp, diagnostics, config)

    def run_phase(phase_idx, n_epochs, phase, mask):
        nonlocal last_good, temp
        epoch0 = len(diagnostics)
        for e in range(n_epochs):
            losses, stats = [], []
            for _ in range(config.steps_per_epoch):
                batch = sample_batch(fit_corpus, config.batch, batch_rng)
                loss, gv, ga, dlit, phi = _step(
                    v_enc, a_enc, temp, batch, config, phase, drop_rng)
                if not math.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch0 + e}",
                        last_good_checkpoint=last_good)
                adam_step(v_enc.params, gv, st_v, hyper, mask=mask)
                adam_step(a_enc.params, ga, st_a, hyper, mask=mask)
                if mask is None:
                    # plain SGD for the scalar: Adam's normalized steps would
                    # let early gradient noise fling the temperature around
                    temp = Temperature(temp.log_inv_tau - hyper.lr * dlit)
                losses.append(loss)
                stats.append(_phi_stats(phi, temp, config.batch.N_h))
            diagnostics.append(EpochStats(
                epoch=epoch0 + e, phase=phase_idx,
                loss=float(np.mean(losses)),
                mean_pos_sim=float(np.mean([s["pos"] for s in stats])),
                mean_neg_sim=float(np.mean([s["neg"] for s in stats])),
                tau=temp.tau,
                fp=int(np.sum([s["fp"] for s in stats])),
                fn=int(np.sum([s["fn"] for s in stats])),
                mean_q_pos=float(np.mean([s["q_pos"] for s in stats])),
                mean_q_neg=float(np.mean([s["q_neg"] for s in stats])),
            ))
            last_good = _snapshot(v_enc, a_enc, temp, diagnostics, config)

    drop = config.dropblock
    run_phase(1, config.epochs_main, TrainPhase.train(drop_enabled=drop), None)
    run_phase(2, config.epochs_bn_tune, TrainPhase.bn_tune(), is_bn_param)

    # stats refresh: frozen parameters, cumulative average over fresh batches
    refresh = TrainPhase.bn_tune()
    for t in range(1, config.bn_refresh_steps + 1):
        batch = sample_batch(fit_corpus, config.batch, batch_rng)
        vis, audio, _ = _batch_arrays(batch)
        v_enc.forward_cached(vis, refresh, bn_momentum=1.0 / t)
        a_enc.forward_cached(audio, refresh, bn_momentum=1.0 / t)

    result = _snapshot(v_enc, a_enc, temp, diagnostics, config)
    return result, diagnostics


# ------------------------------------------------------------ inference


def embed_sequences(result, video, batch_size: int = 256):
    """Per-position eval-phase embeddings over all CLIP_FRAMES windows.

    Position t embeds frames [t, t + CLIP_FRAMES), so the sequence is
    CLIP_FRAMES - 1 shorter than the video.  Works with a TrainResult or a
    loaded checkpoint exposing .encoders and .log_inv_tau.
    """
    v_enc = result.encoders["visual"]
    a_enc = result.encoders["audio"]
    phase = TrainPhase.eval()
    T = video.length - CLIP_FRAMES + 1
    idx = np.arange(T)[:, None] + np.arange(CLIP_FRAMES)[None, :]
    out = {}
    for name, enc, view in (("visual", v_enc, video.visual_view),
                            ("audio", a_enc, video.audio_view)):
        windows = view[idx][:, None]            # (T, 1, CLIP, obs)
        chunks = [enc.forward_cached(windows[i:i + batch_size], phase)[0]
                  for i in range(0, T, batch_size)]
        out[name] = EmbeddingSequence.from_array(
            np.concatenate(chunks, axis=0), video_id=video.id, modality=name)
    return out["visual"], out["audio"]


def heldout_accuracy(result, heldout: Corpus, clip_lengths=(5,)):
    """Offset accuracy of a trained model on in-sync held-out videos."""
    pairs = []
    for video in heldout.videos:
        v_seq, a_seq = embed_sequences(result, video)
        pairs.append((v_seq, a_seq, 0))
    return accuracy_table(pairs, clip_lengths=clip_lengths)


def heldout_margin(result, heldout: Corpus, n_pairs: int = 512, seed: int = 99):
    """Mean positive minus mean hard-negative similarity on held-out data."""
    spec = BatchSpec(B=min(n_pairs, 64), N_h=8, N_e=0, w_e=0.0)
    rng = np.random.default_rng(seed)
    phase = TrainPhase.eval()
    pos_sims, neg_sims = [], []
    v_enc, a_enc = result.encoders["visual"], result.encoders["audio"]
    while len(pos_sims) * spec.B < n_pairs:
        batch = sample_batch(heldout, spec, rng)
        vis, audio, K = _batch_arrays(batch)
        v_emb = v_enc.forward_cached(vis, phase)[0]
        a_emb = a_enc.forward_cached(audio, phase)[0].reshape(spec.B, K, -1)
        phi = np.einsum("bd,bkd->bk", v_emb, a_emb)
        pos_sims.append(phi[:, 0])
        neg_sims.append(phi[:, 1:].ravel())
    return float(np.concatenate(pos_sims).mean() -
                 np.concatenate(neg_sims).mean())


def evaluate_fp_fn(result, corpus: Corpus, n_anchors: int = 512,
                   seed: int = 7):
    """(false positives, false negatives) at p = 0.5 over balanced pairs.

    Each anchor contributes its aligned positive and one same-video offset
    negative, so positives and negatives are counted over equal totals.
    """
    rng = np.random.default_rng(seed)
    spec = BatchSpec(B=64, N_h=1, N_e=0, w_e=0.0)
    phase = TrainPhase.eval()
    v_enc, a_enc = result.encoders["visual"], result.encoders["audio"]
    temp = Temperature(result.log_inv_tau)
    fp = fn = 0
    done = 0
    while done < n_anchors:
        batch = sample_batch(corpus, spec, rng)
        vis, audio, K = _batch_arrays(batch)
        v_emb = v_enc.forward_cached(vis, phase)[0]
        a_emb = a_enc.forward_cached(audio, phase)[0].reshape(spec.B, K, -1)
        phi = np.einsum("bd,bkd->bk", v_emb, a_emb)
        p_pos = sync_probability(phi[:, 0], temp)
        p_neg = sync_probability(phi[:, 1], temp)
        fn += int((p_pos < 0.5).sum())
        fp += int((p_neg >= 0.5).sum())
        done += spec.B
    return fp, fn
