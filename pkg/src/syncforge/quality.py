"""Sync-quality auditing: offset, active segments, offscreen ratio, verdict.

For a video with N_v frames and window radius w, the similarity matrix is

    S[r, j] = a_hat[j - w + r] . v_hat[j],        r = 0 .. 2w

so row w holds the aligned similarities, and the reported offset is w - m
where m is the row whose (masked) mean similarity is largest.  A positive
offset means the audio content runs ahead of the images.

The active-speaker pass smooths S along the offset axis with a 3-tap
Gaussian, maps similarities to probabilities with the model temperature,
takes the per-frame best probability in the +-1 band around the offset row,
and segments frames into on/off-screen regions by thresholding plus
small-segment pruning.  A video is kept when the probability at the offset
is at least 0.9 and the offscreen ratio is at most 0.2.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingSequence
from .errors import InvalidInput
from .losses import Temperature, _sigmoid

WINDOW_RADIUS = 15
SENTINEL = -1.0
THETA_LO = 0.4
THETA_MEAN = 0.66
MIN_CHUNK = 4
KEEP_MIN_PROB = 0.9
KEEP_MAX_OFFSCREEN = 0.2

# 3-tap Gaussian, sigma 1, normalized
_GAUSS3 = np.exp(-0.5 * np.array([1.0, 0.0, 1.0]))
_GAUSS3 = _GAUSS3 / _GAUSS3.sum()


@dataclass(frozen=True)
class SimilarityMatrix:
    S: np.ndarray        # (2w+1, N_v); invalid cells hold SENTINEL
    valid: np.ndarray    # (2w+1, N_v) bool
    w: int
    tau: float

    @property
    def n_frames(self) -> int:
        return self.S.shape[1]

    def offsets(self) -> np.ndarray:
        """Audio-lead offset labeling each row: w - r."""
        return self.w - np.arange(2 * self.w + 1)


def similarity_matrix(a_seq: EmbeddingSequence, v_seq: EmbeddingSequence,
                      w: int = WINDOW_RADIUS,
                      tau: float = Temperature().tau) -> SimilarityMatrix:
    """S[r, j] = a_hat[j - w + r] . v_hat[j], sentinel where out of range."""
    a, v = a_seq.vectors, v_seq.vectors
    Ta, Tv = a.shape[0], v.shape[0]
    if min(Ta, Tv) < w + 1:
        raise InvalidInput(f"sequences of length {Ta}/{Tv} too short for w={w}")
    if isinstance(tau, Temperature):
        tau = tau.tau
    rows = 2 * w + 1
    S = np.full((rows, Tv), SENTINEL)
    valid = np.zeros((rows, Tv), dtype=bool)
    for r in range(rows):
        d = r - w                      # audio index offset: i = j + d
        lo = max(0, -d)
        hi = min(Tv, Ta - d)
        if hi > lo:
            S[r, lo:hi] = np.einsum("td,td->t", a[lo + d:hi + d], v[lo:hi])
            valid[r, lo:hi] = True
    return SimilarityMatrix(S=S, valid=valid, w=w, tau=float(tau))


def global_offset(sm: SimilarityMatrix) -> int:
    """w - argmax of masked row means; ties go to the smallest |offset|."""
    counts = sm.valid.sum(axis=1)
    sums = np.where(sm.valid, sm.S, 0.0).sum(axis=1)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), -np.inf)
    best = np.max(means)
    rows = np.nonzero(means == best)[0]
    offsets = sm.w - rows
    return int(min(offsets, key=lambda o: (abs(o), o)))


def smooth(sm: SimilarityMatrix) -> SimilarityMatrix:
    """3-tap Gaussian along the offset axis, reflect boundary, mask-aware.

    Invalid cells contribute nothing; the kernel renormalizes over the taps
    that are valid, so sentinel values never bleed into real similarities.
    """
    rows = sm.S.shape[0]
    idx = np.arange(rows)
    out = np.zeros_like(sm.S)
    norm = np.zeros_like(sm.S)
    for tap, g in zip((-1, 0, 1), _GAUSS3):
        src = np.abs(idx + tap)                      # reflect at the top
        src = np.where(src > rows - 1, 2 * (rows - 1) - src, src)
        out += g * np.where(sm.valid[src], sm.S[src], 0.0)
        norm += g * sm.valid[src]
    with np.errstate(invalid="ignore", divide="ignore"):
        sf = np.where(norm > 0, out / norm, SENTINEL)
    return SimilarityMatrix(S=sf, valid=sm.valid.copy(), w=sm.w, tau=sm.tau)


def probability_map(sm: SimilarityMatrix, tau: float = None) -> np.ndarray:
    """Elementwise sync probability sigmoid(S/tau); invalid cells are NaN."""
    t = sm.tau if tau is None else (tau.tau if isinstance(tau, Temperature) else tau)
    P = _sigmoid(sm.S / t)
    return np.where(sm.valid, P, np.nan)


def per_frame_best(P: np.ndarray, m: int) -> np.ndarray:
    """Per-frame max over the inclusive offset band {m-1, m, m+1}.

    P is the probability map with NaN marking invalid cells; frames with no
    valid cell in the band come back NaN.  A band touching the matrix edge
    is clamped with a warning.
    """
    rows = P.shape[0]
    lo, hi = m - 1, m + 1
    if lo < 0 or hi > rows - 1:
        warnings.warn(f"offset band around row {m} clamped to the matrix")
        lo, hi = max(lo, 0), min(hi, rows - 1)
    band = P[lo:hi + 1]
    all_nan = np.all(np.isnan(band), axis=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        best = np.nanmax(band, axis=0)
    return np.where(all_nan, np.nan, best)


@dataclass(frozen=True)
class ActiveSegments:
    """Ordered half-open (start, stop, on_screen) runs partitioning the video."""

    segments: tuple      # of (start, stop, bool)
    n_frames: int

    def __post_init__(self):
        pos = 0
        for start, stop, _ in self.segments:
            if start != pos or stop <= start:
                raise InvalidInput("segments must partition the frame range")
            pos = stop
        if pos != self.n_frames:
            raise InvalidInput("segments must cover every frame")

    @property
    def offscreen_ratio(self) -> float:
        off = sum(stop - start for start, stop, on in self.segments if not on)
        return off / self.n_frames

    def flags(self) -> np.ndarray:
        out = np.zeros(self.n_frames, dtype=bool)
        for start, stop, on in self.segments:
            out[start:stop] = on
        return out

    def to_json(self) -> list:
        return [{"start": int(s), "end": int(e), "on": bool(on)}
                for s, e, on in self.segments]


def _merge(runs):
    """Collapse adjacent runs with equal flags."""
    merged = []
    for start, stop, on in runs:
        if merged and merged[-1][2] == on:
            merged[-1][1] = stop
        else:
            merged.append([start, stop, on])
    return merged


def detect_active(P_m: np.ndarray, theta_lo: float = THETA_LO,
                  theta_mean: float = THETA_MEAN, min_chunk: int = MIN_CHUNK,
                  prune_islands: bool = True) -> ActiveSegments:
    """Threshold, demote weak components, then prune small islands.

    1. candidate on-frames: P_m >= theta_lo (NaN counts as off)
    2. connected on-components with mean below theta_mean turn off
    3. merge equal neighbors
    4. optionally: an on-run shorter than min_chunk surrounded by off runs
       flips off, and any run of >= 2 consecutive segments all shorter than
       min_chunk turns off entirely (choppy stretches are untrustworthy)
    """
    P_m = np.asarray(P_m, dtype=np.float64)
    n = P_m.size
    if n == 0:
        raise InvalidInput("empty probability sequence")
    on = np.where(np.isnan(P_m), False, P_m >= theta_lo)

    runs = []
    start = 0
    for t in range(1, n + 1):
        if t == n or on[t] != on[start]:
            runs.append([start, t, bool(on[start])])
            start = t
    for run in runs:
        s, e, flag = run
        # on-runs contain no NaN frames: NaN was mapped to off above
        if flag and P_m[s:e].mean() < theta_mean:
            run[2] = False
    runs = _merge(runs)

    if prune_islands and len(runs) > 1:
        short = [e - s < min_chunk for s, e, _ in runs]
        flip = [False] * len(runs)
        for i, (s, e, flag) in enumerate(runs):
            if flag and short[i] and (i == 0 or not runs[i - 1][2]) \
                    and (i == len(runs) - 1 or not runs[i + 1][2]):
                flip[i] = True
        i = 0
        while i < len(runs):
            if short[i]:
                j = i
                while j < len(runs) and short[j]:
                    j += 1
                if j - i >= 2:
                    for k in range(i, j):
                        flip[k] = runs[k][2]  # only on-runs need flipping
                i = j
            else:
                i += 1
        for i, f in enumerate(flip):
            if f:
                runs[i][2] = False
        runs = _merge(runs)

    return ActiveSegments(segments=tuple((s, e, bool(f)) for s, e, f in runs),
                          n_frames=n)


@dataclass(frozen=True)
class SyncReport:
    video_id: str
    offset: int
    probability_at_offset: float
    offscreen_ratio: float
    segments: ActiveSegments
    tau: float
    verdict: str         # "keep" | "drop"

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "offset": self.offset,
            "prob_at_offset": self.probability_at_offset,
            "offscreen_ratio": self.offscreen_ratio,
            "segments": self.segments.to_json(),
            "tau": self.tau,
            "verdict": self.verdict,
        }


def verdict_for(probability_at_offset: float, offscreen_ratio: float) -> str:
    keep = probability_at_offset >= KEEP_MIN_PROB and \
        offscreen_ratio <= KEEP_MAX_OFFSCREEN
    return "keep" if keep else "drop"


def sync_report(a_seq: EmbeddingSequence, v_seq: EmbeddingSequence,
                tau: float = Temperature().tau, w: int = WINDOW_RADIUS,
                prune_islands: bool = True, video_id: str = None) -> SyncReport:
    """Full audit of one video: offset, probability, segmentation, verdict."""
    sm = similarity_matrix(a_seq, v_seq, w=w, tau=tau)
    # offset from the raw matrix: row means already average out per-frame
    # noise, and reflect smoothing would bias a peak at +-(w-1) outward
    offset = global_offset(sm)
    sf = smooth(sm)
    m = sf.w - offset
    # probability at offset: sigmoid of the frame-averaged band-best similarity
    lo, hi = max(m - 1, 0), min(m + 1, 2 * sf.w)
    band = np.where(sf.valid[lo:hi + 1], sf.S[lo:hi + 1], -np.inf)
    best_sim = band.max(axis=0)
    usable = np.isfinite(best_sim)
    prob = float(_sigmoid(best_sim[usable].mean() / sf.tau)) if usable.any() else 0.0

    P = probability_map(sf)
    P_m = per_frame_best(P, m)
    segments = detect_active(P_m, prune_islands=prune_islands)
    ratio = segments.offscreen_ratio
    return SyncReport(
        video_id=video_id if video_id is not None else v_seq.video_id,
        offset=offset,
        probability_at_offset=prob,
        offscreen_ratio=ratio,
        segments=segments,
        tau=sf.tau,
        verdict=verdict_for(prob, ratio),
    )


OFFSET_BINS = np.arange(-WINDOW_RADIUS - 0.5, WINDOW_RADIUS + 1.5, 1.0)
UNIT_BINS = np.linspace(0.0, 1.0, 21)


@dataclass(frozen=True)
class AuditSummary:
    offset_hist: np.ndarray
    prob_hist: np.ndarray
    ratio_hist: np.ndarray
    keep_count: int
    drop_count: int
    errors: tuple = ()

    def to_json(self) -> dict:
        return {
            "n_reports": self.keep_count + self.drop_count,
            "keep": self.keep_count,
            "drop": self.drop_count,
            "thresholds": {"min_prob_at_offset": KEEP_MIN_PROB,
                           "max_offscreen_ratio": KEEP_MAX_OFFSCREEN},
            "offset_bins": [float(b) for b in OFFSET_BINS],
            "offset_hist": [int(c) for c in self.offset_hist],
            "unit_bins": [float(b) for b in UNIT_BINS],
            "prob_at_offset_hist": [int(c) for c in self.prob_hist],
            "offscreen_ratio_hist": [int(c) for c in self.ratio_hist],
            "errors": list(self.errors),
        }


def dataset_audit(reports, errors=()) -> AuditSummary:
    """Fixed-bin histogram summary over per-video reports."""
    reports = list(reports)
    if not reports and not errors:
        raise InvalidInput("nothing to audit")
    offsets = np.array([r.offset for r in reports], dtype=np.float64)
    probs = np.array([r.probability_at_offset for r in reports])
    ratios = np.array([r.offscreen_ratio for r in reports])
    keep = sum(1 for r in reports if r.verdict == "keep")
    return AuditSummary(
        offset_hist=np.histogram(offsets, bins=OFFSET_BINS)[0],
        prob_hist=np.histogram(probs, bins=UNIT_BINS)[0],
        ratio_hist=np.histogram(ratios, bins=UNIT_BINS)[0],
        keep_count=keep,
        drop_count=len(reports) - keep,
        errors=tuple(errors),
    )
