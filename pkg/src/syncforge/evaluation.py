"""Shifted-clip offset evaluation.

The audio sequence is slid from -15 to +15 frames against the images,
giving 31 candidate alignments.  For a clip window the per-shift cosine
similarities are averaged over the window's positions and the argmax shift
is the prediction; a prediction within +-1 frame of the truth counts as
correct.  Accuracy is tabulated per clip length over {5,7,9,11,13,15}.

Sweep convention: entry (s, p) compares the visual embedding at position p
with the audio embedding at position p + s, so a positive predicted shift
means the matching audio content sits later in the audio track (the audio
track is delayed).
"""

from dataclasses import dataclass

import numpy as np

from . import data as _data
from .embeddings import EmbeddingSequence
from .errors import InvalidInput

MAX_SHIFT = 15
N_SHIFTS = 2 * MAX_SHIFT + 1
CLIP_LENGTHS = (5, 7, 9, 11, 13, 15)


@dataclass(frozen=True)
class OffsetSweep:
    """31 x P similarity grid; invalid cells are 0 with valid=False."""

    sims: np.ndarray     # (31, P)
    valid: np.ndarray    # (31, P) bool
    shifts: np.ndarray   # (31,) = -15..15

    @property
    def positions(self) -> int:
        return self.sims.shape[1]


def offset_sweep(v_seq: EmbeddingSequence, a_seq: EmbeddingSequence,
                 max_shift: int = MAX_SHIFT) -> OffsetSweep:
    """Cosine similarity of every (position, shift) pair.

    Positions index the visual sequence; cells where the shifted audio
    index leaves the track are marked invalid and excluded from averages.
    """
    v = v_seq.vectors
    a = a_seq.vectors
    Tv, Ta = v.shape[0], a.shape[0]
    if min(Tv, Ta) < max_shift + 1:
        raise InvalidInput(
            f"sequences of length {Tv}/{Ta} cannot host +-{max_shift} shifts")
    shifts = np.arange(-max_shift, max_shift + 1)
    sims = np.zeros((shifts.size, Tv))
    valid = np.zeros((shifts.size, Tv), dtype=bool)
    for r, s in enumerate(shifts):
        lo = max(0, -s)
        hi = min(Tv, Ta - s)
        if hi > lo:
            sims[r, lo:hi] = np.einsum("td,td->t", v[lo:hi], a[lo + s:hi + s])
            valid[r, lo:hi] = True
    return OffsetSweep(sims=sims, valid=valid, shifts=shifts)


def _tiebreak_argmax(values: np.ndarray, shifts: np.ndarray) -> int:
    """Largest value; ties resolve to the smallest |shift|, negative first."""
    best = np.max(values)
    candidates = shifts[values == best]
    return int(min(candidates, key=lambda s: (abs(s), s)))


def predict_offset(sweep: OffsetSweep, clip_length: int, clip_start: int) -> int:
    """Average the sweep over the clip's positions, argmax over shifts."""
    if clip_length < 1:
        raise InvalidInput("clip_length must be positive")
    if clip_start < 0 or clip_start + clip_length > sweep.positions:
        raise InvalidInput(
            f"clip [{clip_start}, {clip_start + clip_length}) outside "
            f"0..{sweep.positions}")
    window = sweep.sims[:, clip_start:clip_start + clip_length]
    wvalid = sweep.valid[:, clip_start:clip_start + clip_length]
    counts = wvalid.sum(axis=1)
    sums = np.where(wvalid, window, 0.0).sum(axis=1)
    means = np.where(counts > 0, sums / np.maximum(counts, 1), -np.inf)
    return _tiebreak_argmax(means, sweep.shifts)


def score(predicted: int, true: int) -> bool:
    """Correct iff the predicted shift is within one frame of the truth."""
    return abs(int(predicted) - int(true)) <= 1


@dataclass(frozen=True)
class AccuracyTable:
    accuracies: dict     # clip length -> accuracy in [0, 1]
    counts: dict         # clip length -> (correct, total)

    def to_json(self) -> dict:
        return {
            "clip_lengths": sorted(self.accuracies),
            "accuracy": {str(k): self.accuracies[k] for k in sorted(self.accuracies)},
            "counts": {str(k): list(self.counts[k]) for k in sorted(self.counts)},
        }

    def to_text(self) -> str:
        lengths = sorted(self.accuracies)
        head = "Clip length " + "".join(f"{L:>8d}" for L in lengths)
        row = "Accuracy    " + "".join(f"{self.accuracies[L]:>8.3f}" for L in lengths)
        return head + "\n" + row + "\n"


def _full_valid_starts(sweep: OffsetSweep, clip_length: int,
                       n_positions: int) -> np.ndarray:
    """Evenly spaced clip starts whose every (shift, position) cell is valid."""
    col_ok = sweep.valid.all(axis=0).astype(int)
    run = np.convolve(col_ok, np.ones(clip_length, dtype=int), mode="valid")
    starts = np.nonzero(run == clip_length)[0]
    if starts.size == 0:
        return starts
    picks = np.unique(np.linspace(0, starts.size - 1, n_positions).round().astype(int))
    return starts[picks]


def accuracy_table(pairs, clip_lengths=CLIP_LENGTHS,
                   n_positions: int = 5) -> AccuracyTable:
    """Mean offset correctness per clip length.

    pairs yields (v_seq, a_seq, true_shift) triples.  Clip windows are
    evenly spaced deterministic positions where all 31 shifts are valid;
    accuracy is an exact count ratio.
    """
    correct = {L: 0 for L in clip_lengths}
    total = {L: 0 for L in clip_lengths}
    for v_seq, a_seq, true_shift in pairs:
        sweep = offset_sweep(v_seq, a_seq)
        for L in clip_lengths:
            for start in _full_valid_starts(sweep, L, n_positions):
                pred = predict_offset(sweep, L, int(start))
                correct[L] += int(score(pred, true_shift))
                total[L] += 1
    if any(total[L] == 0 for L in clip_lengths):
        raise InvalidInput("no valid clip positions; sequences too short")
    acc = {L: correct[L] / total[L] for L in clip_lengths}
    return AccuracyTable(accuracies=acc,
                         counts={L: (correct[L], total[L]) for L in clip_lengths})


def planted_offset_benchmark(n_trials: int = 500, shift: int = 3,
                             noise_scale: float = 1.2, seed: int = 0,
                             clip_lengths=CLIP_LENGTHS) -> AccuracyTable:
    """Noisy synthetic benchmark with a known planted shift.

    Each trial plants the same audio delay in a fresh noisy video and
    predicts the offset from pseudo-inverse embeddings at every clip
    length, from one clip position per trial.  Longer clips average away
    more noise, so accuracy should rise with clip length.
    """
    length = 2 * MAX_SHIFT + max(clip_lengths) + abs(shift) + 2
    corpus = _data.generate_corpus(
        n_videos=n_trials, length=length, noise_scale=noise_scale, seed=seed)
    correct = {L: 0 for L in clip_lengths}
    for video in corpus.videos:
        planted = _data.plant_offset(video, -shift)  # audio delayed by `shift`
        v_seq = _data.oracle_embeddings(corpus, planted, "visual")
        a_seq = _data.oracle_embeddings(corpus, planted, "audio")
        sweep = offset_sweep(v_seq, a_seq)
        for L in clip_lengths:
            pred = predict_offset(sweep, L, MAX_SHIFT)
            correct[L] += int(score(pred, shift))
    acc = {L: correct[L] / n_trials for L in clip_lengths}
    return AccuracyTable(accuracies=acc,
                         counts={L: (correct[L], n_trials) for L in clip_lengths})
