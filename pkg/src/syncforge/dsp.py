"""Mel spectrograms and image-frame / mel-frame alignment arithmetic.

Audio at 16 kHz is framed with a hop of 200 samples, so one video frame at
25 fps spans exactly 3.2 mel steps.  The conventional audio window for a
clip starting at image frame j covers 16 mel steps (0.2 s); the extended
window adds 0.1 s (8 steps) of context on each side, for 32 steps total.
"""

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InvalidConfig, InvalidInput

CONVENTIONAL_STEPS = 16
EXTENDED_PAD_STEPS = 8  # 0.1 s at sr=16000, hop=200


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    window_size: int = 800
    hop_size: int = 200
    n_mels: int = 80
    fmin: float = 55.0
    fmax: float = 7600.0
    frames_per_second_video: int = 25
    power_floor: float = 1e-5

    def __post_init__(self):
        if self.hop_size <= 0 or self.window_size < self.hop_size:
            raise InvalidConfig("need window_size >= hop_size > 0")
        if self.n_mels <= 0:
            raise InvalidConfig("n_mels must be positive")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise InvalidConfig("need 0 <= fmin < fmax <= sample_rate/2")
        if self.power_floor <= 0:
            raise InvalidConfig("power_floor must be positive")

    @property
    def mel_steps_per_image(self) -> Fraction:
        # exact rational, 16/5 = 3.2 at the defaults
        return Fraction(self.sample_rate, self.frames_per_second_video * self.hop_size)


@dataclass(frozen=True)
class MelSpectrogram:
    """T x n_mels grid of floored mel-band powers (always > 0)."""

    values: np.ndarray
    config: MelConfig

    @property
    def log_values(self) -> np.ndarray:
        return np.log(self.values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig):
    """Triangular area-normalized filters on the mel scale.

    Returns (weights, centers): weights is n_mels x (n_fft/2 + 1), centers
    the per-filter peak frequency in Hz.  Filter b has support
    (edges[b], edges[b+2]) where edges are the n_mels+2 mel-spaced points.
    """
    n_fft = cfg.window_size
    fft_freqs = np.arange(n_fft // 2 + 1) * (cfg.sample_rate / n_fft)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))
    fdiff = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / fdiff[:-1][:, None]
    upper = ramps[2:] / fdiff[1:][:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    # area normalization: each filter integrates to ~1 over Hz
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return weights, edges[1:-1].copy()


def mel_filter_edges(cfg: MelConfig) -> np.ndarray:
    """The n_mels+2 Hz edge points defining the triangular filters."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


def frame_count(signal_length: int, cfg: MelConfig) -> int:
    return -(-signal_length // cfg.hop_size)  # ceil division


def mel_spectrogram(signal, cfg: MelConfig = MelConfig()) -> MelSpectrogram:
    """STFT power -> mel bands, floored at cfg.power_floor.

    Frame k is centered at sample k*hop (reflect padding at the edges), so
    T = ceil(len/hop); a 0.4 s signal at the defaults yields exactly 32
    frames.  Take .log_values for the log-compressed grid.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise InvalidInput("signal must be a non-empty 1-D sequence")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("signal contains non-finite samples")

    win = cfg.window_size
    hop = cfg.hop_size
    T = frame_count(x.size, cfg)
    half = win // 2
    right_need = (T - 1) * hop + (win - half) - x.size
    padded = np.pad(x, (half, max(right_need, 0)), mode="reflect")

    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    starts = np.arange(T) * hop
    frames = padded[starts[:, None] + np.arange(win)[None, :]] * window
    spectrum = np.abs(np.fft.rfft(frames, n=win, axis=1)) ** 2

    weights, _ = mel_filterbank(cfg)
    mel_power = spectrum @ weights.T
    values = np.maximum(mel_power, cfg.power_floor)
    return MelSpectrogram(values=values, config=cfg)


def image_to_mel_index(j: int, cfg: MelConfig = MelConfig(), rounding: bool = False) -> int:
    """Mel-frame index of image frame j: floor(3.2*j) at the defaults.

    floor is the conventional mapping; rounding=True rounds to the nearest
    step instead (half rounds up).  Exact integer arithmetic, so no float
    wobble near multiples of 5.
    """
    if j < 0:
        raise InvalidInput("image frame index must be non-negative")
    num = cfg.sample_rate * int(j)
    den = cfg.frames_per_second_video * cfg.hop_size
    if rounding:
        return (2 * num + den) // (2 * den)
    return num // den


@dataclass(frozen=True)
class AudioWindow:
    """Half-open mel-frame interval [start, stop) with out-of-range pads."""

    start: int
    stop: int
    left_pad: int
    right_pad: int
    total_frames: int = field(default=0)

    @property
    def length(self) -> int:
        return self.stop - self.start

    @property
    def valid_slice(self) -> slice:
        return slice(self.start + self.left_pad, self.stop - self.right_pad)


def audio_window(j: int, mode: str, T: int, cfg: MelConfig = MelConfig()) -> AudioWindow:
    """Audio window for a clip whose first image frame is j.

    conventional -> [i, i+16); extended -> [i-8, i+24), i = image_to_mel_index(j).
    Portions outside [0, T) are reported as left/right padding amounts.
    """
    if T <= 0:
        raise InvalidInput("T must be positive")
    i = image_to_mel_index(j, cfg)
    if mode == "conventional":
        start, stop = i, i + CONVENTIONAL_STEPS
    elif mode == "extended":
        start = i - EXTENDED_PAD_STEPS
        stop = i + CONVENTIONAL_STEPS + EXTENDED_PAD_STEPS
    else:
        raise InvalidInput(f"unknown window mode {mode!r}")
    left_pad = max(0, -start)
    right_pad = max(0, stop - T)
    return AudioWindow(start=start, stop=stop, left_pad=left_pad,
                       right_pad=right_pad, total_frames=T)


def extract_audio_window(mel_values: np.ndarray, j: int, mode: str,
                         cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Slice the window out of a T x n_mels grid, zero-padding out-of-range rows."""
    mel_values = np.asarray(mel_values)
    w = audio_window(j, mode, mel_values.shape[0], cfg)
    out = np.zeros((w.length,) + mel_values.shape[1:], dtype=mel_values.dtype)
    lo = w.start + w.left_pad
    hi = w.stop - w.right_pad
    if hi > lo:
        out[w.left_pad:w.left_pad + (hi - lo)] = mel_values[lo:hi]
    return out


def read_pcm_f32le(path) -> np.ndarray:
    """Load a raw mono stream of 32-bit IEEE-754 little-endian floats."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0:
        raise InvalidInput(f"{path}: empty PCM file")
    if len(raw) % 4 != 0:
        raise InvalidInput(f"{path}: byte count {len(raw)} is not a multiple of 4")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)
