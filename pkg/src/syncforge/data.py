"""Synthetic paired audio/visual corpora with known ground-truth sync.

Each video is an order-1 autoregressive latent track (coefficient 0.9, unit
stationary variance) observed through two fixed random linear maps, one per
modality, plus per-modality Gaussian noise.  Nearby frames are therefore
correlated, which is what makes small-offset negatives genuinely hard.

Silent regions are contiguous runs (geometric length, mean 10 frames) where
the latent sits at one corpus-wide silence state plus small jitter, in both
views: quiet looks and sounds alike everywhere, so nothing pins the timing
of a silent window and out-of-sync silent windows stay mutually plausible.

Because the generative maps are known, pseudo-inverse "oracle" embeddings
recover the latent up to noise and give a perfectly separable reference
pipeline that needs no training.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .embeddings import EmbeddingSequence
from .errors import InvalidConfig, InvalidInput
from .tensorfile import load_tensor, save_tensor

CLIP_FRAMES = 5       # frames per training clip, 0.2 s at 25 fps
MAX_OFFSET = 15       # widest shift used anywhere (training, eval, audit)
AR_COEFF = 0.9
SILENT_RUN_MEAN = 10.0
SILENCE_JITTER = 0.3


@dataclass
class LatentVideo:
    id: str
    latent_track: np.ndarray     # (T, latent_dim)
    silent_mask: np.ndarray      # (T,) bool
    audio_view: np.ndarray       # (T, obs_dim)
    visual_view: np.ndarray      # (T, obs_dim)

    @property
    def length(self) -> int:
        return self.latent_track.shape[0]


@dataclass
class Corpus:
    videos: list
    audio_proj: np.ndarray       # (obs_dim, latent_dim)
    visual_proj: np.ndarray
    latent_dim: int
    obs_dim: int
    noise_scale: float
    silent_fraction: float
    seed: int

    def __len__(self):
        return len(self.videos)

    def by_id(self, vid: str) -> LatentVideo:
        for v in self.videos:
            if v.id == vid:
                return v
        raise InvalidInput(f"no video {vid!r} in corpus")


@dataclass(frozen=True)
class BatchSpec:
    B: int
    N_h: int
    N_e: int
    w_e: float
    min_hard_offset: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.B < 1 or self.N_h < 1 or self.N_e < 0:
            raise InvalidConfig("need B >= 1, N_h >= 1, N_e >= 0")
        if not 0.0 <= self.w_e <= 1.0:
            raise InvalidConfig("w_e must lie in [0, 1]")
        if self.N_e == 0 and self.w_e != 0.0:
            raise InvalidConfig("w_e must be 0 when N_e is 0")
        if not 2 <= self.min_hard_offset <= MAX_OFFSET:
            # offsets within +-1 count as in sync; they may not be negatives
            raise InvalidConfig(f"min_hard_offset must be in [2, {MAX_OFFSET}]")


def _ar_track(rng, length: int, dim: int) -> np.ndarray:
    """Stationary AR(1): x_t = c x_(t-1) + sqrt(1-c^2) e_t, unit variance."""
    innov = np.sqrt(1.0 - AR_COEFF ** 2)
    x = np.empty((length, dim))
    x[0] = rng.standard_normal(dim)
    for t in range(1, length):
        x[t] = AR_COEFF * x[t - 1] + innov * rng.standard_normal(dim)
    return x


def _silent_runs(rng, length: int, fraction: float) -> np.ndarray:
    """Alternating speech/silence runs with geometric lengths."""
    mask = np.zeros(length, dtype=bool)
    if fraction <= 0.0:
        return mask
    speech_mean = SILENT_RUN_MEAN * (1.0 - fraction) / fraction
    t = 0
    silent = bool(rng.random() < fraction)
    while t < length:
        mean = SILENT_RUN_MEAN if silent else speech_mean
        run = int(rng.geometric(1.0 / mean))
        mask[t:t + run] = silent
        t += run
        silent = not silent
    return mask


def generate_corpus(n_videos: int, length: int, latent_dim: int = 6,
                    obs_dim: int = 24, noise_scale: float = 0.05,
                    silent_fraction: float = 0.0, seed: int = 0) -> Corpus:
    """Deterministic corpus of paired AV view sequences.

    length must leave room for the widest shift plus one clip on both
    sides (>= 35 frames).
    """
    if n_videos < 1:
        raise InvalidConfig("need at least one video")
    if length < 2 * MAX_OFFSET + CLIP_FRAMES:
        raise InvalidConfig(
            f"length {length} < {2 * MAX_OFFSET + CLIP_FRAMES}: no room for "
            f"+-{MAX_OFFSET} shifts around a {CLIP_FRAMES}-frame clip")
    if not 0.0 <= silent_fraction < 1.0:
        raise InvalidConfig("silent_fraction must lie in [0, 1)")
    if obs_dim < latent_dim:
        raise InvalidConfig("obs_dim must be >= latent_dim for recoverability")
    rng = np.random.default_rng(seed)
    audio_proj = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (obs_dim, latent_dim))
    visual_proj = rng.normal(0.0, 1.0 / np.sqrt(latent_dim), (obs_dim, latent_dim))
    # one corpus-level silence state: quiet looks and sounds alike everywhere,
    # which is what makes out-of-sync silent windows mutually plausible
    silence = rng.standard_normal(latent_dim) if silent_fraction > 0 else None
    videos = []
    for n in range(n_videos):
        latent = _ar_track(rng, length, latent_dim)
        mask = _silent_runs(rng, length, silent_fraction)
        if mask.any():
            jitter = rng.standard_normal((int(mask.sum()), latent_dim))
            latent[mask] = silence + SILENCE_JITTER * jitter
        audio = latent @ audio_proj.T
        visual = latent @ visual_proj.T
        if noise_scale > 0:
            audio = audio + noise_scale * rng.standard_normal(audio.shape)
            visual = visual + noise_scale * rng.standard_normal(visual.shape)
        videos.append(LatentVideo(id=f"v{n:04d}", latent_track=latent,
                                  silent_mask=mask, audio_view=audio,
                                  visual_view=visual))
    return Corpus(videos=videos, audio_proj=audio_proj, visual_proj=visual_proj,
                  latent_dim=latent_dim, obs_dim=obs_dim, noise_scale=noise_scale,
                  silent_fraction=silent_fraction, seed=seed)


def split_corpus(corpus: Corpus, n_heldout: int):
    """Deterministic (train, heldout) split; heldout takes the last videos."""
    if not 0 < n_heldout < len(corpus):
        raise InvalidConfig(f"cannot hold out {n_heldout} of {len(corpus)} videos")
    train = replace(corpus, videos=corpus.videos[:-n_heldout])
    heldout = replace(corpus, videos=corpus.videos[-n_heldout:])
    return train, heldout


# --------------------------------------------------------------- batches


@dataclass
class AvBatch:
    """One training batch in view space; trainer adds the channel axis."""

    visual: np.ndarray        # (B, CLIP_FRAMES, obs_dim)
    audio_pos: np.ndarray     # (B, CLIP_FRAMES, obs_dim)
    audio_hard: np.ndarray    # (B, N_h, CLIP_FRAMES, obs_dim)
    audio_easy: np.ndarray    # (B, N_e, CLIP_FRAMES, obs_dim)
    video_ids: list
    anchors: np.ndarray       # (B,)
    hard_offsets: np.ndarray  # (B, N_h)


def _admissible_hard_offsets(spec: BatchSpec) -> np.ndarray:
    lo, hi = spec.min_hard_offset, MAX_OFFSET
    return np.concatenate([np.arange(-hi, -lo + 1), np.arange(lo, hi + 1)])


def sample_batch(corpus: Corpus, spec: BatchSpec, rng: np.random.Generator) -> AvBatch:
    """B anchors, each with an aligned positive, N_h same-video offset
    negatives, and N_e windows from other videos."""
    if spec.N_e > 0 and len(corpus) < 2:
        raise InvalidConfig("easy negatives need at least two videos")
    offsets_pool = _admissible_hard_offsets(spec)
    C = CLIP_FRAMES
    vis, pos, hard, easy, ids, anchors, h_offs = [], [], [], [], [], [], []
    for _ in range(spec.B):
        vi = int(rng.integers(len(corpus)))
        video = corpus.videos[vi]
        L = video.length
        j = int(rng.integers(MAX_OFFSET, L - MAX_OFFSET - C + 1))
        vis.append(video.visual_view[j:j + C])
        pos.append(video.audio_view[j:j + C])
        offs = rng.choice(offsets_pool, size=spec.N_h, replace=True)
        hard.append(np.stack([video.audio_view[j + o:j + o + C] for o in offs]))
        h_offs.append(offs)
        if spec.N_e:
            windows = []
            for _ in range(spec.N_e):
                other = int(rng.integers(len(corpus) - 1))
                if other >= vi:
                    other += 1
                ov = corpus.videos[other]
                s = int(rng.integers(0, ov.length - C + 1))
                windows.append(ov.audio_view[s:s + C])
            easy.append(np.stack(windows))
        ids.append(video.id)
        anchors.append(j)
    B = spec.B
    return AvBatch(
        visual=np.stack(vis),
        audio_pos=np.stack(pos),
        audio_hard=np.stack(hard),
        audio_easy=np.stack(easy) if spec.N_e else
        np.zeros((B, 0, C, corpus.obs_dim)),
        video_ids=ids,
        anchors=np.array(anchors),
        hard_offsets=np.stack(h_offs),
    )


# ------------------------------------------------------ oracle embeddings


def oracle_embeddings(corpus: Corpus, video: LatentVideo, modality: str) -> EmbeddingSequence:
    """Per-frame unit-norm embeddings from the pseudo-inverse of the
    generative map; recovers the latent exactly when noise_scale is 0."""
    if modality == "audio":
        proj, view = corpus.audio_proj, video.audio_view
    elif modality == "visual":
        proj, view = corpus.visual_proj, video.visual_view
    else:
        raise InvalidInput(f"modality must be 'audio' or 'visual', got {modality!r}")
    rec = view @ np.linalg.pinv(proj).T
    return EmbeddingSequence.from_array(rec, video_id=video.id, modality=modality)


# ------------------------------------------------------- planted defects


def plant_offset(video: LatentVideo, k: int) -> LatentVideo:
    """Desynchronize a video: k > 0 makes the audio run ahead of the images
    (content heard at frame t belongs to image frame t + k).  Both views
    are cropped to the overlap, shortening the video by |k| frames."""
    if abs(k) >= video.length:
        raise InvalidInput(f"offset {k} swallows the whole video")
    T = video.length - abs(k)
    v0 = max(0, -k)            # first image frame kept
    a0 = v0 + k                # audio source index of kept frame 0
    return LatentVideo(
        id=video.id,
        latent_track=video.latent_track[v0:v0 + T].copy(),
        silent_mask=video.silent_mask[a0:a0 + T].copy(),
        audio_view=video.audio_view[a0:a0 + T].copy(),
        visual_view=video.visual_view[v0:v0 + T].copy(),
    )


def replace_audio_segment(video: LatentVideo, start: int, stop: int,
                          corpus: Corpus, rng: np.random.Generator) -> LatentVideo:
    """Overwrite audio frames [start, stop) with independent content (an
    off-screen speaker): a fresh latent stream through the corpus's audio
    map plus the corpus noise level."""
    if not 0 <= start < stop <= video.length:
        raise InvalidInput(f"bad segment [{start}, {stop}) for length {video.length}")
    n = stop - start
    fake = _ar_track(rng, n, corpus.latent_dim) @ corpus.audio_proj.T
    if corpus.noise_scale > 0:
        fake = fake + corpus.noise_scale * rng.standard_normal(fake.shape)
    audio = video.audio_view.copy()
    audio[start:stop] = fake
    return LatentVideo(id=video.id, latent_track=video.latent_track.copy(),
                       silent_mask=video.silent_mask.copy(), audio_view=audio,
                       visual_view=video.visual_view.copy())


# ----------------------------------------------------------- persistence


def save_corpus(corpus: Corpus, out_dir):
    """Write manifest.json plus one tensor file per array."""
    os.makedirs(out_dir, exist_ok=True)
    save_tensor(os.path.join(out_dir, "audio_proj.syt"), corpus.audio_proj)
    save_tensor(os.path.join(out_dir, "visual_proj.syt"), corpus.visual_proj)
    manifest = {
        "format_version": 1,
        "latent_dim": corpus.latent_dim,
        "obs_dim": corpus.obs_dim,
        "noise_scale": corpus.noise_scale,
        "silent_fraction": corpus.silent_fraction,
        "seed": corpus.seed,
        "videos": [],
    }
    for v in corpus.videos:
        for field_name, arr in (("latent", v.latent_track),
                                ("audio", v.audio_view),
                                ("visual", v.visual_view)):
            save_tensor(os.path.join(out_dir, f"{v.id}.{field_name}.syt"), arr)
        manifest["videos"].append({
            "id": v.id,
            "length": v.length,
            "silent_mask": [int(b) for b in v.silent_mask],
        })
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")))


def _load_video(in_dir, entry) -> LatentVideo:
    vid = entry["id"]
    return LatentVideo(
        id=vid,
        latent_track=load_tensor(os.path.join(in_dir, f"{vid}.latent.syt")),
        silent_mask=np.array(entry["silent_mask"], dtype=bool),
        audio_view=load_tensor(os.path.join(in_dir, f"{vid}.audio.syt")),
        visual_view=load_tensor(os.path.join(in_dir, f"{vid}.visual.syt")),
    )


def load_corpus(in_dir) -> Corpus:
    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise InvalidInput(f"{in_dir}: no corpus manifest") from e
    except json.JSONDecodeError as e:
        raise InvalidInput(f"{path}: corrupt manifest: {e}") from e
    videos = [_load_video(in_dir, entry) for entry in manifest["videos"]]
    return Corpus(
        videos=videos,
        audio_proj=load_tensor(os.path.join(in_dir, "audio_proj.syt")),
        visual_proj=load_tensor(os.path.join(in_dir, "visual_proj.syt")),
        latent_dim=manifest["latent_dim"],
        obs_dim=manifest["obs_dim"],
        noise_scale=manifest["noise_scale"],
        silent_fraction=manifest["silent_fraction"],
        seed=manifest["seed"],
    )


def load_corpus_tolerant(in_dir):
    """(corpus of loadable videos, error strings for the rest).

    Audits keep going when individual video files are missing or corrupt;
    the manifest itself must still parse.
    """
    path = os.path.join(in_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise InvalidInput(f"{in_dir}: no corpus manifest") from e
    except json.JSONDecodeError as e:
        raise InvalidInput(f"{path}: corrupt manifest: {e}") from e
    videos, errors = [], []
    for entry in manifest["videos"]:
        try:
            videos.append(_load_video(in_dir, entry))
        except (OSError, InvalidInput) as e:
            errors.append(f"{entry['id']}: {e}")
    corpus = Corpus(
        videos=videos,
        audio_proj=load_tensor(os.path.join(in_dir, "audio_proj.syt")),
        visual_proj=load_tensor(os.path.join(in_dir, "visual_proj.syt")),
        latent_dim=manifest["latent_dim"],
        obs_dim=manifest["obs_dim"],
        noise_scale=manifest["noise_scale"],
        silent_fraction=manifest["silent_fraction"],
        seed=manifest["seed"],
    )
    return corpus, errors
