"""Command-line surface: gen-data, train, gradcheck, eval, audit.

Every command is a deterministic function of its resolved configuration:
primary outputs (JSON, JSONL, tensors, checkpoints, PNGs) are byte-stable
across re-runs; wall-clock timestamps go only to the run.log sidecar.

Exit codes: 0 ok, 1 check failure, 2 bad input or IO, 3 training
divergence (the last good checkpoint is still written).
"""

import argparse
import copy
import json
import os
import sys
import time

from .errors import (
    InvalidConfig,
    InvalidInput,
    ShapeError,
    SyncforgeError,
    TrainingDiverged,
)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT = 2
EXIT_DIVERGED = 3

_DATA_KEYS = ("n_videos", "length", "latent_dim", "obs_dim", "noise_scale",
              "silent_fraction")
_BATCH_KEYS = ("B", "N_h", "N_e", "w_e", "min_hard_offset")
_TRAIN_KEYS = ("loss", "learning_rate", "beta1", "beta2", "eps",
               "epochs_main", "epochs_bn_tune", "bn_refresh_steps",
               "steps_per_epoch", "dropblock", "margin", "embed_dim",
               "channels", "heldout_videos")
_MEL_KEYS = ("sample_rate", "window_size", "hop_size", "n_mels", "fmin",
             "fmax", "frames_per_second_video", "power_floor")
_TOP_KEYS = ("preset", "seed", "data", "batch", "train", "mel")


def _desk_preset() -> dict:
    return {
        "seed": 0,
        "data": {"n_videos": 24, "length": 72, "latent_dim": 6,
                 "obs_dim": 24, "noise_scale": 0.05, "silent_fraction": 0.0},
        "batch": {"B": 8, "N_h": 15, "N_e": 15, "w_e": 0.1,
                  "min_hard_offset": 2},
        "train": {"loss": "bbce", "learning_rate": 3e-3, "beta1": 0.9,
                  "beta2": 0.999, "eps": 1e-8, "epochs_main": 40,
                  "epochs_bn_tune": 5, "bn_refresh_steps": 512,
                  "steps_per_epoch": 24, "dropblock": True, "margin": 1.0,
                  "embed_dim": 32, "channels": [16, 32],
                  "heldout_videos": 4},
        "mel": {"sample_rate": 16000, "window_size": 800, "hop_size": 200,
                "n_mels": 80, "fmin": 55.0, "fmax": 7600.0,
                "frames_per_second_video": 25, "power_floor": 1e-5},
    }


def _paper_preset() -> dict:
    # published protocol values; desk hardware is not expected to run this
    preset = _desk_preset()
    preset["batch"].update({"B": 256, "N_h": 15, "N_e": 15, "w_e": 0.1})
    preset["train"].update({"learning_rate": 1e-4, "epochs_main": 600,
                            "epochs_bn_tune": 50})
    return preset


PRESETS = {"desk": _desk_preset, "paper": _paper_preset}


def _check_keys(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise InvalidConfig(f"unknown {where} keys: {', '.join(unknown)}")


def resolve_config(config_path=None, preset=None, seed=None, loss=None) -> dict:
    """Preset defaults, overlaid by the config file, then by CLI flags."""
    base_name = preset or "desk"
    if base_name not in PRESETS:
        raise InvalidConfig(f"unknown preset {base_name!r}")
    resolved = PRESETS[base_name]()
    resolved["preset"] = base_name
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidConfig("config root must be a JSON object")
        _check_keys(doc, _TOP_KEYS, "config")
        file_preset = doc.get("preset")
        if file_preset is not None and preset is None:
            if file_preset not in PRESETS:
                raise InvalidConfig(f"unknown preset {file_preset!r}")
            resolved = PRESETS[file_preset]()
            resolved["preset"] = file_preset
        for section, keys in (("data", _DATA_KEYS), ("batch", _BATCH_KEYS),
                              ("train", _TRAIN_KEYS), ("mel", _MEL_KEYS)):
            if section in doc:
                if not isinstance(doc[section], dict):
                    raise InvalidConfig(f"{section} must be a JSON object")
                _check_keys(doc[section], keys, section)
                resolved[section].update(copy.deepcopy(doc[section]))
        if "seed" in doc:
            resolved["seed"] = int(doc["seed"])
    if seed is not None:
        resolved["seed"] = int(seed)
    if loss is not None:
        resolved["train"]["loss"] = loss
    return resolved


def _train_config(resolved: dict):
    from .data import BatchSpec
    from .training import TrainConfig

    t = dict(resolved["train"])
    t["channels"] = tuple(t["channels"])
    return TrainConfig(batch=BatchSpec(**resolved["batch"]),
                       seed=resolved["seed"], **t)


def _mel_config(resolved: dict):
    from .dsp import MelConfig

    return MelConfig(**resolved["mel"])


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def _write_text(path: str, text: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


class _RunLog:
    """Timestamped sidecar; the only file allowed to differ between reruns."""

    def __init__(self, out_dir: str, argv):
        self.path = os.path.join(out_dir, "run.log")
        self._fh = open(self.path, "w", encoding="utf-8")
        self.note(f"argv: {' '.join(argv)}")

    def note(self, message: str):
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        self._fh.write(f"{stamp} {message}\n")
        self._fh.flush()

    def close(self, message: str = "done"):
        self.note(message)
        self._fh.close()


def _prepare_out(out_dir: str, argv) -> _RunLog:
    os.makedirs(out_dir, exist_ok=True)
    return _RunLog(out_dir, argv)


# --------------------------------------------------------------- commands


def cmd_gen_data(args, argv) -> int:
    from .data import generate_corpus, save_corpus

    resolved = resolve_config(args.config, args.preset, args.seed)
    corpus = generate_corpus(seed=resolved["seed"], **resolved["data"])
    log = _prepare_out(args.out, argv)
    save_corpus(corpus, args.out)
    _write_text(os.path.join(args.out, "resolved_config.json"),
                _canonical(resolved))
    log.close(f"wrote {len(corpus)} videos to {args.out}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    from .data import load_corpus
    from .figures import training_curves
    from .nn.checkpoint import save_checkpoint
    from .training import train

    resolved = resolve_config(args.config, args.preset, args.seed, args.loss)
    config = _train_config(resolved)
    corpus = load_corpus(args.data)
    log = _prepare_out(args.out, argv)
    log.note(f"training on {len(corpus)} videos, loss={config.loss}")
    ckpt_path = os.path.join(args.out, "checkpoint.syc")

    def emit(result, diagnostics, diverged: bool):
        meta = {"loss": config.loss, "seed": resolved["seed"],
                "preset": resolved["preset"], "diverged": diverged}
        save_checkpoint(ckpt_path, result.encoders,
                        log_inv_tau=result.log_inv_tau, meta=meta)
        lines = "".join(_canonical(d.to_json()) for d in diagnostics)
        _write_text(os.path.join(args.out, "diagnostics.jsonl"), lines)
        _write_text(os.path.join(args.out, "resolved_config.json"),
                    _canonical(resolved))
        if diagnostics:
            training_curves(diagnostics,
                            os.path.join(args.out, "training_curves.png"))

    try:
        result, diagnostics = train(corpus, config)
    except TrainingDiverged as exc:
        last = exc.last_good_checkpoint
        if last is not None:
            emit(last, last.diagnostics, diverged=True)
        log.close(f"diverged: {exc}")
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    emit(result, diagnostics, diverged=False)
    log.close(f"checkpoint at {ckpt_path}")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    from .gradcheck import run_suite

    report = run_suite(seed=args.seed if args.seed is not None else 0,
                       inject_fault=args.inject_fault)
    print(report.to_text())
    if args.out:
        log = _prepare_out(args.out, argv)
        _write_text(os.path.join(args.out, "gradcheck.json"),
                    _canonical(report.to_json()))
        log.close("report written")
    if report.passed:
        return EXIT_OK
    offenders = ", ".join(r.name for r in report.failures())
    print(f"gradient check failed: {offenders}", file=sys.stderr)
    return EXIT_CHECK_FAILED


def _load_embedder(spec: str, seed: int):
    """Returns (label, fn(corpus, video) -> (v_seq, a_seq))."""
    from .data import oracle_embeddings
    from .embeddings import EmbeddingSequence
    from .nn.checkpoint import load_checkpoint
    from .training import embed_sequences

    if spec == "oracle":
        def embed(corpus, video):
            return (oracle_embeddings(corpus, video, "visual"),
                    oracle_embeddings(corpus, video, "audio"))
        return "oracle", None, embed
    if spec == "random":
        import zlib

        import numpy as np

        from .data import CLIP_FRAMES

        def embed(corpus, video):
            rng = np.random.default_rng((seed, zlib.crc32(video.id.encode())))
            T = video.length - CLIP_FRAMES + 1

            def mk(modality):
                return EmbeddingSequence.from_array(
                    rng.standard_normal((T, 32)),
                    video_id=video.id, modality=modality)
            return mk("visual"), mk("audio")
        return "random", None, embed
    ckpt = load_checkpoint(spec)

    def embed(corpus, video):
        return embed_sequences(ckpt, video)
    return "checkpoint", ckpt, embed


def cmd_eval(args, argv) -> int:
    from .data import load_corpus
    from .evaluation import CLIP_LENGTHS, accuracy_table
    from .figures import accuracy_figure

    resolved = resolve_config(args.config, args.preset, args.seed)
    corpus = load_corpus(args.data)
    label, _, embed = _load_embedder(args.checkpoint, resolved["seed"])
    pairs = []
    for video in corpus.videos:
        v_seq, a_seq = embed(corpus, video)
        pairs.append((v_seq, a_seq, 0))
    table = accuracy_table(pairs, clip_lengths=CLIP_LENGTHS)
    log = _prepare_out(args.out, argv)
    payload = table.to_json()
    payload["embeddings"] = label
    _write_text(os.path.join(args.out, "accuracy.json"), _canonical(payload))
    _write_text(os.path.join(args.out, "accuracy.txt"), table.to_text())
    accuracy_figure(table, os.path.join(args.out, "accuracy.png"))
    print(table.to_text(), end="")
    log.close("eval complete")
    return EXIT_OK


def cmd_audit(args, argv) -> int:
    from .data import load_corpus_tolerant
    from .figures import audit_histograms
    from .losses import Temperature
    from .quality import dataset_audit, sync_report

    resolved = resolve_config(args.config, args.preset, args.seed)
    label, ckpt, embed = _load_embedder(args.checkpoint, resolved["seed"])
    tau = Temperature(ckpt.log_inv_tau).tau if ckpt is not None \
        else Temperature().tau
    corpus, errors = load_corpus_tolerant(args.data)
    reports = []
    for video in corpus.videos:
        v_seq, a_seq = embed(corpus, video)
        reports.append(sync_report(a_seq, v_seq, tau, video_id=video.id))
    log = _prepare_out(args.out, argv)
    lines = "".join(_canonical(r.to_json()) for r in reports)
    _write_text(os.path.join(args.out, "reports.jsonl"), lines)
    summary = dataset_audit(reports, errors=errors)
    _write_text(os.path.join(args.out, "summary.json"),
                _canonical(summary.to_json()))
    audit_histograms(summary, os.path.join(args.out, "audit_hist.png"))
    kept = summary.keep_count
    print(f"audited {len(reports)} videos ({label}): keep {kept}, "
          f"drop {summary.drop_count}, errors {len(errors)}")
    log.close("audit complete")
    return EXIT_OK


# ------------------------------------------------------------------ entry


def _add_common(parser, out_required: bool = True):
    parser.add_argument("--config", default=None, help="RunConfig JSON path")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", required=out_required, default=None,
                        help="output directory")
    parser.add_argument("--preset", choices=sorted(PRESETS), default=None)
    parser.add_argument("--threads", type=int, default=None,
                        help="cap numeric thread pools")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="syncforge",
        description="Audio-visual synchronization laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus")
    _add_common(p)

    p = sub.add_parser("train", help="train the dual encoders")
    _add_common(p)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--loss", default=None,
                   choices=["bbce", "infonce", "bce", "contrastive", "pm"])

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _add_common(p, out_required=False)
    p.add_argument("--inject-fault", default=None,
                   help="flip the named check's analytic sign (self-test)")

    p = sub.add_parser("eval", help="offset accuracy table")
    _add_common(p)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint path, or 'oracle' / 'random'")

    p = sub.add_parser("audit", help="per-video sync-quality reports")
    _add_common(p)
    p.add_argument("--data", required=True, help="corpus directory")
    p.add_argument("--checkpoint", required=True,
                   help="checkpoint path, or 'oracle'")
    return parser


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "gradcheck": cmd_gradcheck,
    "eval": cmd_eval,
    "audit": cmd_audit,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("--threads must be >= 1", file=sys.stderr)
            return EXIT_INPUT
        # must land before numpy first loads its BLAS; command modules are
        # imported lazily for exactly this reason
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return _COMMANDS[args.command](args, argv)
    except (InvalidConfig, InvalidInput, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SyncforgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def entry():
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
