"""Versioned binary checkpoints for encoder pairs.

Layout: magic b"SYFG" | version u16 LE | manifest length u32 LE | canonical
JSON manifest (sorted keys, compact separators, UTF-8) | concatenated
float64 little-endian C-order tensor payloads in manifest order.

The manifest records every tensor's owner ("visual", "audio", ...), name,
kind (param or stat), and shape, plus enough architecture metadata to
rebuild each ToyEncoder.  Round-trips are bit-exact: save(load(save(x)))
produces identical bytes.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput
from .encoder import EncoderArch, ToyEncoder

MAGIC = b"SYFG"
VERSION = 1


def _arch_to_json(arch: EncoderArch) -> dict:
    return {
        "input_shape": list(arch.input_shape),
        "channels": list(arch.channels),
        "embed_dim": arch.embed_dim,
        "kernel_size": arch.kernel_size,
        "pool_after": list(arch.pool_after),
        "dropblocks": [list(s) for s in arch.dropblocks],
    }


def _arch_from_json(d: dict) -> EncoderArch:
    return EncoderArch(
        input_shape=tuple(d["input_shape"]),
        channels=tuple(d["channels"]),
        embed_dim=d["embed_dim"],
        kernel_size=d["kernel_size"],
        pool_after=tuple(d["pool_after"]),
        dropblocks=tuple((s[0], s[1], s[2], s[3]) for s in d["dropblocks"]),
    )


@dataclass
class CheckpointData:
    encoders: dict          # owner -> ToyEncoder
    log_inv_tau: float      # None when the file carries no temperature
    meta: dict


def save_checkpoint(path, encoders: dict, log_inv_tau: float = None, meta: dict = None):
    """Write encoders (+ optional temperature scalar and metadata) to path."""
    tensors = []
    blobs = []
    for owner, enc in encoders.items():
        for kind, d in (("param", enc.params), ("stat", enc.stats)):
            for name, arr in d.items():
                a = np.asarray(arr, dtype="<f8", order="C")
                tensors.append({"owner": owner, "name": name, "kind": kind,
                                "shape": list(a.shape)})
                blobs.append(a.tobytes(order="C"))
    if log_inv_tau is not None:
        tensors.append({"owner": "", "name": "log_inv_tau", "kind": "scalar",
                        "shape": []})
        blobs.append(np.float64(log_inv_tau).tobytes())
    manifest = {
        "version": VERSION,
        "arch": {owner: _arch_to_json(enc.arch) for owner, enc in encoders.items()},
        "meta": meta or {},
        "tensors": tensors,
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(mbytes)))
        fh.write(mbytes)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise InvalidInput(f"{path}: bad magic; not a checkpoint")
    version, mlen = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise InvalidInput(f"{path}: unsupported checkpoint version {version}")
    try:
        manifest = json.loads(data[10:10 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise InvalidInput(f"{path}: corrupt manifest: {e}") from e
    offset = 10 + mlen
    loaded = {}
    log_inv_tau = None
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1
        nbytes = 8 * n
        if offset + nbytes > len(data):
            raise InvalidInput(f"{path}: truncated payload at tensor {t['name']}")
        arr = np.frombuffer(data[offset:offset + nbytes], dtype="<f8")
        arr = arr.reshape(t["shape"]).copy() if t["shape"] else np.float64(arr[0])
        offset += nbytes
        if t["kind"] == "scalar" and t["name"] == "log_inv_tau":
            log_inv_tau = float(arr)
            continue
        loaded[(t["owner"], t["kind"], t["name"])] = arr
    if offset != len(data):
        raise InvalidInput(f"{path}: {len(data) - offset} trailing bytes")

    encoders = {}
    for owner, arch_json in manifest["arch"].items():
        arch = _arch_from_json(arch_json)
        params = {k[2]: v for k, v in loaded.items() if k[0] == owner and k[1] == "param"}
        stats = {k[2]: v for k, v in loaded.items() if k[0] == owner and k[1] == "stat"}
        # scalar params came back as 0-d copies; keep them as ndarrays
        params = {k: np.asarray(v) for k, v in params.items()}
        encoders[owner] = ToyEncoder(arch, params, stats)
    return CheckpointData(encoders=encoders, log_inv_tau=log_inv_tau,
                          meta=manifest.get("meta", {}))
