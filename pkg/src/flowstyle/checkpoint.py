"""Binary checkpoint format for named tensors.

Layout (all little-endian):

    magic "TSTY" | version u16 | count u32
    per tensor, sorted by name:
        name_len u16 | name utf-8 | rank u8 | extents u32 each
        | precision u8 (1 = float32, 2 = float64) | raw values

Round-trips are bit-exact for both precisions. Writes go through a temp
file and rename, so a crash never leaves a torn checkpoint behind.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"TSTY"
VERSION = 1

_PREC = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_PREC_OF = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}


def save(path: str, tensors: dict[str, np.ndarray]) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<HI", VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.dtype not in _PREC_OF:
            raise ContractError(f"unsupported dtype {arr.dtype} for '{name}'")
        enc = name.encode("utf-8")
        blob += struct.pack("<H", len(enc))
        blob += enc
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        prec = _PREC_OF[arr.dtype]
        blob += struct.pack("<B", prec)
        blob += arr.astype(_PREC[prec], copy=False).tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise ContractError(f"{path}: unsupported version {version}")
    off = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        (prec,) = struct.unpack_from("<B", blob, off)
        off += 1
        if prec not in _PREC:
            raise ContractError(f"{path}: unknown precision tag {prec}")
        dt = _PREC[prec]
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=off).reshape(shape)
        off += n * dt.itemsize
        out[name] = arr.astype(dt.newbyteorder("="))
    return out


def save_training_state(path: str, names: list, params: list, state: dict,
                        step: int, losses: list) -> None:
    """Checkpoint parameters, Adam moments, and the loss history.

    `names[i]` labels `params[i]` (tensors with a .data array) and the
    matching `state` moment buffers, so a restore can verify layout.
    """
    tensors = {
        "meta.step": np.array([float(step)]),
        "meta.adam_step": np.array([float(state["step"])]),
        "meta.losses": np.asarray(losses, dtype=np.float64),
    }
    for i, n in enumerate(names):
        tensors[f"param.{n}"] = params[i].data
        tensors[f"adam.m.{n}"] = state["m"][i]
        tensors[f"adam.v.{n}"] = state["v"][i]
    save(path, tensors)


def load_training_state(path: str, names: list, params: list, state: dict):
    """Restore a save_training_state checkpoint bit-exactly in place.

    Returns (step, losses). The stored names must match `names` and every
    shape must match, else the file belongs to a different setup.
    """
    tensors = load(path)
    expected = {"meta.step", "meta.adam_step", "meta.losses"}
    for n in names:
        expected.update((f"param.{n}", f"adam.m.{n}", f"adam.v.{n}"))
    if set(tensors) != expected:
        raise ContractError(f"{path} does not match the training setup")
    for i, n in enumerate(names):
        dtype = params[i].data.dtype
        for key, dst in ((f"param.{n}", params[i].data),
                         (f"adam.m.{n}", state["m"][i]),
                         (f"adam.v.{n}", state["v"][i])):
            if tensors[key].shape != dst.shape:
                raise ContractError(
                    f"{path}: {key} has shape {tensors[key].shape}, "
                    f"expected {dst.shape}")
        params[i].data = tensors[f"param.{n}"].astype(dtype)
        state["m"][i] = tensors[f"adam.m.{n}"].astype(dtype)
        state["v"][i] = tensors[f"adam.v.{n}"].astype(dtype)
    state["step"] = int(tensors["meta.adam_step"][0])
    step = int(tensors["meta.step"][0])
    return step, [float(v) for v in tensors["meta.losses"]]


def save_sidecar(path: str, fields: dict) -> None:
    """Plain `key = value` text next to a checkpoint (config, lineage)."""
    lines = [f"{k} = {fields[k]}" for k in fields]
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_sidecar(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            out[key.strip()] = val.strip()
    return out
