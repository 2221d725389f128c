"""Portable tensor files and checkpoint directories.

Tensor file layout (little-endian):

    8 bytes   magic b"TNSR0001"
    1 byte    dtype code (0 = float32, 1 = uint8)
    1 byte    rank
    rank * 8  unsigned extents
    payload   row-major element data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .tensor import BNState, Network, NetworkSpec

MAGIC = b"TNSR0001"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
MANIFEST = "manifest.json"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


class TensorFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def encode_tensor(a: np.ndarray) -> bytes:
    a = np.asarray(a)
    code = CODES.get(a.dtype)
    if code is None:
        raise TensorFormatError(f"unsupported dtype {a.dtype}; only float32 and uint8 are portable")
    if a.ndim > 255:
        raise TensorFormatError("rank exceeds 255")
    head = MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + np.ascontiguousarray(a, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:8] != MAGIC:
        raise TensorFormatError("bad magic; not a TNSR0001 tensor file")
    code, rank = struct.unpack_from("<BB", buf, 8)
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    off = 10 + 8 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 10)
    dt = DTYPES[code]
    expect = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expect:
        raise TensorFormatError(f"payload is {len(buf) - off} bytes, header implies {expect}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path: PathLike, a: np.ndarray) -> None:
    Path(path).write_bytes(encode_tensor(a))


def load_tensor(path: PathLike) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

BN_FIELDS = ("gamma", "beta", "running_mean", "running_var")


def save_checkpoint(model: Network, out_dir: PathLike, extra: dict | None = None) -> Path:
    """Write one tensor file per parameter plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = []
    for name in sorted(model.weights):
        fname = f"{name}.tnsr"
        save_tensor(out / fname, model.weights[name].astype(np.float32))
        params.append({"name": name, "kind": "weight", "file": fname, "shape": list(model.weights[name].shape)})
    bn = {}
    for name in sorted(model.bn):
        st = model.bn[name]
        for f in BN_FIELDS:
            fname = f"{name}.{f}.tnsr"
            save_tensor(out / fname, getattr(st, f).astype(np.float32))
            params.append({"name": f"{name}.{f}", "kind": "bn", "file": fname, "shape": [st.channels]})
        bn[name] = {"eps": st.eps, "momentum": st.momentum}
    manifest = {"format_version": FORMAT_VERSION, "network": model.spec.to_dict(), "params": params, "bn": bn}
    if extra:
        manifest["extra"] = extra
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _need(d: dict, key: str, where: str):
    if not isinstance(d, dict) or key not in d:
        raise CheckpointError(f"manifest: missing field '{where}{key}'")
    return d[key]


def load_checkpoint(ckpt_dir: PathLike) -> Network:
    root = Path(ckpt_dir)
    mpath = root / MANIFEST
    if not mpath.exists():
        raise CheckpointError(f"no {MANIFEST} in {root}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest: invalid JSON ({exc})") from exc
    version = _need(manifest, "format_version", "")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"manifest: field 'format_version' is {version!r}, expected {FORMAT_VERSION}")
    net = _need(manifest, "network", "")
    try:
        spec = NetworkSpec.from_dict(net)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"manifest: field 'network' is invalid ({exc})") from exc
    params = _need(manifest, "params", "")
    bn_meta = _need(manifest, "bn", "")
    weights, bn_arrays = {}, {}
    for i, p in enumerate(params):
        name = _need(p, "name", f"params[{i}].")
        kind = _need(p, "kind", f"params[{i}].")
        fname = _need(p, "file", f"params[{i}].")
        shape = _need(p, "shape", f"params[{i}].")
        try:
            a = load_tensor(root / fname)
        except (OSError, TensorFormatError) as exc:
            raise CheckpointError(f"manifest: params[{i}].file {fname!r} unreadable ({exc})") from exc
        if list(a.shape) != list(shape):
            raise CheckpointError(f"manifest: params[{i}].shape {shape} != file shape {list(a.shape)}")
        if kind == "weight":
            weights[name] = a
        elif kind == "bn":
            bn_arrays[name] = a
        else:
            raise CheckpointError(f"manifest: params[{i}].kind must be 'weight' or 'bn', got {kind!r}")
    bn = {}
    for name, meta in bn_meta.items():
        vals = {}
        for f in BN_FIELDS:
            key = f"{name}.{f}"
            if key not in bn_arrays:
                raise CheckpointError(f"manifest: params entry '{key}' missing")
            vals[f] = bn_arrays[key]
        bn[name] = BNState(eps=float(_need(meta, "eps", f"bn.{name}.")),
                           momentum=float(_need(meta, "momentum", f"bn.{name}.")), **vals)
    model = Network(spec, weights, bn)
    expected = Network.init(spec)
    for k, v in expected.weights.items():
        if k not in weights or weights[k].shape != v.shape:
            raise CheckpointError(f"manifest: weight '{k}' missing or misshapen for the declared network")
    for k in expected.bn:
        if k not in bn:
            raise CheckpointError(f"manifest: bn entry '{k}' missing for the declared network")
    return model


def save_dataset(out_dir: PathLike, split: str, images: np.ndarray, labels: np.ndarray) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / f"{split}_images.tnsr", images.astype(np.float32))
    save_tensor(out / f"{split}_labels.tnsr", labels.astype(np.uint8))


def load_dataset(root: PathLike, split: str):
    """Read ``<split>_images.tnsr`` (float32 NCHW) and ``<split>_labels.tnsr`` (uint8)."""
    r = Path(root)
    x = load_tensor(r / f"{split}_images.tnsr")
    y = load_tensor(r / f"{split}_labels.tnsr")
    if x.dtype != np.float32 or x.ndim != 4:
        raise TensorFormatError(f"{split} images must be float32 NCHW, got {x.dtype} {x.shape}")
    if y.dtype != np.uint8 or y.shape != (x.shape[0],):
        raise TensorFormatError(f"{split} labels must be uint8 of length {x.shape[0]}")
    return x, y.astype(np.int64)
