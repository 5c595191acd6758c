"""``DASA1`` container: magic line, length-prefixed JSON header, then raw
little-endian float64 arrays in header order.

Header JSON is written with sorted keys and no timestamps so that equal
models give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .nn_core import AutoencoderParams
from .sae_dnn import SaeDnnModel

MAGIC = b"DASA1\n"
FORMAT_VERSION = 1
_AE_FIELDS = ("w", "b", "w_dec", "b_dec")


def write_container(path, kind: str, meta: dict, arrays: dict) -> None:
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values())
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(hb)) + hb + body)


def read_container(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: missing DASA1 header")
    pos = len(MAGIC)
    (hl,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    header = json.loads(raw[pos:pos + hl].decode("utf-8"))
    pos += hl
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {header.get('version')}")
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape)) if shape else 1
        arrays[spec["name"]] = np.frombuffer(raw, "<f8", n, pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return header["kind"], header["meta"], arrays


def _ae_arrays(prefix, ae):
    return {f"{prefix}{f}": getattr(ae, f) for f in _AE_FIELDS}


def _ae_from(prefix, arrays):
    return AutoencoderParams(*(arrays[f"{prefix}{f}"] for f in _AE_FIELDS))


def save_autoencoder(ae: AutoencoderParams, path, seed=0, hyperparams=None) -> None:
    meta = {"dims": [ae.n_in, ae.n_hidden], "seed": int(seed), "hyperparams": hyperparams or {}}
    write_container(path, "autoencoder", meta, _ae_arrays("", ae))


def load_autoencoder(path) -> AutoencoderParams:
    kind, _, arrays = read_container(path)
    if kind != "autoencoder":
        raise ValueError(f"{path}: holds a {kind!r}, not an autoencoder")
    return _ae_from("", arrays)


def save_model(model: SaeDnnModel, path) -> None:
    arrays = {**_ae_arrays("layer1.", model.layer1), **_ae_arrays("layer2.", model.layer2),
              "target_w": model.target_w, "target_b": model.target_b}
    meta = {"dims": list(model.dims()), "mode": model.output_mode, **model.meta}
    write_container(path, "sae_dnn", meta, arrays)


def load_model(path) -> SaeDnnModel:
    kind, meta, arrays = read_container(path)
    if kind != "sae_dnn":
        raise ValueError(f"{path}: holds a {kind!r}, not an SAE-DNN model")
    extra = {k: v for k, v in meta.items() if k not in ("dims", "mode")}
    return SaeDnnModel(_ae_from("layer1.", arrays), _ae_from("layer2.", arrays),
                       arrays["target_w"], arrays["target_b"], meta["mode"], extra)
