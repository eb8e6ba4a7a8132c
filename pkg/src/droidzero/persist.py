"""Versioned on-disk formats for models and embeddings, plus atomic writes."""

from __future__ import annotations

import base64
import contextlib
import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError
from .numerics import ParamSet
from .snn import SnnModel
from .vgae import Embedding, VgaeModel
from .zeroshot import Verdict

MODEL_FORMAT = "droidzero-model"
MODEL_VERSION = 1
EMBED_FORMAT = "droidzero-embeddings"
EMBED_VERSION = 1
VERDICT_FORMAT = "droidzero-verdicts"
VERDICT_VERSION = 1


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@contextlib.contextmanager
def atomic_output(path):
    """Yield a temporary path beside ``path``; rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    os.close(fd)
    try:
        yield tmp
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _encode_array(arr: np.ndarray, encoding: str) -> dict:
    out = {"shape": list(arr.shape), "dtype": str(arr.dtype)}
    if encoding == "base64":
        out["b64"] = base64.b64encode(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()).decode("ascii")
    elif encoding == "decimal":
        out["data"] = [float(x) for x in arr.reshape(-1)]
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    return out


def _decode_array(d: dict) -> np.ndarray:
    dtype = np.dtype(d["dtype"])
    if "b64" in d:
        arr = np.frombuffer(base64.b64decode(d["b64"]), dtype=dtype.newbyteorder("<")).astype(dtype)
    else:
        arr = np.array(d["data"], dtype=dtype)
    return arr.reshape(d["shape"])


def dump_params(kind: str, params: ParamSet, meta: dict, encoding: str = "decimal") -> str:
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "kind": kind,
        "encoding": encoding,
        "meta": meta,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "params": {k: _encode_array(v, encoding) for k, v in params.items()},
    }
    return json.dumps(doc, sort_keys=True) + "\n"


def load_params(path, kind: str, vocab_hash: Optional[str] = None):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: expected {MODEL_FORMAT} v{MODEL_VERSION}")
    if doc.get("kind") != kind:
        raise FormatError(f"{path}: holds a {doc.get('kind')} model, not {kind}")
    meta = doc["meta"]
    if vocab_hash is not None and meta.get("vocab_hash") != vocab_hash:
        raise FormatError(f"{path}: model vocabulary hash does not match the current vocabulary")
    params = ParamSet({k: _decode_array(v) for k, v in doc["params"].items()})
    for k, shape in doc["shapes"].items():
        if list(params[k].shape) != shape:
            raise FormatError(f"{path}: parameter {k} has shape {params[k].shape}, header says {shape}")
    return params, meta


def save_vgae(path, model: VgaeModel, encoding="decimal", extra: Optional[dict] = None):
    meta = {"vocab_hash": model.vocab_hash, "vocab_size": model.vocab_size,
            "hidden": list(model.hidden), "latent": model.latent, **(extra or {})}
    atomic_write_text(path, dump_params("vgae", model.params, meta, encoding))


def load_vgae(path, vocab_hash: Optional[str] = None) -> VgaeModel:
    params, meta = load_params(path, "vgae", vocab_hash)
    model = VgaeModel(params, meta["vocab_size"], meta["vocab_hash"], tuple(meta["hidden"]), meta["latent"])
    if params.shapes() != model.expected_shapes():
        raise FormatError(f"{path}: parameter shapes do not match the declared architecture")
    return model


def save_snn(path, model: SnnModel, encoding="decimal", extra: Optional[dict] = None):
    atomic_write_text(path, dump_params("snn", model.params, dict(extra or {}), encoding))


def load_snn(path) -> SnnModel:
    params, _ = load_params(path, "snn")
    if params.shapes() != SnnModel.expected_shapes():
        raise FormatError(f"{path}: parameter shapes do not match the similarity network")
    return SnnModel(params)


def dump_embeddings(embeddings, meta: dict) -> str:
    lines = [json.dumps({"format": EMBED_FORMAT, "version": EMBED_VERSION, **meta}, sort_keys=True)]
    for e in embeddings:
        lines.append(json.dumps({"app_id": e.app_id, "label": e.label, "family": e.family,
                                 "vector": [float(x) for x in e.vector]}, sort_keys=True))
    return "\n".join(lines) + "\n"


def read_embeddings(path):
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(ln) for ln in fh if ln.strip()]
    if not rows or rows[0].get("format") != EMBED_FORMAT or rows[0].get("version") != EMBED_VERSION:
        raise FormatError(f"{path}: not a {EMBED_FORMAT} v{EMBED_VERSION} file")
    return rows[0], [Embedding(np.array(r["vector"]), r["app_id"], r["label"], r.get("family"))
                     for r in rows[1:]]


def dump_verdicts(verdicts, meta: dict) -> str:
    lines = [json.dumps({"format": VERDICT_FORMAT, "version": VERDICT_VERSION, **meta}, sort_keys=True)]
    lines.extend(json.dumps(v.to_dict(), sort_keys=True) for v in verdicts)
    return "\n".join(lines) + "\n"


def read_verdicts(path):
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(ln) for ln in fh if ln.strip()]
    if not rows or rows[0].get("format") != VERDICT_FORMAT or rows[0].get("version") != VERDICT_VERSION:
        raise FormatError(f"{path}: not a {VERDICT_FORMAT} v{VERDICT_VERSION} file")
    return rows[0], [Verdict.from_dict(r) for r in rows[1:]]
