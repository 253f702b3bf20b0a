"""Atomic file output, provenance-tagged CSV tables and model checkpoints.

Every CSV starts with a comment line ``# config_hash=<hash> seed=<seed>``
followed by a header row.  Floats are written with 17 significant digits
so identical runs give byte-identical files.

Checkpoints are JSON documents (``format = "safelearn-checkpoint"``,
``version = 1``) whose arrays are stored as
``{"dtype", "shape", "data"}`` with base64-encoded little-endian bytes.
"""
from __future__ import annotations

import base64
import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .config import CampaignConfig, dump_config, parse_config
from .density import KdeEstimate
from .kernels import KernelModel, MaternKernel

__all__ = [
    "CheckpointError",
    "atomic_write_text",
    "write_csv",
    "read_csv",
    "encode_array",
    "decode_array",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_FORMAT",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_FORMAT = "safelearn-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable checkpoint, or one written by an incompatible version."""


def atomic_write_text(path, text: str) -> Path:
    """Write ``text`` to a temporary sibling file, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _cell(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return format(value, ".17g")
    return str(value)


def write_csv(path, header, rows, config_hash: str, seed: int) -> Path:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash} seed={seed}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def read_csv(path):
    """Return ``(meta, header, rows)``; ``rows`` are lists of strings."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing provenance line")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split())
    reader = csv.reader(lines[1:])
    header = next(reader)
    return meta, header, list(reader)


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype=np.float64)
    return {"dtype": "<f8", "shape": list(a.shape),
            "data": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def decode_array(obj) -> np.ndarray:
    if obj.get("dtype") != "<f8":
        raise CheckpointError(f"unsupported array dtype {obj.get('dtype')!r}")
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).copy()


def _kernel_dict(k: MaternKernel) -> dict:
    return {"smoothness": k.smoothness, "length_scale": k.length_scale, "amplitude": k.amplitude}


def _jsonable_lam(lam):
    return lam if isinstance(lam, str) else float(lam)


def save_checkpoint(path, model: KernelModel, config: CampaignConfig, seed: int,
                    extra=None) -> Path:
    """Serialize a fitted model with the configuration that produced it."""
    kdes = []
    for kde in model.kdes:
        kdes.append(None if kde is None else
                    {"bandwidth": kde.bandwidth, "samples": encode_array(kde.samples)})
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config_hash": config.config_hash(),
        "seed": int(seed),
        "config": dump_config(config),
        "kernel": _kernel_dict(model.kernel),
        "kde_kernel": _kernel_dict(model.kde_kernel),
        "lam": _jsonable_lam(model.lam),
        "kde_lam": _jsonable_lam(model.kde_lam),
        "time_scale": model.time_scale,
        "input_dim": model.input_dim,
        "inputs": encode_array(model.inputs),
        "s_targets": encode_array(model.s_targets),
        "r_targets": encode_array(model.r_targets),
        "prior_var": encode_array(np.asarray(model.prior_var, dtype=float)),
        "kdes": kdes,
        "extra": extra or {},
    }
    return atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(model, config, document)``; the model comes back fitted."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    try:
        config = parse_config(doc["config"])
        model = KernelModel(MaternKernel(**doc["kernel"]), MaternKernel(**doc["kde_kernel"]),
                            lam=doc["lam"], kde_lam=doc["kde_lam"],
                            time_scale=doc["time_scale"], input_dim=doc["input_dim"])
        kdes = [None if k is None else KdeEstimate(decode_array(k["samples"]), k["bandwidth"])
                for k in doc["kdes"]]
        inputs = decode_array(doc["inputs"])
        if len(inputs):
            model.set_data(inputs, decode_array(doc["s_targets"]),
                           decode_array(doc["r_targets"]), kdes)
        model.fit()
        model.prior_var = decode_array(doc["prior_var"]).tolist()
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed checkpoint {path}: {exc}") from exc
    return model, config, doc
