"""Versioned binary checkpoints.

Layout: 8-byte magic, little-endian u32 format version, u64 header length,
UTF-8 JSON header, raw little-endian float64 payload, 32-byte SHA-256 of
everything before it.  The header lists every tensor with its shape and
byte offset, the model config, the attached strategy and any classifier.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .adapt import Classifier
from .errors import FormatError, VersionError
from .model import DualEncoder, ModelConfig
from .peft import LoraModule, PromptContext
from .tensor import Tensor

MAGIC = b"2SFSCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


def _tensors(model: DualEncoder, classifier: Classifier | None):
    out = list(model.named_parameters())
    if classifier is not None:
        out.append(("classifier.phi", classifier.phi))
    return out


def dumps(model: DualEncoder, classifier: Classifier | None = None, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in _tensors(model, classifier):
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model": model.config.to_dict(),
        "strategy": model.strategy,
        "lora_merged": model.lora_merged,
        "lora": {n: {"rank": m.rank, "scale": m.scale} for n, m in model.lora.items()},
        "classifier_base": None if classifier is None else list(classifier.base),
        "tensors": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def save(path, model: DualEncoder, classifier: Classifier | None = None, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(model, classifier, meta))


def loads(blob: bytes) -> tuple[DualEncoder, Classifier | None, dict]:
    if len(blob) < _PREFIX.size + _DIGEST:
        raise FormatError("checkpoint truncated")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint checksum mismatch")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from exc
    payload = memoryview(body)[start + hlen:]

    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * n
        if end > len(payload):
            raise FormatError(f"tensor {e['name']} runs past the payload")
        arrays[e["name"]] = np.frombuffer(payload[e["offset"]:end], dtype="<f8").reshape(e["shape"]).copy()

    model = DualEncoder(ModelConfig.from_dict(header["model"]))
    for name, t in model.params.items():
        if name not in arrays:
            raise FormatError(f"checkpoint lacks tensor {name}")
        if arrays[name].shape != t.data.shape:
            raise FormatError(f"tensor {name} has shape {arrays[name].shape}, expected {t.data.shape}")
        t.data = arrays[name]
    for target, spec in header["lora"].items():
        model.lora[target] = LoraModule(target=target, A=Tensor(arrays[f"{target}.lora_A"]),
                                        B=Tensor(arrays[f"{target}.lora_B"]),
                                        rank=spec["rank"], scale=spec["scale"])
    if "text.prompt.ctx" in arrays:
        model.prompt = PromptContext(ctx=Tensor(arrays["text.prompt.ctx"]))
    model.strategy = header["strategy"]
    model.lora_merged = header["lora_merged"]
    classifier = None
    if header["classifier_base"] is not None:
        classifier = Classifier(base=tuple(header["classifier_base"]),
                                phi=Tensor(arrays["classifier.phi"]))
    return model, classifier, header["meta"]


def load(path) -> tuple[DualEncoder, Classifier | None, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(blob)
