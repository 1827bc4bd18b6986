"""Config parsing, bit-exact checkpoint serialization, and CSV emission.

Checkpoint layout: 4-byte magic, u32 format version, u32 header length,
canonical JSON header {version, config, manifest}, then each parameter as
little-endian float64 in manifest order.  Canonical JSON (sorted keys, no
whitespace) makes save-load-save byte-identical.
"""
from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass
from typing import IO, Optional, Sequence, Union

import numpy as np

from .backbone import Model, ModelConfig, variant_config
from .harness import FACTORS, SweepRecord, TaskConfig, TrainConfig

__all__ = [
    "ParsedConfig",
    "parse_config",
    "checkpoint_bytes",
    "save_checkpoint",
    "load_checkpoint",
    "restore_checkpoint",
    "restore_checkpoint_bytes",
    "CSV_HEADER",
    "csv_text",
    "emit_csv",
]

MAGIC = b"HYNT"
FORMAT_VERSION = 1

CSV_HEADER = ("factor,value,param_count,final_loss,acc_total,acc_small,"
              "acc_medium,acc_large,ratio")


# ---------------------------------------------------------------------------
# config parsing


@dataclass(frozen=True)
class ParsedConfig:
    model: ModelConfig
    train: TrainConfig
    task: TaskConfig


_MODEL_FIELDS = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_TASK_FIELDS = {f.name: f.type for f in dataclasses.fields(TaskConfig)}
_REQUIRED_MODEL = ("d", "cnn_layers", "transformer_blocks", "heads")


def _coerce(value, type_name: str, path: str):
    """Validate a JSON value against a config field type, allowing the
    JSON-natural widenings (int where float is expected, list for tuple)."""
    if type_name == "bool":
        if not isinstance(value, bool):
            raise ValueError(f"{path}: expected bool, got "
                             f"{type(value).__name__}")
        return value
    if type_name == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{path}: expected int, got "
                             f"{type(value).__name__}")
        return value
    if type_name == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{path}: expected number, got "
                             f"{type(value).__name__}")
        return float(value)
    if type_name == "str":
        if not isinstance(value, str):
            raise ValueError(f"{path}: expected string, got "
                             f"{type(value).__name__}")
        return value
    if type_name.startswith("tuple"):
        inner = "int" if "int" in type_name else "float"
        count = type_name.count("int") + type_name.count("float")
        if "..." in type_name:
            count = None
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{path}: expected array, got "
                             f"{type(value).__name__}")
        if count is not None and len(value) != count:
            raise ValueError(f"{path}: expected {count} entries, got "
                             f"{len(value)}")
        return tuple(_coerce(v, inner, f"{path}[{i}]")
                     for i, v in enumerate(value))
    raise AssertionError(f"unhandled field type {type_name!r}")


def _parse_section(raw: dict, fields: dict[str, str], prefix: str) -> dict:
    out = {}
    for key, value in raw.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in fields:
            valid = ", ".join(sorted(fields))
            raise ValueError(f"unknown key {path!r}; valid keys: {valid}")
        out[key] = _coerce(value, fields[key], path)
    return out


def parse_config(source: Union[str, os.PathLike, IO[str]]) -> ParsedConfig:
    """Parse a JSON config into model, train, and task configurations.

    Top level: optional "variant" plus flat model-field overrides, and
    optional "train" / "task" objects.  Unknown keys are rejected with the
    offending key path.  Task image size and class count default to the
    model's values when not given.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source, "r", encoding="utf-8") as f:
            text = f.read()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValueError(
            f"config top level must be an object, got "
            f"{type(raw).__name__}")

    raw = dict(raw)
    variant = raw.pop("variant", None)
    if variant is not None and not isinstance(variant, str):
        raise ValueError(f"variant: expected string, got "
                         f"{type(variant).__name__}")
    train_raw = raw.pop("train", {})
    task_raw = raw.pop("task", {})
    for name, section in (("train", train_raw), ("task", task_raw)):
        if not isinstance(section, dict):
            raise ValueError(f"{name}: expected object, got "
                             f"{type(section).__name__}")

    model_kw = _parse_section(raw, _MODEL_FIELDS, "")
    if variant is not None:
        model = variant_config(variant, **model_kw)
    else:
        missing = [k for k in _REQUIRED_MODEL if k not in model_kw]
        if missing:
            raise ValueError(
                f"missing required key {missing[0]!r} (required without "
                f"a variant: {', '.join(_REQUIRED_MODEL)})")
        model = variant_config(ModelConfig(**model_kw))

    train = TrainConfig(**_parse_section(train_raw, _TRAIN_FIELDS, "train"))

    task_kw = _parse_section(task_raw, _TASK_FIELDS, "task")
    task_kw.setdefault("image_size", model.image_size)
    task_kw.setdefault("num_classes", min(3, model.num_classes))
    task = TaskConfig(**task_kw)
    if task.image_size != model.image_size:
        raise ValueError(
            f"task.image_size: {task.image_size} does not match the model "
            f"input size {model.image_size}")
    return ParsedConfig(model=model, train=train, task=task)


# ---------------------------------------------------------------------------
# checkpoints


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(model: Model) -> bytes:
    """Serialize the model's parameters bit-exactly, with a config echo."""
    manifest = [[p, "f8", list(a.shape)] for p, a in model.params.items()]
    header = _canonical_json({
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "manifest": manifest,
    })
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(header)), header]
    chunks.extend(arr.astype("<f8", copy=False).tobytes()
                  for arr in model.params.values())
    return b"".join(chunks)


def save_checkpoint(model: Model, path: Union[str, os.PathLike]) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(checkpoint_bytes(model))
    os.replace(tmp, path)


def _parse_checkpoint(blob: bytes,
                      origin: str) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise ValueError(f"not a checkpoint file: {origin}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}; "
                         f"this build reads version {FORMAT_VERSION}")
    if len(blob) < 12 + header_len:
        raise ValueError("checkpoint truncated inside the header")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))

    manifest = header["manifest"]
    payload = blob[12 + header_len:]
    expected = sum(int(np.prod(shape)) * 8 for _, _, shape in manifest)
    if len(payload) != expected:
        raise ValueError(
            f"checkpoint truncated: payload has {len(payload)} bytes, "
            f"manifest needs {expected}")

    params: dict[str, np.ndarray] = {}
    offset = 0
    for path_name, dtype, shape in manifest:
        if dtype != "f8":
            raise ValueError(f"unsupported dtype {dtype!r} for {path_name}")
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=offset).astype(np.float64)
        params[path_name] = np.ascontiguousarray(arr.reshape(shape))
        offset += count * 8
    return header, params


def _read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        blob = f.read()
    return _parse_checkpoint(blob, repr(os.fspath(path)))


def load_checkpoint(model: Model, path: Union[str, os.PathLike]) -> None:
    """Restore parameters into an existing model.

    The whole manifest is validated against the live model before the
    first assignment, so a mismatch or truncation leaves it untouched.
    """
    header, params = _read_checkpoint(path)
    live = list(model.params)
    stored = list(params)
    for i, path_name in enumerate(stored):
        if i >= len(live) or live[i] != path_name:
            have = live[i] if i < len(live) else "<nothing>"
            raise ValueError(
                f"checkpoint manifest mismatch at position {i}: file has "
                f"{path_name!r}, model has {have!r}")
        if params[path_name].shape != model.params[path_name].shape:
            raise ValueError(
                f"checkpoint shape mismatch at {path_name!r}: file has "
                f"{params[path_name].shape}, model has "
                f"{model.params[path_name].shape}")
    if len(stored) < len(live):
        raise ValueError(
            f"checkpoint manifest mismatch at position {len(stored)}: "
            f"file has <nothing>, model has {live[len(stored)]!r}")
    for path_name, arr in params.items():
        model.params[path_name] = arr


def restore_checkpoint(path: Union[str, os.PathLike]) -> Model:
    """Rebuild a model purely from a checkpoint's config echo and payload."""
    header, params = _read_checkpoint(path)
    config = ModelConfig.from_dict(header["config"])
    return Model(config=config, params=params)


def restore_checkpoint_bytes(blob: bytes) -> Model:
    header, params = _parse_checkpoint(blob, "<in-memory blob>")
    config = ModelConfig.from_dict(header["config"])
    return Model(config=config, params=params)


# ---------------------------------------------------------------------------
# CSV emission


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def csv_text(records: Sequence[SweepRecord]) -> str:
    """Render sweep records as CSV, rows ascending by factor value."""
    factors = {r.factor for r in records}
    if len(factors) > 1:
        raise ValueError(
            f"records mix factors {sorted(factors)}; one factor per table")
    if factors and not factors <= set(FACTORS):
        raise ValueError(f"unknown factor {factors.pop()!r}")
    lines = [CSV_HEADER]
    for r in sorted(records, key=lambda r: r.value):
        lines.append(",".join([
            r.factor,
            _fmt(r.value),
            str(int(r.param_count)),
            _fmt(r.final_loss),
            _fmt(r.acc_total),
            _fmt(r.acc_small),
            _fmt(r.acc_medium),
            _fmt(r.acc_large),
            _fmt(r.ratio),
        ]))
    return "\n".join(lines) + "\n"


def emit_csv(records: Sequence[SweepRecord],
             path: Union[str, os.PathLike]) -> None:
    """Write the sweep table; bytes are stable for identical records."""
    text = csv_text(records)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(text.encode("utf-8"))
    os.replace(tmp, path)
