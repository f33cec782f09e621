"""PNG and checkpoint I/O, and the key=value run-config format.

Checkpoint layout (all integers little-endian)::

    bytes 0-7    magic  b"ATDCKPT\\0"
    bytes 8-11   uint32 format version
    bytes 12-19  uint64 header length L
    next L bytes UTF-8 JSON header (sorted keys):
                   model_config, iteration, rng_state, adam_step,
                   tensors: [{name, shape, offset, count}, ...]
    remainder    float64 little-endian payload, tensors back to back

Tensor names are ``param/<dotted.name>``, ``adam_m/<dotted.name>`` and
``adam_v/<dotted.name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .model import AtdModel, ModelConfig, build_model
from .train import AdamState

MAGIC = b"ATDCKPT\x00"
VERSION = 1


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def load_png(path) -> np.ndarray:
    """8-bit PNG -> float ``(3, H, W)`` in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() != ".png":
        raise OSError(f"{path}: only PNG images are supported")
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise OSError(f"{path}: not a PNG file")
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (Image.UnidentifiedImageError, SyntaxError) as exc:
        raise OSError(f"{path}: unreadable image ({exc})") from exc
    return arr.transpose(2, 0, 1) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    """Float ``(3, H, W)`` or ``(H, W)`` in [0, 1] -> 8-bit PNG."""
    arr = to_uint8(img)
    if arr.ndim == 3:
        arr = arr.transpose(1, 2, 0)
    Image.fromarray(arr).save(Path(path), format="PNG")


def save_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(Path(path), format="PNG")


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    adam_step: int = 0
    rng_state: dict | None = None
    iteration: int = 0

    @classmethod
    def capture(cls, model: AtdModel, optimizer: AdamState | None = None,
                rng: np.random.Generator | None = None, iteration: int = 0) -> "Checkpoint":
        opt = optimizer or AdamState()
        return cls(
            model.config,
            {n: t.data.copy() for n, t in model.named_parameters()},
            {n: a.copy() for n, a in opt.m.items()},
            {n: a.copy() for n, a in opt.v.items()},
            opt.step,
            None if rng is None else rng.bit_generator.state,
            iteration,
        )

    def build(self) -> AtdModel:
        model = build_model(self.config)
        named = dict(model.named_parameters())
        if set(named) != set(self.params):
            missing = sorted(set(named) ^ set(self.params))[:5]
            raise CheckpointError(f"parameter table does not match the model config: {missing}")
        for name, t in named.items():
            if t.shape != self.params[name].shape:
                raise CheckpointError(f"{name}: shape {self.params[name].shape} != {t.shape}")
            t.data[...] = self.params[name]
        return model

    def optimizer(self) -> AdamState:
        return AdamState(self.adam_step, {k: v.copy() for k, v in self.adam_m.items()},
                         {k: v.copy() for k, v in self.adam_v.items()})

    def rng(self) -> np.random.Generator | None:
        if self.rng_state is None:
            return None
        bitgen = getattr(np.random, self.rng_state["bit_generator"])()
        bitgen.state = self.rng_state
        return np.random.Generator(bitgen)


def _tables(ckpt: Checkpoint):
    for prefix, table in (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v)):
        for name in sorted(table) if prefix != "param" else table:
            yield f"{prefix}/{name}", table[name]


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in _tables(ckpt):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    header = {
        "model_config": ckpt.config.to_dict(),
        "iteration": ckpt.iteration,
        "adam_step": ckpt.adam_step,
        "rng_state": ckpt.rng_state,
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(blob)))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not an ATD checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads version {VERSION}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    payload = np.frombuffer(raw, dtype="<f8", offset=20 + hlen)
    tables: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        prefix, name = e["name"].split("/", 1)
        arr = payload[e["offset"]:e["offset"] + e["count"]].astype(np.float64).reshape(e["shape"])
        tables[prefix][name] = arr
    return Checkpoint(ModelConfig(**header["model_config"]), tables["param"], tables["adam_m"],
                      tables["adam_v"], header["adam_step"], header["rng_state"], header["iteration"])


# ---------------------------------------------------------------------------
# run config files
# ---------------------------------------------------------------------------


def _coerce(raw: str, kind):
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if kind == "ints":
        return tuple(int(v) for v in raw.replace(",", " ").split())
    if kind == "floats":
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return kind(raw)


def parse_run_config(text: str, schema: dict[str, object]) -> dict:
    """Parse ``key = value`` lines (``#`` comments) against ``schema`` (key -> type)."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = _coerce(value, schema[key])
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return out


def load_run_config(path, schema: dict[str, object]) -> dict:
    return parse_run_config(Path(path).read_text(), schema)


def schema_of(cls, extra: dict | None = None) -> dict[str, object]:
    """Config-file schema derived from a dataclass's field defaults."""
    schema = {}
    for f in fields(cls):
        default = f.default
        if isinstance(default, bool):
            schema[f.name] = bool
        elif isinstance(default, int):
            schema[f.name] = int
        elif isinstance(default, float):
            schema[f.name] = float
        elif isinstance(default, tuple) or f.name in ("betas", "lr_milestones"):
            schema[f.name] = "floats" if f.name == "betas" else "ints"
        else:
            schema[f.name] = str
    schema.update(extra or {})
    return schema

