"""Checkpoint reading/writing in the single-file tensor interchange format.

Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON header
mapping tensor names to ``{"dtype", "shape", "data_offsets"}`` (offsets are
relative to the start of the data section), then the raw little-endian
tensor data, contiguous and row-major. An optional ``__metadata__`` entry
in the header carries a string-to-string map.

Supported dtypes are F16, BF16, F32 and F64. On load every tensor is
upcast losslessly to float64 for computation; the original dtype is kept
so a save rounds back to it. bf16 has no numpy dtype, so it is carried as
the high 16 bits of float32 and rounded to nearest-even on write.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointIntegrityError,
    CheckpointParseError,
    ManifestError,
    NonFiniteTensorError,
)

_DTYPE_SIZES = {"F16": 2, "BF16": 2, "F32": 4, "F64": 8}


@dataclass(frozen=True)
class TensorEntry:
    """One tensor: storage dtype tag, shape, and float64 values."""

    dtype: str
    shape: tuple[int, ...]
    values: np.ndarray

    def __post_init__(self):
        if self.dtype not in _DTYPE_SIZES:
            raise CheckpointIntegrityError(f"unsupported dtype {self.dtype!r}")
        if tuple(self.values.shape) != self.shape:
            raise CheckpointIntegrityError(
                f"value shape {self.values.shape} does not match declared shape {self.shape}"
            )


class Checkpoint:
    """An ordered map from tensor name to TensorEntry.

    Iteration order is always lexicographic by name, independent of
    insertion order, so downstream results are deterministic.
    """

    def __init__(self, tensors: dict[str, TensorEntry] | None = None,
                 metadata: dict[str, str] | None = None):
        self._tensors = dict(sorted((tensors or {}).items()))
        self.metadata = dict(metadata) if metadata else None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def entry(self, name: str) -> TensorEntry:
        return self._tensors[name]

    def values(self, name: str) -> np.ndarray:
        return self._tensors[name].values

    def items(self):
        return self._tensors.items()

    def with_tensor(self, name: str, entry: TensorEntry) -> "Checkpoint":
        tensors = dict(self._tensors)
        tensors[name] = entry
        return Checkpoint(tensors, self.metadata)


def _upcast(raw: bytes, dtype: str, count: int) -> np.ndarray:
    if dtype == "F16":
        return np.frombuffer(raw, dtype="<f2", count=count).astype(np.float64)
    if dtype == "BF16":
        bits = np.frombuffer(raw, dtype="<u2", count=count).astype(np.uint32)
        return (bits << 16).view(np.float32).astype(np.float64)
    if dtype == "F32":
        return np.frombuffer(raw, dtype="<f4", count=count).astype(np.float64)
    return np.frombuffer(raw, dtype="<f8", count=count).astype(np.float64)


def _downcast(name: str, values: np.ndarray, dtype: str) -> bytes:
    flat = np.ascontiguousarray(values, dtype=np.float64).ravel()
    bad = np.flatnonzero(~np.isfinite(flat))
    if bad.size:
        raise NonFiniteTensorError(
            f"tensor {name!r} has a non-finite value at flat index {int(bad[0])}",
            tensor=name, index=int(bad[0]),
        )
    if dtype == "F64":
        out = flat.astype("<f8")
    elif dtype == "F32":
        with np.errstate(over="ignore"):
            out = flat.astype("<f4")
    elif dtype == "F16":
        with np.errstate(over="ignore"):
            out = flat.astype("<f2")
    else:  # BF16: round float32 to nearest-even on the high 16 bits
        bits = flat.astype(np.float32).view(np.uint32)
        rounded = ((bits + 0x7FFF + ((bits >> 16) & 1)) >> 16).astype("<u2")
        out = rounded
        widened = (rounded.astype(np.uint32) << 16).view(np.float32)
        bad = np.flatnonzero(~np.isfinite(widened))
        if bad.size:
            raise NonFiniteTensorError(
                f"tensor {name!r} overflows BF16 at flat index {int(bad[0])}",
                tensor=name, index=int(bad[0]),
            )
        return out.tobytes()
    if dtype in ("F32", "F16"):
        bad = np.flatnonzero(~np.isfinite(out.astype(np.float64)))
        if bad.size:
            raise NonFiniteTensorError(
                f"tensor {name!r} overflows {dtype} at flat index {int(bad[0])}",
                tensor=name, index=int(bad[0]),
            )
    return out.tobytes()


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read a checkpoint file, materializing every tensor as float64."""
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise CheckpointParseError(
            f"file is {len(blob)} bytes, too short for the 8-byte header length", offset=0
        )
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise CheckpointParseError(
            f"header length {header_len} runs past the end of the file", offset=8
        )
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except UnicodeDecodeError as e:
        raise CheckpointParseError(f"header is not valid UTF-8: {e.reason}", offset=8 + e.start)
    except json.JSONDecodeError as e:
        raise CheckpointParseError(f"header is not valid JSON: {e.msg}", offset=8 + e.pos)
    if not isinstance(header, dict):
        raise CheckpointParseError("header is not a JSON object", offset=8)

    metadata = header.pop("__metadata__", None)
    if metadata is not None and not (
        isinstance(metadata, dict)
        and all(isinstance(k, str) and isinstance(v, str) for k, v in metadata.items())
    ):
        raise CheckpointParseError("__metadata__ must be a string-to-string map", offset=8)

    data = blob[8 + header_len :]
    tensors: dict[str, TensorEntry] = {}
    for name, info in header.items():
        if not isinstance(info, dict):
            raise CheckpointIntegrityError(f"tensor {name!r}: entry is not an object", tensor=name)
        try:
            dtype = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            start, end = (int(x) for x in info["data_offsets"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointIntegrityError(
                f"tensor {name!r}: missing or malformed dtype/shape/data_offsets", tensor=name
            ) from None
        if dtype not in _DTYPE_SIZES:
            raise CheckpointIntegrityError(f"tensor {name!r}: unsupported dtype {dtype!r}", tensor=name)
        if any(d < 0 for d in shape):
            raise CheckpointIntegrityError(f"tensor {name!r}: negative dimension", tensor=name)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * _DTYPE_SIZES[dtype]
        if start < 0 or end < start or end - start != nbytes:
            raise CheckpointIntegrityError(
                f"tensor {name!r}: data_offsets [{start}, {end}) do not cover "
                f"{nbytes} bytes for shape {list(shape)}",
                tensor=name,
            )
        if end > len(data):
            raise CheckpointIntegrityError(
                f"tensor {name!r}: data section truncated "
                f"(needs bytes up to {end}, have {len(data)})",
                tensor=name,
            )
        values = _upcast(data[start:end], dtype, count).reshape(shape)
        tensors[name] = TensorEntry(dtype=dtype, shape=shape, values=values)
    return Checkpoint(tensors, metadata)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write a checkpoint, rounding each tensor back to its recorded dtype.

    Refuses to write non-finite values, including values that would
    overflow a 16-bit storage dtype.
    """
    header: dict = {}
    if ckpt.metadata:
        header["__metadata__"] = dict(sorted(ckpt.metadata.items()))
    payload = bytearray()
    for name, entry in ckpt.items():
        raw = _downcast(name, entry.values, entry.dtype)
        start = len(payload)
        payload.extend(raw)
        header[name] = {
            "dtype": entry.dtype,
            "shape": list(entry.shape),
            "data_offsets": [start, start + len(raw)],
        }
    header_bytes = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    pad = (8 - len(header_bytes) % 8) % 8
    header_bytes += b" " * pad
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(bytes(payload))


@dataclass
class ExpertCompatibility:
    """Name/shape differences of one expert against the pretrained model."""

    missing: list[str] = field(default_factory=list)
    extra: list[str] = field(default_factory=list)
    shape_mismatch: list[str] = field(default_factory=list)

    @property
    def compatible(self) -> bool:
        return not (self.missing or self.extra or self.shape_mismatch)


@dataclass
class CompatibilityReport:
    per_expert: list[ExpertCompatibility]

    @property
    def compatible(self) -> bool:
        return all(e.compatible for e in self.per_expert)

    def to_dict(self) -> dict:
        return {
            "compatible": self.compatible,
            "experts": [
                {
                    "compatible": e.compatible,
                    "missing": e.missing,
                    "extra": e.extra,
                    "shape_mismatch": e.shape_mismatch,
                }
                for e in self.per_expert
            ],
        }


def validate_compatible(pretrained: Checkpoint, experts: list[Checkpoint]) -> CompatibilityReport:
    """Report, per expert, tensors missing from it, extra in it, or reshaped."""
    report = CompatibilityReport(per_expert=[])
    pre_names = set(pretrained.names())
    for expert in experts:
        entry = ExpertCompatibility()
        exp_names = set(expert.names())
        entry.missing = sorted(pre_names - exp_names)
        entry.extra = sorted(exp_names - pre_names)
        for name in sorted(pre_names & exp_names):
            if pretrained.entry(name).shape != expert.entry(name).shape:
                entry.shape_mismatch.append(name)
        report.per_expert.append(entry)
    return report


@dataclass
class Manifest:
    """Merge inputs: one pretrained checkpoint plus one or more experts."""

    pretrained_path: Path
    expert_paths: list[Path]
    lora_mode: bool = False
    name_remap: list[tuple[str, str]] | None = None

    def __post_init__(self):
        if not self.expert_paths:
            raise ManifestError("manifest lists no expert checkpoints")


def load_manifest(path: str | Path) -> Manifest:
    """Parse a manifest JSON document.

    Schema: ``{"pretrained": path, "experts": [path...], "lora": bool,
    "name_remap": [[pattern, replacement], ...]}`` where the last two keys
    are optional. Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text("utf-8"))
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"manifest {path} is not valid JSON: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ManifestError("manifest must be a JSON object")
    try:
        pretrained = doc["pretrained"]
        experts = doc["experts"]
    except KeyError as e:
        raise ManifestError(f"manifest is missing key {e.args[0]!r}") from None
    if not isinstance(experts, list) or not all(isinstance(p, str) for p in experts):
        raise ManifestError("manifest 'experts' must be a list of paths")
    lora = doc.get("lora", False)
    if not isinstance(lora, bool):
        raise ManifestError("manifest 'lora' must be a boolean")
    remap = doc.get("name_remap")
    rules = None
    if remap is not None:
        try:
            rules = [(str(p), str(r)) for p, r in remap]
        except (TypeError, ValueError):
            raise ManifestError("manifest 'name_remap' must be a list of [pattern, replacement] pairs") from None
    base = path.parent
    return Manifest(
        pretrained_path=base / pretrained,
        expert_paths=[base / p for p in experts],
        lora_mode=lora,
        name_remap=rules,
    )


def apply_name_remap(ckpt: Checkpoint, rules: list[tuple[str, str]]) -> Checkpoint:
    """Rewrite tensor names through a list of regex substitution rules."""
    tensors: dict[str, TensorEntry] = {}
    for name, entry in ckpt.items():
        new = name
        for pattern, repl in rules:
            new = re.sub(pattern, repl, new)
        if new in tensors:
            raise CheckpointIntegrityError(
                f"name remap maps two tensors to {new!r}", tensor=new
            )
        tensors[new] = entry
    return Checkpoint(tensors, ckpt.metadata)
