"""Low-rank adapter math: merge updates into base weights and bound their rank.

The update is a pair of matrices A (d x r) and B (r x k) against a base
weight W (d x k).  Two merge conventions are supported: the plain additive
form W + A.B, and the scaled form W + (alpha/r).A.B used by most trainer
stacks.  Both are exposed because published write-ups are not consistent
about which one the reported alpha belongs to.

Adapter file format ``LORADPT1`` (little-endian), also written by the
training runner:

    magic    8 bytes   b"LORADPT1"
    d        uint32    rows of W / rows of A
    k        uint32    cols of W / cols of B
    r        uint32    rank
    alpha    float32   scaling numerator
    name_len uint32
    name     utf-8     target module name (name_len bytes)
    A        d*r float32, row-major
    B        r*k float32, row-major
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# projection layers that receive adapters in the fine-tuning setup
TARGET_MODULES = frozenset(
    {"q_proj", "k_proj", "v_proj", "gate_proj", "down_proj", "up_proj", "visual_proj"}
)

_MAGIC = b"LORADPT1"
_SCALE_MODES = ("paper_eq2", "alpha_over_r")


class ShapeMismatch(ValueError):
    """A, B, and W dimensions do not conform."""


class NonFinite(ValueError):
    """An input or result matrix contains NaN or infinity."""


class AdapterFormatError(ValueError):
    """Adapter file is truncated or not in the documented format."""


@dataclass
class LoraUpdate:
    A: np.ndarray
    B: np.ndarray
    rank: int
    alpha: float
    dropout: float = 0.0  # training-time metadata; merging ignores it

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.B = np.asarray(self.B, dtype=np.float64)
        if self.A.ndim != 2 or self.B.ndim != 2:
            raise ShapeMismatch("A and B must be 2-D matrices")
        if self.A.shape[1] != self.rank or self.B.shape[0] != self.rank:
            raise ShapeMismatch(
                f"rank {self.rank} inconsistent with A {self.A.shape} / B {self.B.shape}"
            )
        d, k = self.A.shape[0], self.B.shape[1]
        if self.rank < 1 or self.rank > min(d, k):
            raise ShapeMismatch(f"rank must be in 1..min({d}, {k}), got {self.rank}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not (0 <= self.dropout < 1):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if not (np.isfinite(self.A).all() and np.isfinite(self.B).all()):
            raise NonFinite("adapter matrices must be finite")

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape[0], self.B.shape[1]


@dataclass
class TargetModuleSet:
    names: frozenset[str] = field(default_factory=lambda: TARGET_MODULES)

    def __post_init__(self):
        self.names = frozenset(self.names)
        if not self.names:
            raise ValueError("target module set may not be empty")
        unknown = self.names - TARGET_MODULES
        if unknown:
            raise ValueError(f"unknown target modules: {sorted(unknown)}")


def _check_weight(W: np.ndarray) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatch(f"weight matrix must be 2-D, got shape {W.shape}")
    if not np.isfinite(W).all():
        raise NonFinite("weight matrix must be finite")
    return W


def merge(W: np.ndarray, update: LoraUpdate, scale_mode: str = "paper_eq2") -> np.ndarray:
    """Apply the low-rank update to W and return the merged weights.

    ``paper_eq2`` adds A.B as-is; ``alpha_over_r`` adds (alpha/r).A.B.
    """
    if scale_mode not in _SCALE_MODES:
        raise ValueError(f"scale_mode must be one of {_SCALE_MODES}, got {scale_mode!r}")
    W = _check_weight(W)
    if W.shape != update.shape:
        raise ShapeMismatch(f"weights {W.shape} do not match update {update.shape}")
    scale = 1.0 if scale_mode == "paper_eq2" else update.alpha / update.rank
    merged = W + scale * (update.A @ update.B)
    if not np.isfinite(merged).all():
        raise NonFinite("merge produced non-finite values")
    return merged


def delta_rank_bound(update: LoraUpdate) -> int:
    """Numeric rank of the weight delta A.B; never exceeds the configured rank."""
    return int(np.linalg.matrix_rank(update.A @ update.B))


# --- adapter file i/o ----------------------------------------------------------

def write_adapter(path: str | Path, name: str, update: LoraUpdate) -> None:
    d, k = update.shape
    name_bytes = name.encode("utf-8")
    header = _MAGIC + struct.pack(
        "<IIIfI", d, k, update.rank, float(update.alpha), len(name_bytes)
    )
    a32 = np.ascontiguousarray(update.A, dtype="<f4")
    b32 = np.ascontiguousarray(update.B, dtype="<f4")
    Path(path).write_bytes(header + name_bytes + a32.tobytes() + b32.tobytes())


def read_adapter(path: str | Path) -> tuple[str, LoraUpdate]:
    blob = Path(path).read_bytes()
    if len(blob) < len(_MAGIC) + 20 or blob[: len(_MAGIC)] != _MAGIC:
        raise AdapterFormatError(f"{path}: not a {_MAGIC.decode()} adapter file")
    offset = len(_MAGIC)
    d, k, r, alpha, name_len = struct.unpack_from("<IIIfI", blob, offset)
    offset += 20
    if len(blob) != offset + name_len + 4 * (d * r + r * k):
        raise AdapterFormatError(f"{path}: truncated or oversized adapter payload")
    name = blob[offset : offset + name_len].decode("utf-8")
    offset += name_len
    A = np.frombuffer(blob, dtype="<f4", count=d * r, offset=offset).reshape(d, r)
    offset += 4 * d * r
    B = np.frombuffer(blob, dtype="<f4", count=r * k, offset=offset).reshape(r, k)
    try:
        update = LoraUpdate(A=A, B=B, rank=r, alpha=alpha)
    except ValueError as exc:
        raise AdapterFormatError(f"{path}: {exc}") from exc
    return name, update


# --- weight matrix i/o (CLI + cross-component tests) ----------------------------

def load_weight_matrix(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return _check_weight(np.load(path))
    return _check_weight(np.array(json.loads(path.read_text()), dtype=np.float64))


def save_weight_matrix(path: str | Path, W: np.ndarray) -> None:
    path = Path(path)
    if path.suffix == ".npy":
        np.save(path, np.asarray(W, dtype=np.float64))
    else:
        path.write_text(json.dumps([[float(x) for x in row] for row in np.asarray(W)]))
