"""Shared domain types and mask algebra.

Everything in this module is an immutable value object: arrays are copied on
construction and marked read-only, so instances can be shared freely across
threads. All operations are pure functions returning new objects.

Serialization conventions:
  * masks: single-channel PNG, 0 = background, 255 = foreground
  * images: PNG for pixel space, raw little-endian float32 plus a JSON
    sidecar header ``{height, width, channels, space}`` otherwise
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Literal, Mapping

import numpy as np
from PIL import Image as PILImage

Space = Literal["pixel", "latent"]

_PIXEL_SLACK = 1e-9  # tolerated float error on the [0, 1] pixel range


class IceError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(IceError, ValueError):
    """An argument or value object violates a documented precondition."""


class DimensionMismatch(ContractViolation):
    """Two spatial objects that must share dimensions do not."""


def _require(cond: bool, msg: str, exc: type = ContractViolation) -> None:
    if not cond:
        raise exc(msg)


def _frozen_array(values, dtype, shape=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    if shape is not None and arr.shape != tuple(shape):
        raise ContractViolation(f"expected array of shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


# ---------------------------------------------------------------------------
# Raster types


@dataclass(frozen=True)
class ImageTensor:
    """Raster image: ``data`` has shape (height, width, channels).

    ``space == "pixel"`` constrains values to [0, 1]; latent values are
    unbounded.
    """

    height: int
    width: int
    channels: int
    data: np.ndarray
    space: Space = "pixel"

    def __post_init__(self):
        _require(self.height >= 1 and self.width >= 1, "height and width must be >= 1")
        _require(self.channels in (1, 3), f"channels must be 1 or 3, got {self.channels}")
        _require(self.space in ("pixel", "latent"), f"bad space {self.space!r}")
        arr = _frozen_array(self.data, np.float64, (self.height, self.width, self.channels))
        _require(np.all(np.isfinite(arr)), "image data must be finite")
        if self.space == "pixel":
            _require(
                float(arr.min()) >= -_PIXEL_SLACK and float(arr.max()) <= 1.0 + _PIXEL_SLACK,
                "pixel-space values must lie in [0, 1]",
            )
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, data: np.ndarray, space: Space = "pixel") -> "ImageTensor":
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        _require(arr.ndim == 3, f"expected 2-D or 3-D array, got ndim={arr.ndim}")
        h, w, c = arr.shape
        return cls(height=h, width=w, channels=c, data=arr, space=space)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def same_shape(self, other: "ImageTensor") -> bool:
        return self.shape == other.shape

    def as_space(self, space: Space) -> "ImageTensor":
        if space == self.space:
            return self
        return ImageTensor.from_array(self.data, space=space)


@dataclass(frozen=True)
class BinaryMask:
    """Boolean grid annotating an image of the same height/width."""

    height: int
    width: int
    bits: np.ndarray

    def __post_init__(self):
        _require(self.height >= 1 and self.width >= 1, "height and width must be >= 1")
        arr = _frozen_array(self.bits, bool, (self.height, self.width))
        object.__setattr__(self, "bits", arr)

    @classmethod
    def from_array(cls, bits: np.ndarray) -> "BinaryMask":
        arr = np.asarray(bits, dtype=bool)
        _require(arr.ndim == 2, f"mask must be 2-D, got ndim={arr.ndim}")
        return cls(height=arr.shape[0], width=arr.shape[1], bits=arr)

    @classmethod
    def empty(cls, height: int, width: int) -> "BinaryMask":
        return cls(height, width, np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, height: int, width: int) -> "BinaryMask":
        return cls(height, width, np.ones((height, width), dtype=bool))

    def coverage(self) -> float:
        return float(np.count_nonzero(self.bits)) / float(self.height * self.width)

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def complement(self) -> "BinaryMask":
        return BinaryMask(self.height, self.width, ~self.bits)

    def matches(self, other: "BinaryMask") -> bool:
        return self.height == other.height and self.width == other.width


@dataclass(frozen=True)
class AttentionMap:
    """Nonnegative spatial weights on a grid, normalizable to a distribution."""

    height: int
    width: int
    weights: np.ndarray

    def __post_init__(self):
        _require(self.height >= 1 and self.width >= 1, "height and width must be >= 1")
        arr = _frozen_array(self.weights, np.float64, (self.height, self.width))
        _require(np.all(np.isfinite(arr)), "attention weights must be finite")
        _require(float(arr.min()) >= 0.0, "attention weights must be nonnegative")
        object.__setattr__(self, "weights", arr)

    @classmethod
    def from_array(cls, weights: np.ndarray) -> "AttentionMap":
        arr = np.asarray(weights, dtype=np.float64)
        _require(arr.ndim == 2, "attention map must be 2-D")
        return cls(height=arr.shape[0], width=arr.shape[1], weights=arr)

    def total(self) -> float:
        return float(self.weights.sum())

    def normalized(self) -> "AttentionMap":
        t = self.total()
        _require(t > 0.0, "cannot normalize an all-zero attention map")
        return AttentionMap(self.height, self.width, self.weights / t)


# ---------------------------------------------------------------------------
# Concept types


@dataclass(frozen=True)
class TextConcept:
    """A retrieved vocabulary word with its retriever confidence."""

    label: str
    score: float

    def __post_init__(self):
        _require(bool(self.label), "concept label must be nonempty")
        _require(np.isfinite(self.score), "concept score must be finite")


@dataclass(frozen=True)
class ConceptRecord:
    """One localized concept: label, mask, extraction order and coverage."""

    concept: TextConcept
    mask: BinaryMask
    order: int
    coverage: float

    def __post_init__(self):
        _require(self.order >= 0, "extraction order must be >= 0")
        _require(
            abs(self.coverage - self.mask.coverage()) <= 1e-9,
            "coverage must equal mask coverage within 1e-9",
        )
        _require(0.0 < self.coverage <= 1.0, "coverage must lie in (0, 1]")


def validate_disjoint(records: "list[ConceptRecord] | tuple[ConceptRecord, ...]") -> None:
    """Check that all record masks are pairwise disjoint."""
    for i in range(len(records)):
        for j in range(i + 1, len(records)):
            a, b = records[i].mask, records[j].mask
            _require(a.matches(b), "record masks must share dimensions", DimensionMismatch)
            inter, _ = mask_intersection_union(a, b)
            _require(
                inter == 0,
                f"record masks {records[i].order} and {records[j].order} overlap",
            )


# ---------------------------------------------------------------------------
# Diffusion-schedule and embedding types


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-process variances beta_1..beta_T, each in (0, 1)."""

    T: int
    betas: tuple

    def __post_init__(self):
        _require(self.T >= 1, "T must be >= 1")
        betas = tuple(float(b) for b in self.betas)
        _require(len(betas) == self.T, "betas length must equal T")
        _require(all(0.0 < b < 1.0 for b in betas), "every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)

    @classmethod
    def linear(cls, T: int, beta_start: float, beta_end: float) -> "NoiseSchedule":
        return cls(T=T, betas=tuple(np.linspace(beta_start, beta_end, T)))

    @cached_property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative products of (1 - beta_t); strictly decreasing."""
        ab = np.cumprod(1.0 - np.asarray(self.betas, dtype=np.float64))
        ab.setflags(write=False)
        return ab


@dataclass(frozen=True)
class TokenEmbedding:
    """A named embedding vector; learnable ones live in a backend table."""

    dim: int
    values: np.ndarray
    token_id: str

    def __post_init__(self):
        _require(bool(self.token_id), "token_id must be nonempty")
        arr = _frozen_array(self.values, np.float32, (self.dim,))
        _require(bool(np.all(np.isfinite(arr))), "embedding values must be finite")
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_array(cls, values: np.ndarray, token_id: str) -> "TokenEmbedding":
        arr = np.asarray(values, dtype=np.float32)
        return cls(dim=arr.shape[0], values=arr, token_id=token_id)


@dataclass(frozen=True)
class IntrinsicAxis:
    """A decomposition axis (e.g. material) with its anchor prompt template."""

    name: str
    anchor_template: str = "a {name} concept"

    def __post_init__(self):
        _require(bool(self.name), "axis name must be nonempty")
        _require("{name}" in self.anchor_template, "anchor template must contain {name}")

    def anchor_text(self) -> str:
        return self.anchor_template.format(name=self.name)


@dataclass(frozen=True)
class LearnedConcept:
    """Per-object token bundle produced by the structured learning stage."""

    record: ConceptRecord
    conspec: TokenEmbedding
    inspec: TokenEmbedding
    intrinsics: Mapping[str, TokenEmbedding]

    def __post_init__(self):
        intr = dict(self.intrinsics)
        ids = [self.conspec.token_id, self.inspec.token_id]
        ids += [t.token_id for t in intr.values()]
        _require(len(ids) == len(set(ids)), "token ids within a concept must be distinct")
        object.__setattr__(self, "intrinsics", intr)

    def token_ids(self) -> tuple[str, ...]:
        return (self.conspec.token_id, self.inspec.token_id) + tuple(
            t.token_id for t in self.intrinsics.values()
        )

    def require_axes(self, axes: "list[IntrinsicAxis] | tuple[IntrinsicAxis, ...]") -> None:
        want = {a.name for a in axes}
        _require(
            set(self.intrinsics.keys()) == want,
            f"intrinsic keys {sorted(self.intrinsics)} != configured axes {sorted(want)}",
        )


# ---------------------------------------------------------------------------
# Mask algebra


def apply_mask(x: ImageTensor, m: BinaryMask, fill: float = 0.0) -> ImageTensor:
    """Replace pixels under true bits with ``fill``; everything else unchanged."""
    _require(
        x.height == m.height and x.width == m.width,
        f"image {x.height}x{x.width} vs mask {m.height}x{m.width}",
        DimensionMismatch,
    )
    out = np.array(x.data)
    out[m.bits] = fill
    return ImageTensor(x.height, x.width, x.channels, out, x.space)


def mask_coverage(m: BinaryMask) -> float:
    """Fraction of true bits."""
    return m.coverage()


def mask_intersection_union(a: BinaryMask, b: BinaryMask) -> tuple[int, int]:
    """Exact intersection and union counts."""
    _require(a.matches(b), "masks must share dimensions", DimensionMismatch)
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter, union


def mask_union(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    _require(a.matches(b), "masks must share dimensions", DimensionMismatch)
    return BinaryMask(a.height, a.width, a.bits | b.bits)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    inter, union = mask_intersection_union(a, b)
    return inter / union if union else 0.0


def resample_mask_nearest(m: BinaryMask, height: int, width: int) -> BinaryMask:
    """Nearest-neighbor resample, sampling source pixels at cell centers."""
    rows = np.minimum((np.floor((np.arange(height) + 0.5) * m.height / height)).astype(int), m.height - 1)
    cols = np.minimum((np.floor((np.arange(width) + 0.5) * m.width / width)).astype(int), m.width - 1)
    return BinaryMask(height, width, m.bits[np.ix_(rows, cols)])


# ---------------------------------------------------------------------------
# Serialization


def save_mask_png(m: BinaryMask, path: "str | Path") -> None:
    img = PILImage.fromarray(np.where(m.bits, 255, 0).astype(np.uint8), mode="L")
    img.save(Path(path), format="PNG")


def load_mask_png(path: "str | Path") -> BinaryMask:
    path = Path(path)
    _require(path.exists(), f"mask file not found: {path}")
    arr = np.asarray(PILImage.open(path).convert("L"))
    return BinaryMask.from_array(arr >= 128)


def save_image(x: ImageTensor, path: "str | Path") -> None:
    """PNG for pixel space; raw f32 + JSON sidecar for anything else."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        _require(x.space == "pixel", "PNG serialization is pixel-space only")
        data = np.clip(np.round(x.data * 255.0), 0, 255).astype(np.uint8)
        if x.channels == 1:
            img = PILImage.fromarray(data[:, :, 0], mode="L")
        else:
            img = PILImage.fromarray(data, mode="RGB")
        img.save(path, format="PNG")
    else:
        x.data.astype("<f4").tofile(path)
        header = {
            "height": x.height,
            "width": x.width,
            "channels": x.channels,
            "space": x.space,
        }
        path.with_suffix(path.suffix + ".json").write_text(canonical_json(header) + "\n")


def load_image(path: "str | Path", space: Space = "pixel") -> ImageTensor:
    path = Path(path)
    _require(path.exists(), f"image file not found: {path}")
    if path.suffix.lower() == ".png":
        img = PILImage.open(path)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img).astype(np.float64) / 255.0
        return ImageTensor.from_array(arr, space=space)
    header = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    raw = np.fromfile(path, dtype="<f4").astype(np.float64)
    shape = (header["height"], header["width"], header["channels"])
    _require(raw.size == shape[0] * shape[1] * shape[2], "raw image size mismatch")
    return ImageTensor.from_array(raw.reshape(shape), space=header["space"])


# ---------------------------------------------------------------------------
# Hashing / canonical JSON (shared artifact plumbing)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: "str | Path") -> str:
    return sha256_bytes(Path(path).read_bytes())
