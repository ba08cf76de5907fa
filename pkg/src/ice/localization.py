"""Stage one: iterative concept localization.

Retrieve the top text concept, segment it, record the mask, remove the
region, and repeat until the unmasked pixel proportion falls to the
threshold. The masked-so-far union is tracked explicitly rather than
inferred from zero pixels, so a legitimately dark object is never counted
as already masked. Guards beyond the basic loop (iteration cap, empty
retrieval, degenerate masks) make the loop total against imperfect
backends.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from .core import (
    BinaryMask,
    ConceptRecord,
    ContractViolation,
    IceError,
    ImageTensor,
    TextConcept,
    _require,
    apply_mask,
    canonical_json,
    load_image,
    load_mask_png,
    mask_union,
    save_image,
    save_mask_png,
    sha256_file,
    validate_disjoint,
)

TERMINATIONS = ("below_threshold", "max_iterations", "empty_retrieval", "degenerate_mask")

MANIFEST_NAME = "concepts.json"
MANIFEST_VERSION = 1


class LocalizationError(IceError, RuntimeError):
    """A backend failure inside the extraction loop, stamped with its iteration."""


@dataclass(frozen=True)
class LocalizationConfig:
    """Loop controls: stop threshold plus totality guards."""

    tau: float = 0.05
    max_iterations: int = 16
    min_mask_coverage: float = 0.005
    fill: float = 0.0

    def __post_init__(self):
        _require(0.0 < self.tau < 1.0, "tau must lie in (0, 1)")
        _require(self.max_iterations >= 1, "max_iterations must be >= 1")
        _require(0.0 <= self.min_mask_coverage < 1.0, "min_mask_coverage must lie in [0, 1)")


@dataclass(frozen=True)
class LocalizationResult:
    records: tuple
    final_proportion: float
    termination: str

    def __post_init__(self):
        _require(self.termination in TERMINATIONS, f"bad termination {self.termination!r}")
        _require(0.0 <= self.final_proportion <= 1.0, "final_proportion must lie in [0, 1]")
        records = tuple(self.records)
        for idx, rec in enumerate(records):
            _require(rec.order == idx, "records must be ordered by extraction index")
        object.__setattr__(self, "records", records)


def pixel_proportion(x: ImageTensor, masked_so_far: BinaryMask) -> float:
    """Fraction of pixels not yet attributed to any extracted concept."""
    _require(
        x.height == masked_so_far.height and x.width == masked_so_far.width,
        "image and mask dimensions must match",
    )
    total = x.height * x.width
    return (total - masked_so_far.count()) / total


def localize(
    x: ImageTensor,
    retriever: Callable,
    segmentor: Callable,
    cfg: LocalizationConfig,
) -> LocalizationResult:
    """Run the extract-and-mask loop on a pixel-space image.

    ``retriever(image, k)`` must return a descending-score list of
    TextConcept (ties broken lexicographically); ``segmentor(image,
    concept)`` must return a BinaryMask of matching dimensions.
    """
    _require(x.space == "pixel", "localize expects a pixel-space image")
    masked = BinaryMask.empty(x.height, x.width)
    records: list[ConceptRecord] = []
    current = x
    rho = 1.0
    termination = "below_threshold"
    iteration = 0
    while rho > cfg.tau:
        if iteration >= cfg.max_iterations:
            termination = "max_iterations"
            break
        try:
            candidates = retriever(current, 1)
        except IceError:
            raise
        except Exception as exc:
            raise LocalizationError(f"retriever failed at iteration {iteration}: {exc}") from exc
        if not candidates:
            termination = "empty_retrieval"
            break
        top = candidates[0]
        try:
            mask = segmentor(current, top)
        except IceError:
            raise
        except Exception as exc:
            raise LocalizationError(
                f"segmentor failed at iteration {iteration} on {top.label!r}: {exc}"
            ) from exc
        _require(
            mask.height == x.height and mask.width == x.width,
            f"segmentor returned a {mask.height}x{mask.width} mask at iteration {iteration}",
        )
        coverage = mask.coverage()
        if coverage < cfg.min_mask_coverage:
            termination = "degenerate_mask"
            break
        records.append(ConceptRecord(concept=top, mask=mask, order=iteration, coverage=coverage))
        current = apply_mask(current, mask, fill=cfg.fill)
        masked = mask_union(masked, mask)
        rho = pixel_proportion(x, masked)
        iteration += 1
    validate_disjoint(records)
    return LocalizationResult(records=tuple(records), final_proportion=rho, termination=termination)


# ---------------------------------------------------------------------------
# Stage-one manifest (the contract consumed by stage two)


def write_manifest(
    result: LocalizationResult,
    image: ImageTensor,
    out_dir: "str | Path",
    config_hash: str = "",
) -> Path:
    """Write concepts.json, the mask PNGs, and a copy of the input image."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_image(image, out_dir / "image.png")
    entries = []
    for rec in result.records:
        mask_name = f"mask_{rec.order}.png"
        save_mask_png(rec.mask, out_dir / mask_name)
        entries.append(
            {
                "order": rec.order,
                "label": rec.concept.label,
                "score": rec.concept.score,
                "coverage": rec.coverage,
                "mask": mask_name,
                "termination": result.termination,
            }
        )
    doc = {
        "version": MANIFEST_VERSION,
        "records": entries,
        "termination": result.termination,
        "final_proportion": result.final_proportion,
        "image": "image.png",
        "config_hash": config_hash,
    }
    doc["checksum"] = _manifest_checksum(doc)
    path = out_dir / MANIFEST_NAME
    path.write_text(canonical_json(doc) + "\n")
    return path


def _manifest_checksum(doc: dict) -> str:
    from .core import sha256_bytes

    stripped = {k: v for k, v in doc.items() if k != "checksum"}
    return sha256_bytes(canonical_json(stripped).encode("utf-8"))


def read_manifest(manifest_dir: "str | Path") -> tuple:
    """Load a stage-one manifest directory -> (LocalizationResult, image)."""
    manifest_dir = Path(manifest_dir)
    path = manifest_dir / MANIFEST_NAME if manifest_dir.is_dir() else manifest_dir
    _require(path.exists(), f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    _require(doc.get("version") == MANIFEST_VERSION, f"unsupported manifest version {doc.get('version')}")
    if _manifest_checksum(doc) != doc.get("checksum"):
        raise ContractViolation(f"manifest checksum mismatch in {path}")
    base = path.parent
    image = load_image(base / doc["image"])
    records = []
    for entry in doc["records"]:
        mask = load_mask_png(base / entry["mask"])
        records.append(
            ConceptRecord(
                concept=TextConcept(label=entry["label"], score=entry["score"]),
                mask=mask,
                order=entry["order"],
                coverage=entry["coverage"],
            )
        )
    result = LocalizationResult(
        records=tuple(records),
        final_proportion=doc["final_proportion"],
        termination=doc["termination"],
    )
    return result, image
