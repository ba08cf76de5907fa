"""Metrics: Hungarian-matched mask quality, concept similarity and
classification scores, intrinsic-axis description scores, and pixel
labeling accuracy.

Encoders are any objects exposing ``embed_image(ImageTensor)`` and
``embed_text(str)`` plus ``encoder_id`` / ``image_signed`` / ``text_signed``
attributes. Vectors are normalized before cosines; when an encoder yields
negative cosines for a metric's modality, the score is mapped to [0, 1] via
(1 + cos) / 2 and the applied mode is recorded in reports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import (
    BinaryMask,
    ContractViolation,
    IceError,
    ImageTensor,
    _require,
    mask_intersection_union,
)


class EvaluationError(IceError, ValueError):
    """Invalid metric inputs (empty ground truth, missing fixtures, ...)."""


# ---------------------------------------------------------------------------
# Assignment


def _assignment_total(similarity: np.ndarray, pairs) -> float:
    return float(sum(similarity[i, j] for i, j in pairs))


def hungarian_match(similarity: np.ndarray) -> list:
    """One-to-one assignment of size min(n, m) maximizing total similarity.

    Among equally-optimal assignments the lexicographically smallest pair
    list (lowest indices first) is returned.
    """
    sim = np.asarray(similarity, dtype=np.float64)
    _require(sim.ndim == 2, "similarity must be a matrix")
    _require(bool(np.all(np.isfinite(sim))), "similarity entries must be finite")
    n, m = sim.shape

    def solve(rows, cols):
        if not rows or not cols:
            return []
        sub = sim[np.ix_(rows, cols)]
        ri, ci = linear_sum_assignment(-sub)
        return [(rows[i], cols[j]) for i, j in zip(ri, ci)]

    rows = list(range(n))
    cols = list(range(m))
    best_total = _assignment_total(sim, solve(rows, cols))
    tol = 1e-12 * max(1.0, abs(best_total))

    chosen: list = []
    fixed_total = 0.0
    avail_cols = cols
    for row in range(n):
        if len(chosen) == min(n, m):
            break
        matched = False
        rest_rows = [r for r in range(row + 1, n)]
        for col in avail_cols:
            remainder = solve(rest_rows, [c for c in avail_cols if c != col])
            total = fixed_total + sim[row, col] + _assignment_total(sim, remainder)
            if total >= best_total - tol:
                chosen.append((row, col))
                fixed_total += sim[row, col]
                avail_cols = [c for c in avail_cols if c != col]
                matched = True
                break
        if not matched:
            # row is unmatched in every optimal assignment
            remainder = solve(rest_rows, avail_cols)
            total = fixed_total + _assignment_total(sim, remainder)
            _require(total >= best_total - tol, "assignment search lost optimality")
    return chosen


# ---------------------------------------------------------------------------
# Mask evaluation


@dataclass(frozen=True)
class MatchReport:
    assignment: tuple
    per_pair: tuple
    aggregate: dict
    unmatched_pred: int
    unmatched_gt: int

    def __post_init__(self):
        pairs = tuple(tuple(p) for p in self.assignment)
        _require(len({i for i, _ in pairs}) == len(pairs), "assignment must be one-to-one")
        _require(len({j for _, j in pairs}) == len(pairs), "assignment must be one-to-one")
        for key, value in self.aggregate.items():
            _require(0.0 <= value <= 1.0, f"aggregate {key} out of [0, 1]")
        object.__setattr__(self, "assignment", pairs)
        object.__setattr__(self, "per_pair", tuple(dict(p) for p in self.per_pair))
        object.__setattr__(self, "aggregate", dict(self.aggregate))


def evaluate_masks(pred: Sequence[BinaryMask], gt: Sequence[BinaryMask]) -> MatchReport:
    """Hungarian-matched IoU / recall / precision between mask sets.

    Pairing maximizes IoU; aggregates are means over matched pairs, and
    unmatched masks on either side are counted but excluded from the means.
    """
    if len(gt) == 0:
        raise EvaluationError("ground-truth mask set is empty")
    sim = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            inter, union = mask_intersection_union(p, g)
            sim[i, j] = inter / union if union else 0.0
    pairs = hungarian_match(sim) if len(pred) else []
    per_pair = []
    for i, j in pairs:
        inter, union = mask_intersection_union(pred[i], gt[j])
        p_count = pred[i].count()
        g_count = gt[j].count()
        per_pair.append(
            {
                "pred": i,
                "gt": j,
                "iou": inter / union if union else 0.0,
                "recall": inter / g_count if g_count else 0.0,
                "precision": inter / p_count if p_count else 0.0,
            }
        )
    if per_pair:
        aggregate = {
            "miou": float(np.mean([p["iou"] for p in per_pair])),
            "recall": float(np.mean([p["recall"] for p in per_pair])),
            "precision": float(np.mean([p["precision"] for p in per_pair])),
        }
    else:
        aggregate = {"miou": 0.0, "recall": 0.0, "precision": 0.0}
    return MatchReport(
        assignment=tuple((i, j) for i, j in pairs),
        per_pair=tuple(per_pair),
        aggregate=aggregate,
        unmatched_pred=len(pred) - len(pairs),
        unmatched_gt=len(gt) - len(pairs),
    )


# ---------------------------------------------------------------------------
# Similarity metrics


@dataclass(frozen=True)
class SimilarityReport:
    sim_identity: float
    sim_composition: float
    acc_top1: float
    acc_top3: float
    encoder_id: str

    def __post_init__(self):
        for name in ("sim_identity", "sim_composition", "acc_top1", "acc_top3"):
            value = getattr(self, name)
            _require(0.0 <= value <= 1.0, f"{name} out of [0, 1]")


def _normalized(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64).ravel()
    norm = float(np.linalg.norm(v))
    return v / norm if norm > 0 else v


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    un, vn = _normalized(u), _normalized(v)
    if np.array_equal(un, vn):
        return 1.0
    return float(min(1.0, max(-1.0, un @ vn)))


def resolve_mode(encoder, kinds: str, mode: str = "auto") -> str:
    """Pick "raw" or "mapped01" for a metric touching the given modalities.

    ``kinds`` is a string over {"image", "text"}; the affine map is used as
    soon as any touched modality can yield negative cosines.
    """
    if mode != "auto":
        _require(mode in ("raw", "mapped01"), f"bad similarity mode {mode!r}")
        return mode
    signed = ("image" in kinds and encoder.image_signed) or ("text" in kinds and encoder.text_signed)
    return "mapped01" if signed else "raw"


def _score(cos_value: float, mode: str) -> float:
    return (1.0 + cos_value) / 2.0 if mode == "mapped01" else cos_value


def sim_identity(concept_images, gt_crops, encoder, mode: str = "auto") -> float:
    """Mean over concepts of mean similarity between generations and the crop."""
    _require(len(concept_images) == len(gt_crops), "need one image list per concept")
    _require(len(gt_crops) > 0, "need at least one concept")
    mode = resolve_mode(encoder, "image", mode)
    per_concept = []
    for images, crop in zip(concept_images, gt_crops):
        _require(len(images) > 0, "each concept needs at least one generated image")
        crop_emb = encoder.embed_image(crop)
        sims = [_score(cosine(encoder.embed_image(img), crop_emb), mode) for img in images]
        per_concept.append(float(np.mean(sims)))
    return float(np.mean(per_concept))


def sim_composition(composed_images, original_image, encoder, mode: str = "auto") -> float:
    """Similarity between jointly-composed generations and the original."""
    if isinstance(composed_images, ImageTensor):
        composed_images = [composed_images]
    _require(len(composed_images) > 0, "need at least one composed image")
    mode = resolve_mode(encoder, "image", mode)
    orig = encoder.embed_image(original_image)
    sims = [_score(cosine(encoder.embed_image(img), orig), mode) for img in composed_images]
    return float(np.mean(sims))


def acc_topk(generated, prototypes, k: int, encoder) -> float:
    """Fraction of generations whose own concept ranks in the top-k prototypes."""
    _require(len(generated) == len(prototypes), "need one generation list per concept")
    n_classes = len(prototypes)
    if k > n_classes:
        raise EvaluationError(f"k={k} exceeds the {n_classes} prototype classes")
    proto_emb = [_normalized(encoder.embed_image(p)) for p in prototypes]
    hits = 0
    total = 0
    for idx, images in enumerate(generated):
        for img in images:
            e = _normalized(encoder.embed_image(img))
            sims = np.array([e @ p for p in proto_emb])
            # stable ranking: ties broken by class index
            order = np.lexsort((np.arange(n_classes), -sims))
            if idx in order[:k]:
                hits += 1
            total += 1
    _require(total > 0, "no generated images to classify")
    return hits / total


# ---------------------------------------------------------------------------
# Intrinsic-axis description scores


def icbench_scores(
    concepts,
    descriptions: Mapping,
    backend,
    encoder,
    seeds=tuple(range(8)),
    mode: str = "auto",
) -> dict:
    """Per-axis text-text / text-visual description match for learned tokens.

    ``concepts`` maps concept ids to {axis: token_id}; the "object" axis is
    carried by the concept's conspec token. ``descriptions`` maps concept
    ids to {axis: description string}. For text-visual similarity, eight
    images are generated from the token (fixed seeds) and compared with the
    description.
    """
    mode = resolve_mode(encoder, "text image", mode)
    axis_tt: dict = {}
    axis_tv: dict = {}
    for concept_id, token_by_axis in concepts.items():
        if concept_id not in descriptions:
            raise EvaluationError(f"descriptions fixture is missing concept {concept_id!r}")
        for axis, token_id in token_by_axis.items():
            if axis not in descriptions[concept_id]:
                raise EvaluationError(
                    f"descriptions fixture is missing axis {axis!r} for {concept_id!r}"
                )
            desc = descriptions[concept_id][axis]
            desc_emb = encoder.embed_text(desc)
            prompt_emb = encoder.embed_text(f"a photo of {token_id}")
            axis_tt.setdefault(axis, []).append(_score(cosine(desc_emb, prompt_emb), mode))
            cond = backend.encode_text(f"a photo of a {token_id}")
            sims = []
            for seed in seeds:
                image = backend.generate(cond, seed)
                sims.append(_score(cosine(desc_emb, encoder.embed_image(image)), mode))
            axis_tv.setdefault(axis, []).append(float(np.mean(sims)))
    return {
        axis: {"sim_tt": float(np.mean(axis_tt[axis])), "sim_tv": float(np.mean(axis_tv[axis]))}
        for axis in sorted(axis_tt)
    }


# ---------------------------------------------------------------------------
# Pixel labeling


def hungarian_align_labels(pred_labels: np.ndarray, gt_labels: np.ndarray) -> np.ndarray:
    """Relabel prediction ids to maximize pixel overlap with ground truth.

    Prediction ids left unmatched keep fresh ids disjoint from the ground
    truth's, so they count as errors downstream.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    _require(pred.shape == gt.shape, "label grids must share dimensions")
    pred_ids = sorted(np.unique(pred).tolist())
    gt_ids = sorted(np.unique(gt).tolist())
    overlap = np.zeros((len(pred_ids), len(gt_ids)))
    for i, pid in enumerate(pred_ids):
        sel = pred == pid
        for j, gid in enumerate(gt_ids):
            overlap[i, j] = np.count_nonzero(sel & (gt == gid))
    pairs = hungarian_match(overlap)
    mapping = {pred_ids[i]: gt_ids[j] for i, j in pairs}
    spare = int(max(gt_ids)) + 1 if gt_ids else 0
    out = np.empty_like(pred)
    for pid in pred_ids:
        if pid not in mapping:
            mapping[pid] = spare
            spare += 1
        out[pred == pid] = mapping[pid]
    return out


def pixel_label_metrics(pred_labels: np.ndarray, gt_labels: np.ndarray) -> dict:
    """Pixel accuracy and mean per-class IoU of two label grids.

    Labels are compared as given; align ids first (e.g. with
    ``hungarian_align_labels``) when they come from an unsupervised method.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    _require(pred.size > 0, "label grids must be nonempty")
    _require(pred.shape == gt.shape, "label grids must share dimensions")
    acc = float(np.count_nonzero(pred == gt)) / pred.size
    classes = sorted(set(np.unique(pred).tolist()) | set(np.unique(gt).tolist()))
    ious = []
    for cls in classes:
        inter = np.count_nonzero((pred == cls) & (gt == cls))
        union = np.count_nonzero((pred == cls) | (gt == cls))
        ious.append(inter / union if union else 0.0)
    return {"acc": acc, "miou": float(np.mean(ious))}
