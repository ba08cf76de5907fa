"""Stage two: structured concept learning.

Token initialization, the object-level phase, the intrinsic phase, concept
refinement, prompt-template sampling and the learned-concept store. Training
is plain fixed-rate gradient descent on token embeddings (plus the backend's
trainable head during refinement), with one concept sampled per step and
reconstruction restricted to that concept's mask.

Determinism: one seeded generator drives everything, and each step draws in
a fixed order (concept, template, timestep, noise, then prior-batch draws
during refinement). Two runs with equal seeds and config produce identical
loss histories and byte-identical exports.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backends import DiffusionBackend, EncodedPrompt, PromptSpec, UnknownWordError, add_noise
from .core import (
    AttentionMap,
    ConceptRecord,
    ContractViolation,
    IceError,
    ImageTensor,
    IntrinsicAxis,
    LearnedConcept,
    TokenEmbedding,
    _require,
    canonical_json,
    sha256_bytes,
    sha256_file,
)
from .localization import LocalizationResult
from .losses import (
    LossBreakdown,
    LossWeights,
    intrinsic_triplet_loss_grad,
    prior_preservation_loss_grad,
    recon_loss_grad,
    total_loss,
    triplet_loss_grad,
    wasserstein_attention_grad,
)

PHASES = ("phase1", "phase2", "refine", "done")

STORE_MANIFEST = "concepts_manifest.json"
STORE_EMBEDDINGS = "embeddings.bin"
STORE_LOSS_TRACE = "loss_trace.csv"
STORE_VERSION = 1

JITTER_SIGMA = 0.01

DEFAULT_AXES = (IntrinsicAxis("material"), IntrinsicAxis("colour"))

# Stage-two prompt templates; selection is uniform over this list.
DEFAULT_TEMPLATES = (
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "a photo of a {}",
    "a rendering of a {}",
    "a cropped photo of the {}",
    "the photo of a {}",
    "a photo of a clean {}",
    "a photo of a dirty {}",
    "a dark photo of the {}",
    "a photo of my {}",
    "a photo of the cool {}",
    "a close-up photo of a {}",
    "a bright photo of the {}",
    "a cropped photo of a {}",
    "a photo of the {}",
    "a good photo of the {}",
    "a photo of one {}",
    "a close-up photo of the {}",
    "a rendition of the {}",
    "a photo of the clean {}",
    "a rendition of a {}",
    "a photo of a nice {}",
    "a good photo of a {}",
    "a photo of the nice {}",
    "a photo of the small {}",
    "a photo of the weird {}",
    "a photo of the large {}",
    "a photo of a cool {}",
    "a photo of a small {}",
)


class TrainingDivergedError(IceError, ArithmeticError):
    """A loss became non-finite; carries the offending phase and step."""


class StoreError(IceError, ValueError):
    """A concept store failed version or checksum validation."""


@dataclass(frozen=True)
class TrainSchedule:
    """Step counts, learning rates and the run seed."""

    phase1_steps: int = 400
    phase2_steps: int = 400
    refine_steps: int = 300
    learning_rate_tokens: float = 5e-3
    learning_rate_refine: float = 1e-4
    seed: int = 0
    grad_clip: float = 5.0
    prior_seeds: tuple = (0, 1)

    def __post_init__(self):
        for name in ("phase1_steps", "phase2_steps", "refine_steps"):
            _require(getattr(self, name) >= 0, f"{name} must be >= 0")
        _require(self.learning_rate_tokens > 0, "learning_rate_tokens must be > 0")
        _require(self.learning_rate_refine > 0, "learning_rate_refine must be > 0")
        _require(self.grad_clip >= 0, "grad_clip must be >= 0")
        object.__setattr__(self, "prior_seeds", tuple(int(s) for s in self.prior_seeds))


@dataclass(frozen=True)
class TemplateBank:
    templates: tuple = DEFAULT_TEMPLATES

    def __post_init__(self):
        templates = tuple(self.templates)
        _require(len(templates) > 0, "template bank must be nonempty")
        for t in templates:
            _require(t.count("{}") == 1, f"template {t!r} must have exactly one slot")
        object.__setattr__(self, "templates", templates)

    def digest(self) -> str:
        return sha256_bytes(canonical_json(list(self.templates)).encode("utf-8"))


@dataclass
class RunState:
    """Mutable training state owned by the single coordinating thread."""

    concepts: list
    phase: str
    step: int
    margins: LossWeights
    loss_history: list
    axes: tuple
    bank: TemplateBank
    schedule: TrainSchedule
    rng: np.random.Generator
    x0_latent: ImageTensor
    object_anchors: dict
    axis_anchors: dict
    init_words: dict
    fallbacks: list
    notes: list = field(default_factory=list)

    def advance(self, to_phase: str) -> None:
        _require(
            PHASES.index(to_phase) > PHASES.index(self.phase),
            f"phase transitions only move forward ({self.phase} -> {to_phase})",
        )
        self.phase = to_phase
        self.step = 0


# ---------------------------------------------------------------------------
# Token initialization and prompt sampling


def _token_ids(order: int, axes) -> dict:
    ids = {"conspec": f"<obj{order}_conspec>", "inspec": f"<obj{order}_inspec>"}
    for axis in axes:
        ids[axis.name] = f"<obj{order}_{axis.name}>"
    return ids


def _axis_init_embedding(backend: DiffusionBackend, name: str) -> np.ndarray:
    try:
        return backend.word_embedding(name)
    except UnknownWordError:
        return np.array(backend.encode_text(name).vector)


def init_tokens(
    loc: LocalizationResult,
    axes,
    backend: DiffusionBackend,
    rng: np.random.Generator,
    events: "list | None" = None,
    jitter_sigma: float = JITTER_SIGMA,
) -> list:
    """Create and register the per-concept token bundles.

    conspec starts exactly at the embedding of the record's label (falling
    back to the nearest vocabulary word when the label is unknown); inspec
    starts at the backend's designated rare word plus Gaussian jitter; each
    intrinsic token starts at its axis-name embedding plus jitter.
    """
    _require(len(loc.records) >= 1, "localization produced no records to learn from")
    axes = tuple(axes)
    names = [a.name for a in axes]
    _require(len(set(names)) == len(names), "axis names must be unique")
    rare = backend.word_embedding(backend.rare_token_word)
    concepts = []
    for rec in loc.records:
        label = rec.concept.label
        try:
            init_word = label
            anchor = backend.word_embedding(label)
        except UnknownWordError:
            init_word = backend.nearest_vocabulary_word(label)
            anchor = backend.word_embedding(init_word)
            if events is not None:
                events.append({"order": rec.order, "label": label, "fallback": init_word})
        ids = _token_ids(rec.order, axes)
        dim = anchor.shape[0]
        conspec = np.array(anchor)
        inspec = rare + rng.normal(0.0, jitter_sigma, dim)
        backend.register_token(ids["conspec"], conspec)
        backend.register_token(ids["inspec"], inspec)
        intrinsics = {}
        for axis in axes:
            base = _axis_init_embedding(backend, axis.name)
            values = base + rng.normal(0.0, jitter_sigma, dim)
            backend.register_token(ids[axis.name], values)
            intrinsics[axis.name] = TokenEmbedding.from_array(values.astype(np.float32), ids[axis.name])
        concepts.append(
            LearnedConcept(
                record=rec,
                conspec=TokenEmbedding.from_array(conspec.astype(np.float32), ids["conspec"]),
                inspec=TokenEmbedding.from_array(inspec.astype(np.float32), ids["inspec"]),
                intrinsics=intrinsics,
            )
        )
    return concepts


def sample_prompt(bank: TemplateBank, concept: LearnedConcept, phase: str, rng: np.random.Generator) -> PromptSpec:
    """Uniform template draw; the slot takes the phase's '&'-joined token ids."""
    _require(phase in ("phase1", "phase2", "refine"), f"bad phase {phase!r}")
    template = bank.templates[int(rng.integers(0, len(bank.templates)))]
    if phase == "phase1":
        filler = f"{concept.inspec.token_id} & {concept.conspec.token_id}"
    else:
        parts = [tok.token_id for tok in concept.intrinsics.values()]
        parts.append(concept.conspec.token_id)
        filler = " & ".join(parts)
    return PromptSpec.render(template, filler)


# ---------------------------------------------------------------------------
# Run assembly


def compute_phase_two_margins(backend: DiffusionBackend, axes) -> dict:
    """Margins are squared embedding distances between axis-name words."""
    margins = {}
    embs = {a.name: _axis_init_embedding(backend, a.name) for a in axes}
    for j in axes:
        for k in axes:
            if j.name < k.name:
                d = float(np.sum((embs[j.name] - embs[k.name]) ** 2))
                margins[(j.name, k.name)] = d
    return margins


def start_run(
    loc: LocalizationResult,
    image: ImageTensor,
    backend: DiffusionBackend,
    axes=DEFAULT_AXES,
    schedule: TrainSchedule = TrainSchedule(),
    weights: "LossWeights | None" = None,
    bank: TemplateBank = TemplateBank(),
) -> RunState:
    """Initialize tokens, anchors and margins for a full learning run."""
    axes = tuple(axes)
    rng = np.random.Generator(np.random.PCG64(schedule.seed))
    events: list = []
    concepts = init_tokens(loc, axes, backend, rng, events=events)
    base = weights or LossWeights()
    if not base.gamma_phase2:
        margins = LossWeights(
            lambda_att=base.lambda_att,
            lambda_triplet=base.lambda_triplet,
            gamma_phase1=base.gamma_phase1,
            gamma_phase2=compute_phase_two_margins(backend, axes),
        )
    else:
        margins = base
    object_anchors = {}
    init_words = {}
    for concept, rec in zip(concepts, loc.records):
        word_events = [e for e in events if e["order"] == rec.order]
        init_word = word_events[0]["fallback"] if word_events else rec.concept.label
        init_words[concept.conspec.token_id] = init_word
        object_anchors[concept.conspec.token_id] = backend.word_embedding(init_word)
    axis_anchors = {a.name: np.array(backend.encode_text(a.anchor_text()).vector) for a in axes}
    return RunState(
        concepts=concepts,
        phase="phase1",
        step=0,
        margins=margins,
        loss_history=[],
        axes=axes,
        bank=bank,
        schedule=schedule,
        rng=rng,
        x0_latent=backend.to_latent(image),
        object_anchors=object_anchors,
        axis_anchors=axis_anchors,
        init_words=init_words,
        fallbacks=events,
    )


# ---------------------------------------------------------------------------
# Training steps


def _clip(g: np.ndarray, limit: float) -> np.ndarray:
    if limit <= 0:
        return g
    norm = float(np.linalg.norm(g))
    if norm > limit:
        return g * (limit / norm)
    return g


def _apply_token_grads(backend, grads: dict, lr: float, clip: float) -> None:
    for token_id in sorted(grads):
        g = _clip(np.asarray(grads[token_id], dtype=np.float64), clip)
        backend.set_token_embedding(token_id, backend.token_embedding(token_id) - lr * g)


def _apply_param_grads(backend, grads: dict, lr: float, clip: float) -> None:
    current = backend.trainable_params()
    for name in sorted(grads):
        g = _clip(np.asarray(grads[name], dtype=np.float64), clip)
        backend.set_trainable_param(name, current[name] - lr * g)


def _merge(into: dict, extra: dict, scale: float = 1.0) -> None:
    for key, value in extra.items():
        into[key] = into.get(key, 0.0) + scale * np.asarray(value, dtype=np.float64)


def _training_step(state: RunState, backend: DiffusionBackend, phase: str) -> LossBreakdown:
    sched = state.schedule
    w = state.margins
    rng = state.rng
    concept = state.concepts[int(rng.integers(0, len(state.concepts)))]
    prompt = sample_prompt(state.bank, concept, phase, rng)
    cond = backend.encode_text(prompt)
    T = backend.schedule.T
    t = int(rng.integers(1, T + 1))
    eps_arr = rng.standard_normal(state.x0_latent.shape)
    eps = ImageTensor.from_array(eps_arr, space="latent")
    x_t = add_noise(state.x0_latent, t, eps, backend.schedule)
    pred = backend.predict_noise(x_t, t, cond)
    region = concept.record.mask

    recon, grad_pred = recon_loss_grad(eps_arr, pred.noise_estimate.data, region)
    token_grads: dict = {}
    param_grads: dict = {}
    tg, pg = backend.denoise_vjp(x_t, t, cond, grad_pred)
    _merge(token_grads, tg)
    _merge(param_grads, pg)

    intr_ids = [tok.token_id for tok in concept.intrinsics.values()]
    if phase == "phase1":
        att, grad_att = wasserstein_attention_grad(pred.attention[concept.conspec.token_id], region)
        upstream = {concept.conspec.token_id: w.lambda_att * grad_att}
    else:
        stack = np.stack([pred.attention[tid].weights for tid in intr_ids])
        combined = AttentionMap.from_array(stack.mean(axis=0))
        att, grad_att = wasserstein_attention_grad(combined, region)
        upstream = {tid: (w.lambda_att / len(intr_ids)) * grad_att for tid in intr_ids}
    _merge(token_grads, backend.attention_vjp(cond, upstream))

    if phase == "phase1":
        anchor = state.object_anchors[concept.conspec.token_id]
        pos = backend.token_embedding(concept.conspec.token_id)
        neg = backend.token_embedding(concept.inspec.token_id)
        triplet, (_, gp, gn) = triplet_loss_grad(anchor, pos, neg, w.gamma_phase1)
        _merge(token_grads, {concept.conspec.token_id: gp, concept.inspec.token_id: gn}, w.lambda_triplet)
    else:
        triplet = 0.0
        names = [a.name for a in state.axes]
        if len(names) > 1:
            for axis_name in names:
                own_id = concept.intrinsics[axis_name].token_id
                other_names = [n for n in names if n != axis_name]
                anchor = state.axis_anchors[axis_name]
                own = backend.token_embedding(own_id)
                others = [backend.token_embedding(concept.intrinsics[n].token_id) for n in other_names]
                gammas = [w.margin(axis_name, n) for n in other_names]
                value, (_, go, gothers) = intrinsic_triplet_loss_grad(anchor, own, others, gammas)
                triplet += value
                _merge(token_grads, {own_id: go}, w.lambda_triplet)
                for n, g_other in zip(other_names, gothers):
                    _merge(token_grads, {concept.intrinsics[n].token_id: g_other}, w.lambda_triplet)

    prior = 0.0
    if phase == "refine":
        init_word = state.init_words[concept.conspec.token_id]
        prior_cond = backend.encode_text(f"a photo of a {init_word}")
        n_prior = len(sched.prior_seeds)
        for seed in sched.prior_seeds:
            prior_latent = backend.to_latent(backend.generate(prior_cond, seed))
            tp = int(rng.integers(1, T + 1))
            eps_p = rng.standard_normal(prior_latent.shape)
            x_tp = add_noise(prior_latent, tp, ImageTensor.from_array(eps_p, space="latent"), backend.schedule)
            pred_p = backend.predict_noise(x_tp, tp, prior_cond)
            value, grad_p = prior_preservation_loss_grad(eps_p, pred_p.noise_estimate.data)
            prior += value / n_prior
            _, pg_prior = backend.denoise_vjp(x_tp, tp, prior_cond, grad_p / n_prior)
            _merge(param_grads, pg_prior)

    breakdown = total_loss(recon, att, triplet, w, prior)
    if not np.isfinite(breakdown.total):
        raise TrainingDivergedError(f"non-finite loss at {phase} step {state.step}")

    if phase == "phase1":
        allowed = {concept.conspec.token_id, concept.inspec.token_id}
    elif phase == "phase2":
        allowed = set(intr_ids)
    else:
        allowed = set(intr_ids) | {concept.conspec.token_id}
    updates = {tid: g for tid, g in token_grads.items() if tid in allowed}
    lr = sched.learning_rate_refine if phase == "refine" else sched.learning_rate_tokens
    _apply_token_grads(backend, updates, lr, sched.grad_clip)
    if phase == "refine":
        _apply_param_grads(backend, param_grads, sched.learning_rate_refine, sched.grad_clip)

    state.loss_history.append(
        {
            "step": state.step,
            "phase": phase,
            "concept_id": f"obj{concept.record.order}",
            "recon": breakdown.recon,
            "att": breakdown.att,
            "triplet": breakdown.triplet,
            "prior": breakdown.prior,
            "total": breakdown.total,
        }
    )
    state.step += 1
    return breakdown


def _sync_concepts(state: RunState, backend: DiffusionBackend) -> None:
    """Refresh concept snapshots from the live token table."""
    synced = []
    for concept in state.concepts:
        intr = {
            name: TokenEmbedding.from_array(
                backend.token_embedding(tok.token_id).astype(np.float32), tok.token_id
            )
            for name, tok in concept.intrinsics.items()
        }
        synced.append(
            LearnedConcept(
                record=concept.record,
                conspec=TokenEmbedding.from_array(
                    backend.token_embedding(concept.conspec.token_id).astype(np.float32),
                    concept.conspec.token_id,
                ),
                inspec=TokenEmbedding.from_array(
                    backend.token_embedding(concept.inspec.token_id).astype(np.float32),
                    concept.inspec.token_id,
                ),
                intrinsics=intr,
            )
        )
    state.concepts = synced


def train_phase_one(state: RunState, backend: DiffusionBackend, sched=None, weights=None) -> RunState:
    """Object-level phase: learn conspec and inspec tokens."""
    _require(state.phase == "phase1", f"expected phase1 state, got {state.phase}")
    for _ in range(state.schedule.phase1_steps):
        _training_step(state, backend, "phase1")
    _sync_concepts(state, backend)
    state.advance("phase2")
    return state


def train_phase_two(state: RunState, backend: DiffusionBackend, sched=None, weights=None) -> RunState:
    """Intrinsic phase: decompose each object into per-axis tokens."""
    _require(state.phase == "phase2", f"expected phase2 state, got {state.phase}")
    for _ in range(state.schedule.phase2_steps):
        _training_step(state, backend, "phase2")
    _sync_concepts(state, backend)
    state.advance("refine")
    return state


def refine(state: RunState, backend: DiffusionBackend, sched=None, weights=None) -> RunState:
    """Joint fine-tuning of tokens and the backend's trainable parameters."""
    _require(state.phase == "refine", f"expected refine state, got {state.phase}")
    if not backend.trainable_params():
        state.notes.append("refinement_skipped: backend exposes no trainable parameters")
        state.advance("done")
        return state
    for _ in range(state.schedule.refine_steps):
        _training_step(state, backend, "refine")
    _sync_concepts(state, backend)
    state.advance("done")
    return state


def run_learning(
    loc: LocalizationResult,
    image: ImageTensor,
    backend: DiffusionBackend,
    axes=DEFAULT_AXES,
    schedule: TrainSchedule = TrainSchedule(),
    weights: "LossWeights | None" = None,
) -> RunState:
    """Full stage-two pipeline: init, phase one, phase two, refinement."""
    state = start_run(loc, image, backend, axes=axes, schedule=schedule, weights=weights)
    train_phase_one(state, backend)
    train_phase_two(state, backend)
    refine(state, backend)
    return state


# ---------------------------------------------------------------------------
# Concept store


def _float_repr(x: float) -> str:
    return repr(float(x))


def export_concepts(state: RunState, backend: DiffusionBackend, out_dir, config_hash: str = "") -> Path:
    """Write the concept store: manifest, raw embeddings, loss trace.

    Embeddings are little-endian float32 rows, row order matching the
    manifest (per concept: conspec, inspec, intrinsics in axis order).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _sync_concepts(state, backend)
    rows = []
    concept_entries = []
    for concept in state.concepts:
        tokens = {}
        for role, tok in (("conspec", concept.conspec), ("inspec", concept.inspec)):
            tokens[role] = {"id": tok.token_id, "row": len(rows)}
            rows.append(np.asarray(tok.values, dtype=np.float32))
        intr_entries = {}
        for axis in state.axes:
            tok = concept.intrinsics[axis.name]
            intr_entries[axis.name] = {"id": tok.token_id, "row": len(rows)}
            rows.append(np.asarray(tok.values, dtype=np.float32))
        tokens["intrinsics"] = intr_entries
        concept_entries.append(
            {
                "order": concept.record.order,
                "label": concept.record.concept.label,
                "init_word": state.init_words[concept.conspec.token_id],
                "score": concept.record.concept.score,
                "coverage": concept.record.coverage,
                "tokens": tokens,
            }
        )
    matrix = np.stack(rows).astype("<f4")
    emb_path = out_dir / STORE_EMBEDDINGS
    matrix.tofile(emb_path)

    trace_path = out_dir / STORE_LOSS_TRACE
    lines = ["step,phase,concept_id,recon,att,triplet,prior,total"]
    for row in state.loss_history:
        lines.append(
            ",".join(
                [
                    str(row["step"]),
                    row["phase"],
                    row["concept_id"],
                    _float_repr(row["recon"]),
                    _float_repr(row["att"]),
                    _float_repr(row["triplet"]),
                    _float_repr(row["prior"]),
                    _float_repr(row["total"]),
                ]
            )
        )
    trace_path.write_text("\n".join(lines) + "\n")

    manifest = {
        "version": STORE_VERSION,
        "seed": state.schedule.seed,
        "phase": state.phase,
        "embedding_dim": int(matrix.shape[1]),
        "rows": int(matrix.shape[0]),
        "schedule": {
            "phase1_steps": state.schedule.phase1_steps,
            "phase2_steps": state.schedule.phase2_steps,
            "refine_steps": state.schedule.refine_steps,
            "learning_rate_tokens": state.schedule.learning_rate_tokens,
            "learning_rate_refine": state.schedule.learning_rate_refine,
            "seed": state.schedule.seed,
            "grad_clip": state.schedule.grad_clip,
            "prior_seeds": list(state.schedule.prior_seeds),
        },
        "weights": {
            "lambda_att": state.margins.lambda_att,
            "lambda_triplet": state.margins.lambda_triplet,
            "gamma_phase1": state.margins.gamma_phase1,
            "gamma_phase2": sorted(
                [j, k, v] for (j, k), v in state.margins.gamma_phase2.items() if j < k
            ),
        },
        "axes": [{"name": a.name, "anchor_template": a.anchor_template} for a in state.axes],
        "template_bank_sha256": state.bank.digest(),
        "concepts": concept_entries,
        "backend_params": {
            name: [float(v) for v in values] for name, values in sorted(backend.trainable_params().items())
        },
        "fallbacks": state.fallbacks,
        "notes": state.notes,
        "config_hash": config_hash,
        "checksums": {
            STORE_EMBEDDINGS: sha256_file(emb_path),
            STORE_LOSS_TRACE: sha256_file(trace_path),
        },
    }
    manifest["checksum"] = sha256_bytes(
        canonical_json({k: v for k, v in manifest.items() if k != "checksum"}).encode("utf-8")
    )
    path = out_dir / STORE_MANIFEST
    path.write_text(canonical_json(manifest) + "\n")
    return path


@dataclass(frozen=True)
class ImportedStore:
    """A concept store loaded back from disk."""

    manifest: dict
    embeddings: np.ndarray
    loss_history: list

    @property
    def axes(self) -> tuple:
        return tuple(IntrinsicAxis(a["name"], a["anchor_template"]) for a in self.manifest["axes"])

    def token_rows(self) -> list:
        """(token_id, row values) in manifest order."""
        out = []
        for entry in self.manifest["concepts"]:
            tokens = entry["tokens"]
            for role in ("conspec", "inspec"):
                out.append((tokens[role]["id"], self.embeddings[tokens[role]["row"]]))
            for axis in self.manifest["axes"]:
                slot = tokens["intrinsics"][axis["name"]]
                out.append((slot["id"], self.embeddings[slot["row"]]))
        return out

    def register_into(self, backend: DiffusionBackend) -> None:
        """Register all stored tokens and restore backend parameters."""
        for token_id, values in self.token_rows():
            backend.register_token(token_id, np.asarray(values, dtype=np.float64))
        for name, values in self.manifest.get("backend_params", {}).items():
            backend.set_trainable_param(name, np.asarray(values, dtype=np.float64))

    def weights(self) -> LossWeights:
        w = self.manifest["weights"]
        return LossWeights(
            lambda_att=w["lambda_att"],
            lambda_triplet=w["lambda_triplet"],
            gamma_phase1=w["gamma_phase1"],
            gamma_phase2={(j, k): v for j, k, v in w["gamma_phase2"]},
        )

    def prompt_filler(self, entry: dict) -> str:
        """Phase-two style composition filler for one stored concept."""
        tokens = entry["tokens"]
        parts = [tokens["intrinsics"][a["name"]]["id"] for a in self.manifest["axes"]]
        parts.append(tokens["conspec"]["id"])
        return " & ".join(parts)


def import_concepts(store_dir) -> ImportedStore:
    """Load and strictly validate a concept store directory."""
    store_dir = Path(store_dir)
    path = store_dir / STORE_MANIFEST if store_dir.is_dir() else store_dir
    if not path.exists():
        raise StoreError(f"concept store manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != STORE_VERSION:
        raise StoreError(f"unsupported store version {manifest.get('version')}")
    recomputed = sha256_bytes(
        canonical_json({k: v for k, v in manifest.items() if k != "checksum"}).encode("utf-8")
    )
    if recomputed != manifest.get("checksum"):
        raise StoreError("store manifest checksum mismatch")
    base = path.parent
    emb_path = base / STORE_EMBEDDINGS
    if sha256_file(emb_path) != manifest["checksums"][STORE_EMBEDDINGS]:
        raise StoreError("embeddings.bin checksum mismatch")
    matrix = np.fromfile(emb_path, dtype="<f4").reshape(manifest["rows"], manifest["embedding_dim"])
    trace_path = base / STORE_LOSS_TRACE
    if sha256_file(trace_path) != manifest["checksums"][STORE_LOSS_TRACE]:
        raise StoreError("loss_trace.csv checksum mismatch")
    history = []
    lines = trace_path.read_text().strip().splitlines()
    for line in lines[1:]:
        step, phase, concept_id, recon, att, triplet, prior, tot = line.split(",")
        history.append(
            {
                "step": int(step),
                "phase": phase,
                "concept_id": concept_id,
                "recon": float(recon),
                "att": float(att),
                "triplet": float(triplet),
                "prior": float(prior),
                "total": float(tot),
            }
        )
    return ImportedStore(manifest=manifest, embeddings=matrix, loss_history=history)
