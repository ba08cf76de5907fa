"""Deterministic synthetic backend: a toy world of flat shapes.

The world is a canvas tiled with axis-aligned rectangular shapes, each
carrying a (category, colour, material) triple. Pixel values are
``rgb[colour] * pattern[material](i, j)`` quantized to the 8-bit grid so PNG
round trips are exact.

Word embeddings are block-structured: category, colour, material, instance
and filler words occupy orthogonal blocks, with one-hot coordinates inside
each block. Axis names ("object", "colour", "material") embed as the unit
centroid of their family block. Unknown plain words hash to a deterministic
unit vector in the filler block, which keeps them inert to every decode.

The renderer decodes a (region, colour, material) triple per prompt group.
Each decode first pools the group's tokens with a softmax gate keyed on
affinity to the decode's query (the axis centroid for attributes, the
region keys for placement), then scores family members against the pooled
vector. Gating is what routes attribute content through the token anchored
to that attribute, mirroring cross-attention routing in a real denoiser.

The closed-form denoiser is

    eps_hat = (x_t - sqrt(abar_t) * render(condition)) / sqrt(1 - abar_t)

so the reconstruction loss is minimized exactly when the conditioning tokens
decode to the scene's true attributes. Attention for token ``tau`` is the
normalized indicator of the region ``tau`` points at, blended with a uniform
background mass of 0.05.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from ..core import (
    AttentionMap,
    BinaryMask,
    ContractViolation,
    DimensionMismatch,
    ImageTensor,
    NoiseSchedule,
    TextConcept,
    _require,
    canonical_json,
    load_mask_png,
    resample_mask_nearest,
    save_mask_png,
)
from . import (
    DenoisePrediction,
    DiffusionBackend,
    EncodedPrompt,
    PromptSpec,
    UnknownConceptError,
    UnknownTokenError,
    UnknownWordError,
    cumulative_alpha,
)

# ---------------------------------------------------------------------------
# Palettes (sorted; order fixes the one-hot coordinate of each word)

CATEGORIES = ("cone", "cube", "disc", "prism", "slab", "sphere", "torus", "wedge")

COLOUR_RGB = {
    "blue": (0.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "green": (0.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "red": (1.0, 0.0, 0.0),
    "white": (1.0, 1.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
COLOURS = tuple(sorted(COLOUR_RGB))

_HI = 1.0
_LO = 153.0 / 255.0
_GLOSS = 204.0 / 255.0

MATERIALS = ("brushed", "checker", "gloss", "matte", "woven")

AXIS_WORDS = ("object", "colour", "material")
RARE_WORD = "sks"

N_CAT, N_COL, N_MAT, N_INST, N_FILLER = len(CATEGORIES), len(COLOURS), len(MATERIALS), 8, 8
EMBED_DIM = N_CAT + N_COL + N_MAT + N_INST + N_FILLER
_CAT0 = 0
_COL0 = N_CAT
_MAT0 = N_CAT + N_COL
_INST0 = N_CAT + N_COL + N_MAT
_FILL0 = N_CAT + N_COL + N_MAT + N_INST

MAX_SHAPES = N_INST

# decode temperatures; chosen so that one-hot prompts render crisply
# (softmax leakage ~ e^-24) while uniform inits keep healthy gradients
KAPPA_DECODE = 24.0
KAPPA_GATE = 12.0
SMOOTHMAX_BETA = 8.0
BG_ATTENTION = 0.05

_MATCH_TOL = 1e-9


def material_pattern(name: str, height: int, width: int) -> np.ndarray:
    """Per-material texture over absolute canvas coordinates, 8-bit exact."""
    i = np.arange(height)[:, None]
    j = np.arange(width)[None, :]
    if name == "matte":
        return np.full((height, width), _HI)
    if name == "gloss":
        return np.full((height, width), _GLOSS)
    if name == "brushed":
        return np.where((i % 4) < 2, _HI, _LO) * np.ones((1, width))
    if name == "woven":
        return np.ones((height, 1)) * np.where((j % 4) < 2, _HI, _LO)
    if name == "checker":
        return np.where(((i // 2 + j // 2) % 2) == 0, _HI, _LO)
    raise ContractViolation(f"unknown material {name!r}")


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0) / 255.0


def _hash_unit_vector(word: str) -> np.ndarray:
    """Deterministic unit vector in the filler block for unknown words."""
    seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "big")
    rng = np.random.Generator(np.random.PCG64(seed))
    v = rng.standard_normal(N_FILLER)
    v /= np.linalg.norm(v)
    out = np.zeros(EMBED_DIM)
    out[_FILL0:] = v
    return out


def build_word_table() -> dict:
    """Fixed embeddings for every vocabulary word (float32)."""
    table = {}
    for idx, word in enumerate(CATEGORIES):
        v = np.zeros(EMBED_DIM)
        v[_CAT0 + idx] = 1.0
        table[word] = v
    for idx, word in enumerate(COLOURS):
        v = np.zeros(EMBED_DIM)
        v[_COL0 + idx] = 1.0
        table[word] = v
    for idx, word in enumerate(MATERIALS):
        v = np.zeros(EMBED_DIM)
        v[_MAT0 + idx] = 1.0
        table[word] = v
    centroids = {
        "object": (_CAT0, N_CAT),
        "colour": (_COL0, N_COL),
        "material": (_MAT0, N_MAT),
    }
    for word, (start, n) in centroids.items():
        v = np.zeros(EMBED_DIM)
        v[start : start + n] = 1.0 / np.sqrt(n)
        table[word] = v
    table[RARE_WORD] = _hash_unit_vector(RARE_WORD)
    for v in table.values():
        v.setflags(write=False)
    return table


# ---------------------------------------------------------------------------
# World


@dataclass(frozen=True)
class ShapeSpec:
    category: str
    colour: str
    material: str
    region: BinaryMask

    def __post_init__(self):
        _require(self.category in CATEGORIES, f"unknown category {self.category!r}")
        _require(self.colour in COLOURS, f"unknown colour {self.colour!r}")
        _require(self.material in MATERIALS, f"unknown material {self.material!r}")
        _require(self.region.count() > 0, "shape region must be nonempty")


@dataclass(frozen=True)
class SyntheticWorld:
    """Canvas plus disjoint shapes; the oracle for retriever and segmentor."""

    height: int
    width: int
    shapes: tuple
    vocabulary: tuple

    def __post_init__(self):
        shapes = tuple(self.shapes)
        _require(1 <= len(shapes) <= MAX_SHAPES, f"worlds support 1..{MAX_SHAPES} shapes")
        cats = [s.category for s in shapes]
        _require(len(set(cats)) == len(cats), "shape categories must be distinct")
        vocab = tuple(sorted(set(self.vocabulary)))
        for s in shapes:
            _require(
                s.region.height == self.height and s.region.width == self.width,
                "shape region dimensions must match the canvas",
                DimensionMismatch,
            )
            _require(s.category in vocab, f"category {s.category!r} missing from vocabulary")
        acc = np.zeros((self.height, self.width), dtype=np.int32)
        for s in shapes:
            acc += s.region.bits.astype(np.int32)
        _require(int(acc.max()) <= 1, "shape regions must be pairwise disjoint")
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "vocabulary", vocab)

    @cached_property
    def image(self) -> ImageTensor:
        """Ground-truth canvas, quantized to the 8-bit grid."""
        data = np.zeros((self.height, self.width, 3))
        for s in self.shapes:
            pat = material_pattern(s.material, self.height, self.width)
            rgb = np.asarray(COLOUR_RGB[s.colour])
            data += s.region.bits[:, :, None] * pat[:, :, None] * rgb[None, None, :]
        return ImageTensor.from_array(_quantize(data), space="pixel")

    @cached_property
    def label_grid(self) -> np.ndarray:
        """Shape index per pixel, -1 on background."""
        grid = np.full((self.height, self.width), -1, dtype=np.int64)
        for idx, s in enumerate(self.shapes):
            grid[s.region.bits] = idx
        grid.setflags(write=False)
        return grid

    def shape_by_category(self, category: str):
        for idx, s in enumerate(self.shapes):
            if s.category == category:
                return idx, s
        return None

    def total_coverage(self) -> float:
        return float(sum(s.region.count() for s in self.shapes)) / (self.height * self.width)


def default_vocabulary() -> tuple:
    return tuple(sorted(set(CATEGORIES) | set(COLOURS) | set(MATERIALS) | set(AXIS_WORDS) | {RARE_WORD}))


def make_world(seed: int, num_shapes: int = 3, size: tuple = (32, 32)) -> SyntheticWorld:
    """Generate a world of disjoint rectangles covering >= 95% of the canvas.

    The bottom row is left as background; the rest is tiled by a seeded
    guillotine partition. Every shape keeps coverage above ~6% so that the
    localization loop can always extract all of them before the remaining
    pixel proportion drops under the 5% threshold.
    """
    height, width = size
    _require(1 <= num_shapes <= MAX_SHAPES, f"num_shapes must be in 1..{MAX_SHAPES}")
    _require(height >= 16 and width >= 16, "canvas must be at least 16x16")
    rng = np.random.Generator(np.random.PCG64(seed))
    content_h = height - 1
    min_side = max(6, min(height, width) // 6)
    min_area = int(np.ceil(0.06 * height * width))

    rects = [(0, 0, content_h, width)]  # (top, left, h, w)
    for _ in range(1000):
        if len(rects) == num_shapes:
            break
        order = sorted(range(len(rects)), key=lambda k: -rects[k][2] * rects[k][3])
        split_done = False
        for k in order:
            top, left, h, w = rects[k]
            vertical = w >= h  # split the longer side
            span = w if vertical else h
            if span < 2 * min_side:
                continue
            for _attempt in range(8):
                cut = int(round(span * rng.uniform(0.38, 0.62)))
                cut = min(max(cut, min_side), span - min_side)
                if vertical:
                    children = [(top, left, h, cut), (top, left + cut, h, w - cut)]
                else:
                    children = [(top, left, cut, w), (top + cut, left, h - cut, w)]
                if all(c[2] * c[3] >= min_area for c in children):
                    rects[k : k + 1] = children
                    split_done = True
                    break
            if split_done:
                break
        if not split_done:
            raise ContractViolation(
                f"cannot partition {height}x{width} into {num_shapes} shapes "
                f"with min area {min_area}"
            )
    _require(len(rects) == num_shapes, "partition did not reach the requested shape count")

    cats = list(rng.choice(np.array(CATEGORIES), size=num_shapes, replace=False))
    cols = list(rng.choice(np.array(COLOURS), size=num_shapes, replace=num_shapes > len(COLOURS)))
    mats = list(rng.choice(np.array(MATERIALS), size=num_shapes, replace=num_shapes > len(MATERIALS)))
    shapes = []
    for (top, left, h, w), cat, col, mat in zip(rects, cats, cols, mats):
        bits = np.zeros((height, width), dtype=bool)
        bits[top : top + h, left : left + w] = True
        shapes.append(ShapeSpec(str(cat), str(col), str(mat), BinaryMask.from_array(bits)))
    return SyntheticWorld(height, width, tuple(shapes), default_vocabulary())


def save_world(world: SyntheticWorld, out_dir: "str | Path") -> Path:
    """Write world.json plus one region PNG per shape; returns the json path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shapes = []
    for idx, s in enumerate(world.shapes):
        name = f"region_{idx}.png"
        save_mask_png(s.region, out_dir / name)
        shapes.append(
            {"category": s.category, "colour": s.colour, "material": s.material, "region_png": name}
        )
    doc = {
        "canvas": [world.height, world.width],
        "shapes": shapes,
        "vocabulary": list(world.vocabulary),
    }
    path = out_dir / "world.json"
    path.write_text(canonical_json(doc) + "\n")
    return path


def load_world(path: "str | Path") -> SyntheticWorld:
    path = Path(path)
    _require(path.exists(), f"world file not found: {path}")
    doc = json.loads(path.read_text())
    height, width = doc["canvas"]
    shapes = tuple(
        ShapeSpec(
            category=s["category"],
            colour=s["colour"],
            material=s["material"],
            region=load_mask_png(path.parent / s["region_png"]),
        )
        for s in doc["shapes"]
    )
    return SyntheticWorld(height, width, shapes, tuple(doc["vocabulary"]))


# ---------------------------------------------------------------------------
# Prompt tokenization


def tokenize(text: str) -> tuple:
    """Content tokens and comma-delimited groups of a rendered prompt.

    "&" and "," are separators: "&" joins tokens of one concept, ","
    separates composed concepts. Angle-bracketed tokens are learnable ids.
    """
    pieces = text.replace(",", " , ").replace("&", " & ").split()
    groups, current = [], []
    for piece in pieces:
        if piece == ",":
            if current:
                groups.append(tuple(current))
            current = []
        elif piece != "&":
            current.append(piece)
    if current:
        groups.append(tuple(current))
    tokens = tuple(t for g in groups for t in g)
    return tokens, tuple(groups)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _softmax_vjp(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """d(loss)/d(logits) given d(loss)/d(softmax output)."""
    return p * (grad_p - float(p @ grad_p))


# ---------------------------------------------------------------------------
# Backend


class SyntheticBackend(DiffusionBackend):
    """All model contracts, realized in closed form over a SyntheticWorld."""

    concurrent_reads = True
    rare_token_word = RARE_WORD

    def __init__(
        self,
        world: SyntheticWorld,
        schedule: NoiseSchedule | None = None,
        attention_grid: tuple = (8, 8),
        jitter_px: int = 2,
    ):
        self._world = world
        self._schedule = schedule or NoiseSchedule.linear(50, 0.02, 0.12)
        self._grid = (int(attention_grid[0]), int(attention_grid[1]))
        self._jitter = int(jitter_px)
        self._words = build_word_table()
        self._tokens: dict[str, np.ndarray] = {}
        self._params = {
            "render_scale": np.ones(3, dtype=np.float64),
            "render_bias": np.zeros(3, dtype=np.float64),
        }

        h, w = world.height, world.width
        self._x0 = world.image  # quantized ground truth, pixel space
        self._region_f = np.stack([s.region.bits.astype(np.float64) for s in world.shapes])
        self._patterns = np.stack([material_pattern(m, h, w) for m in MATERIALS])
        self._rgb = np.array([COLOUR_RGB[c] for c in COLOURS])
        # region keys: category one-hot plus an instance-slot one-hot
        keys = np.zeros((len(world.shapes), EMBED_DIM))
        for idx, s in enumerate(world.shapes):
            keys[idx] = np.array(self._words[s.category])
            keys[idx, _INST0 + idx] += 1.0
        self._region_keys = keys
        self._col_words = np.stack([self._words[c] for c in COLOURS])
        self._mat_words = np.stack([self._words[m] for m in MATERIALS])
        self._colour_query = np.array(self._words["colour"])
        self._material_query = np.array(self._words["material"])

        gh, gw = self._grid
        unders = []
        for idx, s in enumerate(world.shapes):
            down = resample_mask_nearest(s.region, gh, gw).bits.astype(np.float64)
            count = down.sum()
            _require(
                count > 0,
                f"shape {idx} vanishes on the {gh}x{gw} attention grid; "
                "use a finer grid or larger shapes",
            )
            unders.append(down / count)
        self._grid_indicators = np.stack(unders)

    # -- basic properties

    @property
    def world(self) -> SyntheticWorld:
        return self._world

    @property
    def schedule(self) -> NoiseSchedule:
        return self._schedule

    @property
    def embedding_dim(self) -> int:
        return EMBED_DIM

    @property
    def attention_grid(self) -> tuple:
        return self._grid

    def latent_image(self) -> ImageTensor:
        """World image tagged as latent; the synthetic latent space is identity."""
        return self._x0.as_space("latent")

    # -- vocabulary and token table

    def vocabulary(self) -> tuple:
        return tuple(sorted(self._words))

    def word_embedding(self, word: str) -> np.ndarray:
        if word not in self._words:
            raise UnknownWordError(f"word {word!r} has no fixed embedding")
        return np.array(self._words[word])

    def nearest_vocabulary_word(self, word: str) -> str:
        probe = _hash_unit_vector(word)
        best_word, best_dist = None, np.inf
        for cand in sorted(self._words):
            d = float(np.sum((probe - self._words[cand]) ** 2))
            if d < best_dist:
                best_word, best_dist = cand, d
        return best_word

    def register_token(self, token_id: str, values: np.ndarray) -> None:
        _require(
            token_id.startswith("<") and token_id.endswith(">"),
            f"learnable token ids must be angle-bracketed, got {token_id!r}",
        )
        _require(token_id not in self._tokens, f"token {token_id!r} already registered")
        arr = np.asarray(values, dtype=np.float64)
        _require(arr.shape == (EMBED_DIM,), f"token values must have dim {EMBED_DIM}")
        self._tokens[token_id] = arr.copy()

    def token_embedding(self, token_id: str) -> np.ndarray:
        if token_id not in self._tokens:
            raise UnknownTokenError(f"token {token_id!r} is not registered")
        return self._tokens[token_id].copy()

    def set_token_embedding(self, token_id: str, values: np.ndarray) -> None:
        if token_id not in self._tokens:
            raise UnknownTokenError(f"token {token_id!r} is not registered")
        arr = np.asarray(values, dtype=np.float64)
        _require(arr.shape == (EMBED_DIM,), f"token values must have dim {EMBED_DIM}")
        self._tokens[token_id] = arr.copy()

    def token_ids(self) -> tuple:
        return tuple(sorted(self._tokens))

    # -- text encoding

    def _embed_token(self, token: str) -> np.ndarray:
        if token.startswith("<") and token.endswith(">"):
            if token not in self._tokens:
                raise UnknownTokenError(f"token {token!r} is not registered")
            return self._tokens[token]
        if token in self._words:
            return self._words[token]
        return _hash_unit_vector(token)

    def encode_text(self, prompt) -> EncodedPrompt:
        text = prompt.rendered if isinstance(prompt, PromptSpec) else str(prompt)
        tokens, groups = tokenize(text)
        _require(len(tokens) > 0, "prompt must contain at least one token")
        embs = np.stack([self._embed_token(t) for t in tokens])
        return EncodedPrompt(text=text, tokens=tokens, groups=groups, vector=embs.mean(axis=0))

    def is_learnable(self, token: str) -> bool:
        return token.startswith("<") and token.endswith(">")

    # -- gated soft decode

    def _pool(self, embs: np.ndarray, affinity: np.ndarray) -> tuple:
        gate = _softmax(KAPPA_GATE * affinity)
        pooled = gate @ embs
        return gate, pooled

    def _decode_group(self, embs: np.ndarray) -> dict:
        """Soft (region, colour, material) decode of one token group."""
        aff_col = embs @ self._colour_query
        gate_col, pool_col = self._pool(embs, aff_col)
        p_col = _softmax(KAPPA_DECODE * (self._col_words @ pool_col))

        aff_mat = embs @ self._material_query
        gate_mat, pool_mat = self._pool(embs, aff_mat)
        p_mat = _softmax(KAPPA_DECODE * (self._mat_words @ pool_mat))

        scores = embs @ self._region_keys.T  # (n, R)
        row_max = scores.max(axis=1, keepdims=True)
        lse = np.log(np.exp(SMOOTHMAX_BETA * (scores - row_max)).sum(axis=1))
        smax = (lse + SMOOTHMAX_BETA * row_max[:, 0]) / SMOOTHMAX_BETA
        gate_reg, pool_reg = self._pool(embs, smax)
        u = _softmax(KAPPA_DECODE * (self._region_keys @ pool_reg))

        return {
            "embs": embs,
            "aff_col": aff_col, "gate_col": gate_col, "pool_col": pool_col, "p_col": p_col,
            "aff_mat": aff_mat, "gate_mat": gate_mat, "pool_mat": pool_mat, "p_mat": p_mat,
            "scores": scores, "smax": smax, "gate_reg": gate_reg, "pool_reg": pool_reg, "u": u,
        }

    def _render_soft(self, condition: EncodedPrompt) -> tuple:
        """Differentiable render of the condition; returns (image, aux)."""
        h, w = self._world.height, self._world.width
        out = np.zeros((h, w, 3))
        aux = []
        for group in condition.groups:
            embs = np.stack([self._embed_token(t) for t in group])
            dec = self._decode_group(embs)
            belong = np.tensordot(dec["u"], self._region_f, axes=1)  # (h, w)
            pattern = np.tensordot(dec["p_mat"], self._patterns, axes=1)  # (h, w)
            colour = dec["p_col"] @ self._rgb  # (3,)
            dec["belong"], dec["pattern"], dec["colour"] = belong, pattern, colour
            dec["tokens"] = group
            out += belong[:, :, None] * pattern[:, :, None] * colour[None, None, :]
            aux.append(dec)
        return out, aux

    def render_soft(self, condition: EncodedPrompt) -> np.ndarray:
        """Affine-headed differentiable render, the denoiser's scene estimate."""
        raw, _ = self._render_soft(condition)
        scale = self._params["render_scale"]
        bias = self._params["render_bias"]
        return raw * scale[None, None, :] + bias[None, None, :]

    # -- denoiser

    def _attention_weights(self, emb: np.ndarray) -> tuple:
        u = _softmax(KAPPA_DECODE * (self._region_keys @ emb))
        grid = np.tensordot(u, self._grid_indicators, axes=1)
        gh, gw = self._grid
        weights = (1.0 - BG_ATTENTION) * grid + BG_ATTENTION / (gh * gw)
        return u, weights

    def predict_noise(self, x_t: ImageTensor, t: int, condition: EncodedPrompt) -> DenoisePrediction:
        _require(x_t.space == "latent", "predict_noise expects a latent-space tensor")
        _require(
            (x_t.height, x_t.width, x_t.channels) == (self._world.height, self._world.width, 3),
            "x_t shape must match the world canvas",
            DimensionMismatch,
        )
        ab = cumulative_alpha(self._schedule, t)
        rendered = self.render_soft(condition)
        eps = (x_t.data - np.sqrt(ab) * rendered) / np.sqrt(1.0 - ab)
        attention = {}
        for token in dict.fromkeys(condition.tokens):
            _, weights = self._attention_weights(self._embed_token(token))
            attention[token] = AttentionMap.from_array(weights)
        return DenoisePrediction(
            noise_estimate=ImageTensor.from_array(eps, space="latent"),
            attention=attention,
        )

    # -- gradient surfaces

    def _pool_vjp(self, embs, gate, grad_pool):
        """Backprop through pooled = softmax(KAPPA_GATE * affinity) @ embs.

        Returns (grad_embs, grad_affinity).
        """
        grad_embs = np.outer(gate, grad_pool)
        grad_gate = embs @ grad_pool
        grad_aff = KAPPA_GATE * _softmax_vjp(gate, grad_gate)
        return grad_embs, grad_aff

    def _decode_group_vjp(self, dec: dict, grad_u, grad_pcol, grad_pmat) -> np.ndarray:
        """Gradients of the three decodes back to the group's token embeddings."""
        embs = dec["embs"]
        grad_embs = np.zeros_like(embs)

        gz = _softmax_vjp(dec["p_col"], grad_pcol)
        grad_pool = KAPPA_DECODE * (self._col_words.T @ gz)
        ge, ga = self._pool_vjp(embs, dec["gate_col"], grad_pool)
        grad_embs += ge + np.outer(ga, self._colour_query)

        gz = _softmax_vjp(dec["p_mat"], grad_pmat)
        grad_pool = KAPPA_DECODE * (self._mat_words.T @ gz)
        ge, ga = self._pool_vjp(embs, dec["gate_mat"], grad_pool)
        grad_embs += ge + np.outer(ga, self._material_query)

        gz = _softmax_vjp(dec["u"], grad_u)
        grad_pool = KAPPA_DECODE * (self._region_keys.T @ gz)
        ge, ga = self._pool_vjp(embs, dec["gate_reg"], grad_pool)
        grad_embs += ge
        # smoothmax_i = (1/beta) * LSE_r(beta * scores_ir)
        sm_w = np.exp(SMOOTHMAX_BETA * (dec["scores"] - dec["smax"][:, None]))
        grad_embs += (ga[:, None] * sm_w) @ self._region_keys
        return grad_embs

    def denoise_vjp(self, x_t: ImageTensor, t: int, condition: EncodedPrompt, grad_eps: np.ndarray) -> tuple:
        ab = cumulative_alpha(self._schedule, t)
        raw, aux = self._render_soft(condition)
        scale = self._params["render_scale"]
        factor = -np.sqrt(ab) / np.sqrt(1.0 - ab)
        grad_out = np.asarray(grad_eps, dtype=np.float64) * factor
        param_grads = {
            "render_scale": np.einsum("ijc,ijc->c", grad_out, raw),
            "render_bias": grad_out.sum(axis=(0, 1)),
        }
        grad_raw = grad_out * scale[None, None, :]
        token_grads: dict[str, np.ndarray] = {}
        for dec in aux:
            grad_belong = np.einsum("ijc,ij,c->ij", grad_raw, dec["pattern"], dec["colour"])
            grad_u = np.einsum("ij,rij->r", grad_belong, self._region_f)
            grad_pattern = np.einsum("ijc,ij,c->ij", grad_raw, dec["belong"], dec["colour"])
            grad_pmat = np.einsum("ij,mij->m", grad_pattern, self._patterns)
            grad_colour = np.einsum("ijc,ij,ij->c", grad_raw, dec["belong"], dec["pattern"])
            grad_pcol = self._rgb @ grad_colour
            grad_embs = self._decode_group_vjp(dec, grad_u, grad_pcol, grad_pmat)
            for pos, token in enumerate(dec["tokens"]):
                if self.is_learnable(token):
                    token_grads[token] = token_grads.get(token, 0.0) + grad_embs[pos]
        return token_grads, param_grads

    def attention_vjp(self, condition: EncodedPrompt, grads) -> dict:
        token_grads: dict[str, np.ndarray] = {}
        for token, grad_weights in grads.items():
            if not self.is_learnable(token):
                continue
            emb = self._embed_token(token)
            u, _ = self._attention_weights(emb)
            grad_u = (1.0 - BG_ATTENTION) * np.einsum(
                "ij,rij->r", np.asarray(grad_weights, dtype=np.float64), self._grid_indicators
            )
            gz = _softmax_vjp(u, grad_u)
            grad_emb = KAPPA_DECODE * (self._region_keys.T @ gz)
            token_grads[token] = token_grads.get(token, 0.0) + grad_emb
        return token_grads

    # -- retriever / segmentor (visibility oracles)

    def _visible(self, x: ImageTensor) -> np.ndarray:
        _require(x.space == "pixel", "retriever and segmentor expect pixel-space images")
        _require(
            (x.height, x.width, x.channels) == (self._world.height, self._world.width, 3),
            "image shape must match the world canvas",
            DimensionMismatch,
        )
        return np.max(np.abs(x.data - self._x0.data), axis=2) <= _MATCH_TOL

    def retrieve_concepts(self, x: ImageTensor, k: int) -> list:
        _require(k >= 1, "k must be >= 1")
        visible = self._visible(x)
        total = self._world.height * self._world.width
        scored = []
        for s in self._world.shapes:
            count = int(np.count_nonzero(visible & s.region.bits))
            if count > 0:
                scored.append(TextConcept(label=s.category, score=count / total))
        scored.sort(key=lambda c: (-c.score, c.label))
        return scored[:k]

    def segment(self, x: ImageTensor, concept: TextConcept) -> BinaryMask:
        label = concept.label if isinstance(concept, TextConcept) else str(concept)
        if label not in self._words:
            raise UnknownConceptError(f"label {label!r} is not in the backend vocabulary")
        found = self._world.shape_by_category(label)
        if found is None:
            return BinaryMask.empty(self._world.height, self._world.width)
        _, shape = found
        visible = self._visible(x)
        return BinaryMask.from_array(visible & shape.region.bits)

    # -- generator (hard decode plus seeded placement jitter)

    def generate(self, condition: EncodedPrompt, seed: int) -> ImageTensor:
        rng = np.random.Generator(np.random.PCG64(int(seed)))
        h, w = self._world.height, self._world.width
        out = np.zeros((h, w, 3))
        for group in condition.groups:
            embs = np.stack([self._embed_token(t) for t in group])
            dec = self._decode_group(embs)
            r = int(np.argmax(dec["u"]))
            colour = self._rgb[int(np.argmax(dec["p_col"]))]
            pattern = self._patterns[int(np.argmax(dec["p_mat"]))]
            dy = int(rng.integers(-self._jitter, self._jitter + 1))
            dx = int(rng.integers(-self._jitter, self._jitter + 1))
            region = _shift_bits(self._world.shapes[r].region.bits, dy, dx)
            paint = region[:, :, None] * pattern[:, :, None] * colour[None, None, :]
            out = np.where(region[:, :, None], paint, out)
        scale = self._params["render_scale"]
        bias = self._params["render_bias"]
        out = out * scale[None, None, :] + bias[None, None, :]
        return ImageTensor.from_array(_quantize(out), space="pixel")

    # -- refinement surface

    def trainable_params(self) -> dict:
        return {name: values.copy() for name, values in self._params.items()}

    def set_trainable_param(self, name: str, values: np.ndarray) -> None:
        if name not in self._params:
            raise ContractViolation(f"backend has no trainable parameter {name!r}")
        arr = np.asarray(values, dtype=np.float64)
        _require(arr.shape == self._params[name].shape, f"bad shape for parameter {name!r}")
        self._params[name] = arr.copy()


def _shift_bits(bits: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Shift a boolean grid, dropping pixels that leave the canvas."""
    out = np.zeros_like(bits)
    h, w = bits.shape
    src_r = slice(max(0, -dy), min(h, h - dy))
    dst_r = slice(max(0, dy), min(h, h + dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = bits[src_r, src_c]
    return out


class SyntheticEncoder:
    """Toy multimodal encoder over the word-embedding space.

    Text embeds through the backend's encoder. Images are analyzed against
    the world: each region contributes its category and instance basis
    vectors plus soft colour/material estimates, weighted by how much of
    the region is painted. Image embeddings have nonnegative coordinates,
    so image-image cosines are reported raw; text embeddings carry signed
    filler components, so text-involved cosines get the (1+cos)/2 map.
    """

    encoder_id = "synthetic-concept-v1"
    image_signed = False
    text_signed = True

    _SOFTNESS = 10.0

    def __init__(self, backend: SyntheticBackend):
        self._backend = backend
        self._world = backend.world
        self._rgb = np.array([COLOUR_RGB[c] for c in COLOURS])
        self._patterns = np.stack(
            [material_pattern(m, self._world.height, self._world.width) for m in MATERIALS]
        )
        self._words = build_word_table()

    def embed_text(self, text: str) -> np.ndarray:
        return np.array(self._backend.encode_text(text).vector)

    def embed_image(self, image: ImageTensor) -> np.ndarray:
        _require(
            (image.height, image.width) == (self._world.height, self._world.width),
            "image dimensions must match the encoder's world",
            DimensionMismatch,
        )
        data = image.data
        painted = data.max(axis=2) > 0.0
        out = np.zeros(EMBED_DIM)
        for idx, shape in enumerate(self._world.shapes):
            sel = shape.region.bits & painted
            count = int(sel.sum())
            if count == 0:
                continue
            weight = count / shape.region.count()
            mean_rgb = data[sel].mean(axis=0)
            col_cos = self._rgb @ mean_rgb / (
                np.linalg.norm(self._rgb, axis=1) * max(np.linalg.norm(mean_rgb), 1e-12)
            )
            w_col = _softmax(self._SOFTNESS * col_cos)
            intensity = data[sel].max(axis=1)
            pats = self._patterns[:, sel]
            mat_cos = pats @ intensity / (
                np.linalg.norm(pats, axis=1) * max(np.linalg.norm(intensity), 1e-12)
            )
            w_mat = _softmax(self._SOFTNESS * mat_cos)
            vec = np.array(self._words[shape.category])
            vec[_INST0 + idx] += 1.0
            vec += w_col @ np.stack([self._words[c] for c in COLOURS])
            vec += w_mat @ np.stack([self._words[m] for m in MATERIALS])
            out += weight * vec
        return out
