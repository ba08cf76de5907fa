"""Model contracts consumed by the pipeline, plus diffusion-schedule math.

A backend bundles every learned model the pipeline touches: text encoder,
denoiser with per-token attention capture, image-to-text retriever, zero-shot
segmentor and image generator. Two implementations are envisioned:

  * ``synthetic`` (this package, fully implemented): a deterministic
    closed-form world used for desk-scale verification.
  * ``diffusion-adapter`` (contract only): a latent-diffusion model with a
    CLIP-style text encoder. Attention maps are the cross-attention rows for
    a token's position, averaged over heads and the mid-resolution 16x16
    layers, at the sampled timestep only. The adapter must implement the
    same vector-Jacobian products (``denoise_vjp`` / ``attention_vjp``) via
    its framework's autograd.

Noise is always a caller-supplied input; backends never draw randomness of
their own except inside ``generate``, which derives everything from its seed
argument. Read-only calls may run concurrently when ``concurrent_reads`` is
true; token-table mutation is only legal from the single training
coordinator.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..core import (
    AttentionMap,
    BinaryMask,
    ContractViolation,
    DimensionMismatch,
    IceError,
    ImageTensor,
    NoiseSchedule,
    TextConcept,
    _require,
)


class UnknownTokenError(IceError, KeyError):
    """A learnable token id appears in a prompt but is not registered."""


class UnknownConceptError(IceError, KeyError):
    """A label handed to the segmentor is not in the backend vocabulary."""


class UnknownWordError(IceError, KeyError):
    """A plain word has no fixed embedding in the backend table."""


# ---------------------------------------------------------------------------
# Prompt and prediction types


@dataclass(frozen=True)
class PromptSpec:
    """A template with exactly one ``{}`` slot and the filler placed in it."""

    template: str
    filler: str
    rendered: str

    def __post_init__(self):
        _require(self.template.count("{}") == 1, "template must contain exactly one {} slot")
        _require(
            self.rendered == self.template.replace("{}", self.filler),
            "rendered prompt must equal template with slot replaced by filler",
        )

    @classmethod
    def render(cls, template: str, filler: str) -> "PromptSpec":
        return cls(template=template, filler=filler, rendered=template.replace("{}", filler))


@dataclass(frozen=True)
class EncodedPrompt:
    """Deterministic encoding of a prompt.

    ``vector`` is the pooled (mean) embedding of the content tokens.
    ``tokens`` lists content tokens in order ("&" and "," separators are
    dropped); ``groups`` splits them at "," boundaries, one group per
    composed concept.
    """

    text: str
    tokens: tuple
    groups: tuple
    vector: np.ndarray

    def __post_init__(self):
        arr = np.array(self.vector, dtype=np.float64)
        arr.setflags(write=False)
        object.__setattr__(self, "vector", arr)


@dataclass(frozen=True)
class DenoisePrediction:
    """Noise estimate plus a normalized attention map per prompt token."""

    noise_estimate: ImageTensor
    attention: Mapping[str, AttentionMap]

    def __post_init__(self):
        object.__setattr__(self, "attention", dict(self.attention))


# ---------------------------------------------------------------------------
# Schedule math


def cumulative_alpha(schedule: NoiseSchedule, t: int) -> float:
    """Product of (1 - beta_s) for s = 1..t."""
    _require(1 <= t <= schedule.T, f"timestep {t} out of range [1, {schedule.T}]")
    return float(schedule.alpha_bar[t - 1])


def add_noise(x0: ImageTensor, t: int, eps: ImageTensor, schedule: NoiseSchedule) -> ImageTensor:
    """Forward-process sample: sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    The result is a latent-space tensor; values are unbounded.
    """
    _require(x0.same_shape(eps), "x0 and eps must share shapes", DimensionMismatch)
    ab = cumulative_alpha(schedule, t)
    data = math.sqrt(ab) * x0.data + math.sqrt(1.0 - ab) * eps.data
    return ImageTensor(x0.height, x0.width, x0.channels, data, "latent")


# ---------------------------------------------------------------------------
# Backend contract


class DiffusionBackend(ABC):
    """Contract for every learned model the pipeline consumes.

    Implementations must be bit-deterministic: repeated calls with equal
    arguments produce equal outputs.
    """

    #: whether read-only calls tolerate concurrent use
    concurrent_reads: bool = True

    #: reserved low-frequency vocabulary word used to seed instance tokens
    rare_token_word: str = "sks"

    @property
    @abstractmethod
    def schedule(self) -> NoiseSchedule: ...

    @property
    @abstractmethod
    def embedding_dim(self) -> int: ...

    @property
    @abstractmethod
    def attention_grid(self) -> tuple[int, int]: ...

    # -- vocabulary and learnable-token table

    @abstractmethod
    def vocabulary(self) -> tuple: ...

    @abstractmethod
    def word_embedding(self, word: str) -> np.ndarray:
        """Fixed embedding of a vocabulary word; raises UnknownWordError."""

    @abstractmethod
    def nearest_vocabulary_word(self, word: str) -> str:
        """Closest vocabulary word to an out-of-vocabulary label."""

    @abstractmethod
    def register_token(self, token_id: str, values: np.ndarray) -> None: ...

    @abstractmethod
    def token_embedding(self, token_id: str) -> np.ndarray: ...

    @abstractmethod
    def set_token_embedding(self, token_id: str, values: np.ndarray) -> None: ...

    @abstractmethod
    def token_ids(self) -> tuple: ...

    # -- model surfaces

    @abstractmethod
    def encode_text(self, prompt) -> EncodedPrompt: ...

    @abstractmethod
    def predict_noise(self, x_t: ImageTensor, t: int, condition: EncodedPrompt) -> DenoisePrediction: ...

    @abstractmethod
    def retrieve_concepts(self, x: ImageTensor, k: int) -> list: ...

    @abstractmethod
    def segment(self, x: ImageTensor, concept: TextConcept) -> BinaryMask: ...

    @abstractmethod
    def generate(self, condition: EncodedPrompt, seed: int) -> ImageTensor: ...

    # -- gradient surfaces used by the trainer

    @abstractmethod
    def denoise_vjp(
        self, x_t: ImageTensor, t: int, condition: EncodedPrompt, grad_eps: np.ndarray
    ) -> tuple:
        """Backpropagate d(loss)/d(noise_estimate) to token embeddings and
        trainable backend parameters. Returns (token_grads, param_grads)."""

    @abstractmethod
    def attention_vjp(self, condition: EncodedPrompt, grads: Mapping[str, np.ndarray]) -> dict:
        """Backpropagate per-token d(loss)/d(attention weights) to tokens."""

    # -- latent conversion

    def to_latent(self, image: ImageTensor) -> ImageTensor:
        """Map a pixel-space image into the model's latent space.

        The synthetic latent space is the identity; real adapters override
        this with their autoencoder.
        """
        return image.as_space("latent")

    # -- refinement surface

    def trainable_params(self) -> dict:
        """Name -> current values of refinable backend parameters.

        Empty dict means the backend does not support refinement.
        """
        return {}

    def set_trainable_param(self, name: str, values: np.ndarray) -> None:
        raise ContractViolation(f"backend has no trainable parameter {name!r}")


def make_backend(name: str, **kwargs) -> DiffusionBackend:
    """Instantiate a backend by config name."""
    if name == "synthetic":
        from .synthetic import SyntheticBackend

        return SyntheticBackend(**kwargs)
    if name == "diffusion-adapter":
        raise ContractViolation(
            "the diffusion-adapter backend is a documented contract; plug in an "
            "implementation of DiffusionBackend and construct it directly"
        )
    raise ContractViolation(f"unknown backend name {name!r}")
