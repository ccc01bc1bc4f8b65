"""
Trainable image encoder, identity classifier head, and the frozen text-tower
surrogate that turns learnable identity tokens into prototype embeddings.

Forward passes return a cache consumed by the matching closed-form backward.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.utils.numerics import ensure_finite

logger = logging.getLogger(__name__)


@dataclass
class EncoderParams:
    """2-layer perceptron: flatten(C*H*W) -> tanh hidden -> embedding D"""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    NAMES = ('w1', 'b1', 'w2', 'b2')

    @classmethod
    def initialize(cls, input_dim: int, hidden_dim: int, embedding_dim: int,
                   rng: np.random.Generator) -> 'EncoderParams':
        return cls(
            w1=rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(hidden_dim, input_dim)),
            b1=np.zeros(hidden_dim),
            w2=rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), size=(embedding_dim, hidden_dim)),
            b2=np.zeros(embedding_dim),
        )

    @property
    def input_dim(self) -> int:
        return int(self.w1.shape[1])

    @property
    def embedding_dim(self) -> int:
        return int(self.w2.shape[0])

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: arr.shape for name, arr in self.arrays().items()}

    def copy(self) -> 'EncoderParams':
        return EncoderParams(**{name: arr.copy() for name, arr in self.arrays().items()})

    def zeros_like(self) -> 'EncoderParams':
        return EncoderParams(**{name: np.zeros_like(arr) for name, arr in self.arrays().items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for arr in self.arrays().values()])

    def unflatten(self, vector: np.ndarray) -> 'EncoderParams':
        """New params with this object's shapes, filled from a flat vector"""
        out, offset = {}, 0
        for name, arr in self.arrays().items():
            out[name] = np.asarray(vector[offset:offset + arr.size], dtype=np.float64).reshape(arr.shape).copy()
            offset += arr.size
        return EncoderParams(**out)


@dataclass
class ClassifierHead:
    """Linear identity head over raw embeddings; columns follow `classes`"""
    weight: np.ndarray
    bias: np.ndarray
    classes: List[int]

    NAMES = ('weight', 'bias')

    @classmethod
    def initialize(cls, classes: Sequence[int], embedding_dim: int,
                   rng: np.random.Generator) -> 'ClassifierHead':
        return cls(
            weight=rng.normal(0.0, 1.0 / np.sqrt(embedding_dim), size=(len(classes), embedding_dim)),
            bias=np.zeros(len(classes)),
            classes=list(classes),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {'weight': self.weight, 'bias': self.bias}

    def copy(self) -> 'ClassifierHead':
        return ClassifierHead(weight=self.weight.copy(), bias=self.bias.copy(), classes=list(self.classes))

    def zeros_like(self) -> 'ClassifierHead':
        return ClassifierHead(weight=np.zeros_like(self.weight), bias=np.zeros_like(self.bias),
                              classes=list(self.classes))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.weight.ravel(), self.bias.ravel()])

    def unflatten(self, vector: np.ndarray) -> 'ClassifierHead':
        n = self.weight.size
        return ClassifierHead(weight=np.asarray(vector[:n]).reshape(self.weight.shape).copy(),
                              bias=np.asarray(vector[n:n + self.bias.size]).copy(),
                              classes=list(self.classes))

    def target_columns(self, identities: Sequence[int]) -> np.ndarray:
        """Column index of each identity label"""
        lookup = {y: i for i, y in enumerate(self.classes)}
        try:
            return np.array([lookup[int(y)] for y in identities], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"identity {e.args[0]} is not covered by this classifier head") from None


def encode_images(params: EncoderParams, images: np.ndarray) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Forward pass for a [N,C,H,W] stack; returns (embeddings [N,D], cache)"""
    images = np.asarray(images, dtype=np.float64)
    flat = images.reshape(images.shape[0], -1)
    if flat.shape[1] != params.input_dim:
        raise ValueError(f"shape mismatch: encoder expects {params.input_dim} inputs, got {flat.shape[1]}")
    hidden = np.tanh(flat @ params.w1.T + params.b1)
    embeddings = hidden @ params.w2.T + params.b2
    ensure_finite(embeddings, "image embeddings")
    return embeddings, {'flat': flat, 'hidden': hidden}


def encode_image(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Embedding of one [C,H,W] image"""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"shape mismatch: expected [C,H,W], got {x.shape}")
    embeddings, _ = encode_images(params, x[np.newaxis])
    return embeddings[0]


def encoder_backward(params: EncoderParams, cache: Dict[str, np.ndarray],
                     grad_embeddings: np.ndarray) -> EncoderParams:
    """Gradient of a scalar loss w.r.t. encoder params given dL/d(embeddings)"""
    hidden = cache['hidden']
    grad_w2 = grad_embeddings.T @ hidden
    grad_b2 = grad_embeddings.sum(axis=0)
    grad_pre = (grad_embeddings @ params.w2) * (1.0 - hidden ** 2)
    grad_w1 = grad_pre.T @ cache['flat']
    grad_b1 = grad_pre.sum(axis=0)
    return EncoderParams(w1=grad_w1, b1=grad_b1, w2=grad_w2, b2=grad_b2)


def head_forward(head: ClassifierHead, embeddings: np.ndarray) -> np.ndarray:
    return embeddings @ head.weight.T + head.bias


def head_backward(head: ClassifierHead, embeddings: np.ndarray,
                  grad_logits: np.ndarray) -> Tuple[ClassifierHead, np.ndarray]:
    """Returns (head gradient, dL/d(embeddings))"""
    grad_head = ClassifierHead(weight=grad_logits.T @ embeddings, bias=grad_logits.sum(axis=0),
                               classes=list(head.classes))
    return grad_head, grad_logits @ head.weight


@dataclass
class PromptTokens:
    """L learnable token vectors per identity"""
    identities: List[int]
    tokens: np.ndarray  # [num_identities, L, token_dim]

    @classmethod
    def initialize(cls, identities: Sequence[int], num_tokens: int, token_dim: int,
                   rng: np.random.Generator, scale: float = 0.02) -> 'PromptTokens':
        if num_tokens < 1:
            raise ValueError("num_tokens must be >= 1")
        return cls(identities=list(identities),
                   tokens=rng.normal(0.0, scale, size=(len(identities), num_tokens, token_dim)))

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.shape[1])

    def index_of(self, identities: Sequence[int]) -> np.ndarray:
        lookup = {y: i for i, y in enumerate(self.identities)}
        try:
            return np.array([lookup[int(y)] for y in identities], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"unknown identity {e.args[0]}: no prompt tokens") from None

    def copy(self) -> 'PromptTokens':
        return PromptTokens(identities=list(self.identities), tokens=self.tokens.copy())


class TextEncoderSurrogate:
    """Frozen linear map from (template embedding + token mean) to a unit vector"""

    def __init__(self, token_dim: int, embedding_dim: int, seed: int):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7e47]))
        # The constant phrase around the identity tokens
        self._template = rng.normal(0.0, 1.0, size=token_dim)
        self._weight = rng.normal(0.0, 1.0 / np.sqrt(token_dim), size=(embedding_dim, token_dim))
        self._template.setflags(write=False)
        self._weight.setflags(write=False)

    @property
    def template(self) -> np.ndarray:
        return self._template

    @property
    def weight(self) -> np.ndarray:
        return self._weight

    def forward(self, tokens: PromptTokens,
                identities: Sequence[int]) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """Unit-norm prototypes [A,D] for the given identities, plus cache"""
        rows = tokens.index_of(identities)
        pooled = self._template + tokens.tokens[rows].mean(axis=1)
        raw = pooled @ self._weight.T
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("zero-norm vector")
        return raw / norms, {'rows': rows, 'raw': raw, 'norms': norms}

    def backward(self, tokens: PromptTokens, cache: Dict[str, np.ndarray],
                 grad_prototypes: np.ndarray) -> np.ndarray:
        """dL/d(tokens) [num_identities, L, token_dim] given dL/d(prototypes)"""
        unit = cache['raw'] / cache['norms']
        grad_raw = (grad_prototypes - np.sum(grad_prototypes * unit, axis=1, keepdims=True) * unit) / cache['norms']
        grad_pooled = grad_raw @ self._weight
        grad_tokens = np.zeros_like(tokens.tokens)
        per_token = grad_pooled / tokens.num_tokens
        # Duplicate identities accumulate
        np.add.at(grad_tokens, cache['rows'], per_token[:, np.newaxis, :])
        return grad_tokens


def encode_prompt(surrogate: TextEncoderSurrogate, tokens: PromptTokens, y: int) -> np.ndarray:
    """Unit-norm text embedding of identity y's prompt"""
    prototypes, _ = surrogate.forward(tokens, [y])
    return prototypes[0]


@dataclass(frozen=True)
class TextPrototype:
    """Cached, immutable semantic anchor t_y"""
    identity: int
    vector: np.ndarray = field(repr=False)


def cache_prototypes(surrogate: TextEncoderSurrogate, tokens: PromptTokens,
                     identities: Optional[Sequence[int]] = None) -> List[TextPrototype]:
    """Snapshot the current prompt embeddings as frozen prototypes"""
    identities = list(tokens.identities if identities is None else identities)
    cached = []
    # One row at a time so each anchor is bit-identical to encode_prompt(y)
    for y in identities:
        frozen = np.array(encode_prompt(surrogate, tokens, y), dtype=np.float64, copy=True)
        frozen.setflags(write=False)
        cached.append(TextPrototype(identity=int(y), vector=frozen))
    logger.debug(f"Cached {len(cached)} text prototypes")
    return cached


def prototype_matrix(prototypes: Sequence[TextPrototype]) -> Tuple[List[int], np.ndarray]:
    """(identity order, stacked [A,D] matrix) of a prototype list"""
    identities = [p.identity for p in prototypes]
    matrix = np.stack([p.vector for p in prototypes]) if prototypes else np.zeros((0, 0))
    return identities, matrix
