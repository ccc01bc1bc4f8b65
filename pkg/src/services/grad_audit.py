"""
Finite-difference audit of every closed-form backward pass on seeded random
configurations. Used by the `grad-check` CLI verb and the test-suite.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from src.models.encoders import ClassifierHead, EncoderParams, PromptTokens, TextEncoderSurrogate
from src.models.experiment import CsaConfig, LocalObjectiveConfig
from src.models.local_objective import AnchorSet, loss_align, loss_id, loss_tri, local_objective
from src.services.anchoring import BatchIndex, csa_objective, loss_c3, loss_i2t, loss_t2i
from src.utils.numerics import GradCheckReport, central_differences, grad_check, l2_normalize

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
EPSILON = 1e-5
SIGNAL_FLOOR = 1e-5
ABS_TOLERANCE = 1e-7

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass
class AuditCase:
    name: str
    seed: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed(TOLERANCE)


def informative_coordinates(f: Objective, point: np.ndarray,
                            floor: float = SIGNAL_FLOOR) -> Tuple[np.ndarray, np.ndarray]:
    """Split coordinates into (signal, quiet) by max(|analytic|, |finite difference|).

    Signal coordinates get the relative check; quiet ones, where relative error
    is dominated by round-off, get the absolute check. Every coordinate lands
    in one of the two, so a partial the backward pass drops still shows up.
    """
    point = np.asarray(point, dtype=np.float64).ravel()
    _, grad = f(point.copy())
    scale = np.maximum(np.abs(np.asarray(grad).ravel()), np.abs(central_differences(f, point, EPSILON)))
    signal = scale > floor
    return np.flatnonzero(signal), np.flatnonzero(~signal)


def check(f: Objective, point: np.ndarray) -> GradCheckReport:
    signal, quiet = informative_coordinates(f, point)
    return grad_check(f, point, epsilon=EPSILON, indices=signal, abs_indices=quiet, abs_tolerance=ABS_TOLERANCE)


def _labels(rng: np.random.Generator, identities: int = 3, per_identity: int = 3) -> np.ndarray:
    labels = np.repeat(np.arange(identities), per_identity)
    return labels[rng.permutation(labels.size)]


def _cameras(labels: np.ndarray) -> np.ndarray:
    # Alternate cameras within each identity so every identity spans >= 2 cameras
    cameras = np.zeros_like(labels)
    for y in np.unique(labels):
        members = np.flatnonzero(labels == y)
        cameras[members] = np.arange(members.size) % 2
    return cameras


def case_i2t(rng: np.random.Generator) -> Tuple[Objective, np.ndarray]:
    labels = _labels(rng)
    index = BatchIndex.from_labels(labels, _cameras(labels))
    shape = (index.batch_size, len(index.columns))
    f = lambda s: loss_i2t(s.reshape(shape), index.sample_columns, 0.5, return_grad=True)  # noqa: E731
    return f, rng.uniform(-1, 1, size=shape).ravel()


def case_t2i(rng: np.random.Generator) -> Tuple[Objective, np.ndarray]:
    labels = _labels(rng)
    index = BatchIndex.from_labels(labels, _cameras(labels))
    shape = (index.batch_size, len(index.columns))
    f = lambda s: loss_t2i(s.reshape(shape), index, 0.5, return_grad=True)  # noqa: E731
    return f, rng.uniform(-1, 1, size=shape).ravel()


def case_c3(rng: np.random.Generator) -> Tuple[Objective, np.ndarray]:
    labels = _labels(rng)
    index = BatchIndex.from_labels(labels, _cameras(labels))
    f = lambda s: loss_c3(s, index, return_grad=True)  # noqa: E731
    return f, rng.uniform(-1, 1, size=labels.size)


def case_csa_tokens(rng: np.random.Generator) -> Tuple[Objective, np.ndarray]:
    labels = _labels(rng)
    cameras = _cameras(labels)
    surrogate = TextEncoderSurrogate(token_dim=6, embedding_dim=5, seed=int(rng.integers(1 << 16)))
    tokens = PromptTokens.initialize(sorted(set(labels.tolist())), 2, 6, rng, scale=0.5)
    unit, _ = l2_normalize(rng.normal(size=(labels.size, 5)))
    config = CsaConfig(temperature=0.5, lambda_c3=0.1)

    def f(vector):
        shifted = PromptTokens(identities=tokens.identities, tokens=vector.reshape(tokens.tokens.shape))
        step, grad = csa_objective(unit, labels, cameras, shifted, surrogate, config)
        return step.total, grad

    return f, tokens.tokens.ravel().copy()


def case_id(rng: np.random.Generator) -> Tuple[Objective, np.ndarray]:
    targets = rng.integers(0, 5, size=6)
    f = lambda z: loss_id(z.reshape(6, 5), targets, return_grad=True)  # noqa: E731
    return f, rng.normal(size=30)


def _tri_case(mining: str) -> Callable[[np.random.Generator], Tuple[Objective, np.ndarray]]:
    def build(rng: np.random.Generator):
        labels = np.repeat(np.arange(3), 3)
        shape = (labels.size, 4)
        f = lambda v: loss_tri(v.reshape(shape), labels, 0.3, mining, return_grad=True)  # noqa: E731
        return f, rng.normal(size=shape).ravel()
    return build


def case_align(rng: np.random.Generator) -> Tuple[Objective, np.ndarray]:
    prototypes, _ = l2_normalize(rng.normal(size=(5, 4)))
    targets = rng.integers(0, 5, size=6)
    f = lambda v: loss_align(v.reshape(6, 4), prototypes, targets, 0.5, return_grad=True)  # noqa: E731
    return f, rng.normal(size=24)


def case_local_objective(rng: np.random.Generator) -> Tuple[Objective, np.ndarray]:
    labels = np.repeat(np.arange(2), 2)
    images = rng.normal(size=(4, 2, 2, 2))
    stylized = rng.normal(size=(4, 2, 2, 2))
    encoder = EncoderParams.initialize(8, 6, 4, rng)
    head = ClassifierHead.initialize([0, 1], 4, rng)
    prototypes, _ = l2_normalize(rng.normal(size=(2, 4)))
    anchors = AnchorSet(identities=[0, 1], matrix=prototypes)
    config = LocalObjectiveConfig(temperature=0.5, margin=0.3)
    split = encoder.flatten().size

    def f(vector):
        params = encoder.unflatten(vector[:split])
        shifted_head = head.unflatten(vector[split:])
        result = local_objective(params, shifted_head, images, stylized, labels, anchors, config)
        return result.loss, np.concatenate([result.encoder_grad.flatten(), result.head_grad.flatten()])

    return f, np.concatenate([encoder.flatten(), head.flatten()])


CASES: Dict[str, Callable[[np.random.Generator], Tuple[Objective, np.ndarray]]] = {
    'loss_i2t': case_i2t,
    'loss_t2i': case_t2i,
    'loss_c3': case_c3,
    'csa_tokens': case_csa_tokens,
    'loss_id': case_id,
    'loss_tri_batch_hard': _tri_case('batch_hard'),
    'loss_tri_batch_all': _tri_case('batch_all'),
    'loss_align': case_align,
    'local_objective': case_local_objective,
}


def run_audit(seed: int = 0, configurations: int = 10) -> List[AuditCase]:
    """Every case on `configurations` seeded instances"""
    results = []
    for c, (name, build) in enumerate(CASES.items()):
        for i in range(configurations):
            rng = np.random.default_rng([seed, c, i])
            f, point = build(rng)
            case = AuditCase(name=name, seed=i, report=check(f, point))
            if not case.passed:
                logger.warning(f"{name} config {i}: max rel error {case.report.max_rel_error:.3e}")
            results.append(case)
    return results
