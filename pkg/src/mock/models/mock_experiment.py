"""
Tiny experiment configurations and hand-built samples for tests.
"""

from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from src.models.encoders import ClassifierHead, EncoderParams
from src.models.experiment import ExperimentConfig
from src.models.sample import Sample

TINY_OVERRIDES: Dict[str, Any] = {
    'dataset.num_domains': 3,
    'dataset.num_identities': 4,
    'dataset.num_cameras': 2,
    'dataset.samples_per_identity_per_camera': 2,
    'dataset.identity_dim': 4,
    'dataset.channels': 2,
    'dataset.height': 2,
    'dataset.width': 2,
    'dataset.source_test_identities': 3,
    'protocol.target_domain': 2,
    'model.hidden_dim': 8,
    'model.embedding_dim': 4,
    'model.token_dim': 4,
    'csa.epochs': 2,
    'csa.batch_identities': 2,
    'csa.batch_instances': 2,
    'csa.dynamic_steps': 2,
    'federation.rounds': 2,
    'federation.batch_identities': 2,
    'federation.batch_instances': 2,
    'evaluation.histogram_bins': 4,
}


def create_mock_experiment_config(**overrides: Any) -> ExperimentConfig:
    """A seconds-fast config: 2 source clients x 4 ids x 2 cameras x 2 samples of 2x2x2 images.

    Keyword overrides use double underscores for dots, e.g. csa__enabled=False.
    """
    merged = dict(TINY_OVERRIDES)
    merged.update({key.replace('__', '.'): value for key, value in overrides.items()})
    return ExperimentConfig().with_overrides(merged)


def create_mock_config_dict(**sections: Dict[str, Any]) -> Dict[str, Any]:
    """Nested YAML-shaped dict of the tiny config, with per-section updates"""
    data = create_mock_experiment_config().to_dict()
    for name, values in sections.items():
        data[name].update(values)
    return data


def create_mock_sample(value: float = 0.0, identity: int = 0, camera: int = 0, client: int = 0,
                       shape: Sequence[int] = (2, 2, 2), image: Optional[np.ndarray] = None) -> Sample:
    if image is None:
        image = np.full(tuple(shape), float(value))
    return Sample(image=np.asarray(image, dtype=np.float64), identity=identity, camera=camera,
                  client=client, domain=client)


def create_mock_client_samples(num_identities: int = 2, num_cameras: int = 2, per_camera: int = 2,
                               client: int = 0, seed: int = 0, shape: Sequence[int] = (2, 2, 2),
                               camera_bias: float = 3.0) -> List[Sample]:
    """Random images where camera c adds c * camera_bias to every pixel"""
    rng = np.random.default_rng(seed)
    samples = []
    for y in range(num_identities):
        for c in range(num_cameras):
            for _ in range(per_camera):
                image = rng.normal(size=tuple(shape)) + c * camera_bias
                samples.append(create_mock_sample(identity=client * 100 + y, camera=c, client=client, image=image))
    return samples


def create_mock_encoder(input_dim: int = 8, hidden_dim: int = 6, embedding_dim: int = 4,
                        seed: int = 0) -> EncoderParams:
    return EncoderParams.initialize(input_dim, hidden_dim, embedding_dim, np.random.default_rng(seed))


def create_mock_head(classes: Sequence[int], embedding_dim: int = 4, seed: int = 0) -> ClassifierHead:
    return ClassifierHead.initialize(classes, embedding_dim, np.random.default_rng(seed))
