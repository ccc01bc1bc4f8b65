from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class Sample:
    """One synthetic image with its identity, camera, client and domain labels"""
    image: np.ndarray
    identity: int
    camera: int
    client: int
    domain: int

    def to_dict(self) -> Dict[str, int]:
        """Label record (the image is stored separately)"""
        return {
            'identity': self.identity,
            'camera': self.camera,
            'client': self.client,
            'domain': self.domain,
        }


@dataclass
class DomainSpec:
    """Synthetic domain definition: identities, cameras and their photometric styles"""
    num_identities: int
    num_cameras: int
    samples_per_identity_per_camera: int
    identity_dim: int
    camera_gains: np.ndarray    # [num_cameras, C]
    camera_biases: np.ndarray   # [num_cameras, C]
    noise_sigma: float
    channels: int = 4
    height: int = 8
    width: int = 8
    domain_id: int = 0
    client_id: int = -1
    identity_offset: int = 0
    render_seed: int = 0

    def validate(self) -> Tuple[bool, List[str]]:
        """Check the domain invariants; returns (is_valid, error_messages)"""
        errors = []
        if self.num_identities < 1:
            errors.append("num_identities must be >= 1")
        if self.num_cameras < 2:
            errors.append("num_cameras must be >= 2 (cross-camera pairs are required)")
        if self.samples_per_identity_per_camera < 1:
            errors.append("samples_per_identity_per_camera must be >= 1")
        expected = (self.num_cameras, self.channels)
        gains = np.asarray(self.camera_gains)
        biases = np.asarray(self.camera_biases)
        if gains.shape != expected or biases.shape != expected:
            errors.append(f"camera styles must have shape {expected}, got {gains.shape} / {biases.shape}")
        elif np.any(gains <= 0):
            errors.append("camera gains must be > 0")
        if self.noise_sigma < 0:
            errors.append("noise_sigma must be >= 0")
        return len(errors) == 0, errors

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def identities(self) -> List[int]:
        return list(range(self.identity_offset, self.identity_offset + self.num_identities))


@dataclass
class RetrievalSplit:
    """Query/gallery split of an evaluation domain"""
    name: str
    query: List[Sample]
    gallery: List[Sample]

    @property
    def samples(self) -> List[Sample]:
        return self.query + self.gallery


@dataclass
class FederationDataset:
    """Per-client source samples plus held-out evaluation splits"""
    clients: List[List[Sample]]
    target: Optional[RetrievalSplit] = None
    source_tests: List[RetrievalSplit] = field(default_factory=list)

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    def client_identities(self, k: int) -> List[int]:
        return sorted({s.identity for s in self.clients[k]})

    def client_cameras(self, k: int) -> List[int]:
        return sorted({s.camera for s in self.clients[k]})

    def evaluation_splits(self) -> List[RetrievalSplit]:
        """Splits evaluated each round: the target, or every source test split"""
        if self.target is not None:
            return [self.target]
        return list(self.source_tests)


def stack_samples(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack samples into (images [N,C,H,W], identities [N], cameras [N])"""
    if not samples:
        raise ValueError("cannot stack an empty sample list")
    images = np.stack([s.image for s in samples]).astype(np.float64)
    identities = np.array([s.identity for s in samples], dtype=np.int64)
    cameras = np.array([s.camera for s in samples], dtype=np.int64)
    return images, identities, cameras
