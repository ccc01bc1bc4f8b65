"""
Seeded synthetic re-identification benchmark: every domain renders identity
latents through a shared linear map and applies per-camera affine styles.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np

from src.models.experiment import DatasetConfig, ExperimentConfig
from src.models.sample import DomainSpec, FederationDataset, RetrievalSplit, Sample

logger = logging.getLogger(__name__)


def _render_matrix(spec: DomainSpec) -> np.ndarray:
    """Fixed seeded linear map from identity latent to C*H*W pixels"""
    rng = np.random.default_rng(np.random.SeedSequence([spec.render_seed, 0x5eed]))
    c, h, w = spec.image_shape
    return rng.normal(0.0, 1.0 / np.sqrt(spec.identity_dim), size=(c * h * w, spec.identity_dim))


def generate_domain(spec: DomainSpec, seed: int) -> List[Sample]:
    """Render every (identity, camera, instance) of a domain"""
    is_valid, errors = spec.validate()
    if not is_valid:
        raise ValueError(f"invalid domain spec: {'; '.join(errors)}")

    rng = np.random.default_rng(seed)
    render = _render_matrix(spec)
    gains = np.asarray(spec.camera_gains, dtype=np.float64)
    biases = np.asarray(spec.camera_biases, dtype=np.float64)
    shape = spec.image_shape

    samples = []
    latents = rng.standard_normal(size=(spec.num_identities, spec.identity_dim))
    for slot, identity in enumerate(spec.identities):
        base = (render @ latents[slot]).reshape(shape)
        for camera in range(spec.num_cameras):
            styled = gains[camera][:, None, None] * base + biases[camera][:, None, None]
            for _ in range(spec.samples_per_identity_per_camera):
                image = styled
                if spec.noise_sigma > 0:
                    image = styled + rng.normal(0.0, spec.noise_sigma, size=shape)
                samples.append(Sample(image=np.array(image, dtype=np.float64), identity=identity,
                                      camera=camera, client=spec.client_id, domain=spec.domain_id))
    logger.debug(f"Generated domain {spec.domain_id}: {len(samples)} samples")
    return samples


def draw_camera_styles(config: DatasetConfig, rng: np.random.Generator,
                       outside: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Per-camera per-channel (gain, bias) pairs.

    With outside=True the styles land beyond the source ranges so that no
    convex combination of source templates reproduces them. Each channel's
    gain is either stretched above the range or shrunk below it, so the
    channels of one target camera are rescaled unevenly.
    """
    shape = (config.num_cameras, config.channels)
    g_low, g_high = config.gain_range
    b_low, b_high = config.bias_range
    gains = rng.uniform(g_low, g_high, size=shape)
    biases = rng.uniform(b_low, b_high, size=shape)
    if outside:
        gap = config.target_style_gap
        stretch = rng.random(size=shape) < 0.5
        gains = np.where(stretch,
                         rng.uniform(g_high + gap * 0.5, g_high + gap, size=shape),
                         g_low / rng.uniform(1.0 + gap * 0.5, 1.0 + gap, size=shape))
        sign = np.where(rng.random(size=shape) < 0.5, -1.0, 1.0)
        biases = np.where(sign > 0,
                          rng.uniform(b_high + gap * 0.5, b_high + gap, size=shape),
                          rng.uniform(b_low - gap, b_low - gap * 0.5, size=shape))
    return gains, biases


def domain_specs(config: DatasetConfig, seed: int, target_domain: Optional[int] = None) -> List[DomainSpec]:
    """Deterministic spec per configured domain; identities are globally unique"""
    specs = []
    for d in range(config.num_domains):
        rng = np.random.default_rng(np.random.SeedSequence([seed, d, 0x57]))
        gains, biases = draw_camera_styles(
            config, rng, outside=(d == target_domain and config.target_style_outside_bank))
        specs.append(DomainSpec(
            num_identities=config.num_identities,
            num_cameras=config.num_cameras,
            samples_per_identity_per_camera=config.samples_per_identity_per_camera,
            identity_dim=config.identity_dim,
            camera_gains=gains,
            camera_biases=biases,
            noise_sigma=config.noise_sigma,
            channels=config.channels,
            height=config.height,
            width=config.width,
            domain_id=d,
            identity_offset=d * config.num_identities,
            render_seed=seed,
        ))
    return specs


def split_query_gallery(name: str, samples: Sequence[Sample]) -> RetrievalSplit:
    """Per identity: one camera's samples are queries, the other cameras form the gallery"""
    by_identity = {}
    for s in samples:
        by_identity.setdefault(s.identity, []).append(s)

    query, gallery = [], []
    for rank, identity in enumerate(sorted(by_identity)):
        cameras = sorted({s.camera for s in by_identity[identity]})
        if len(cameras) < 2:
            raise ValueError(f"target not evaluable: identity {identity} appears under < 2 cameras")
        query_camera = cameras[rank % len(cameras)]
        for s in by_identity[identity]:
            (query if s.camera == query_camera else gallery).append(s)
    return RetrievalSplit(name=name, query=query, gallery=gallery)


def source_domains(config: ExperimentConfig) -> Tuple[List[int], Optional[int]]:
    protocol = config.protocol
    all_domains = list(range(config.dataset.num_domains))
    if protocol.name == 'III':
        sources = protocol.sources or all_domains
        return list(sources), None
    target = protocol.target_domain
    if protocol.sources:
        sources = list(protocol.sources)
    else:
        sources = [d for d in all_domains if d != target]
    return sources, target


def generate_federation(config: ExperimentConfig, seed: int) -> FederationDataset:
    """Build the per-client source data and held-out evaluation splits.

    Protocol I/II hold out the target domain; protocol III instead generates a
    disjoint test identity set for each source domain.
    """
    data_config = config.dataset
    sources, target = source_domains(config)
    if len(sources) < 2:
        raise ValueError("at least 2 source domains are required")
    if target is not None and target in sources:
        raise ValueError(f"target domain {target} is also a source")
    if data_config.num_cameras < 2:
        raise ValueError("target not evaluable: fewer than 2 cameras")

    specs = domain_specs(data_config, seed, target_domain=target)
    clients = []
    for k, d in enumerate(sources):
        spec = specs[d]
        spec.client_id = k
        clients.append(generate_domain(spec, seed=_domain_seed(seed, d)))

    target_split = None
    if target is not None:
        target_samples = generate_domain(specs[target], seed=_domain_seed(seed, target))
        target_split = split_query_gallery(f"target_d{target}", target_samples)

    source_tests = []
    if config.protocol.name == 'III':
        total = data_config.num_domains * data_config.num_identities
        for k, d in enumerate(sources):
            spec = specs[d]
            test_spec = DomainSpec(
                num_identities=data_config.source_test_identities,
                num_cameras=spec.num_cameras,
                samples_per_identity_per_camera=spec.samples_per_identity_per_camera,
                identity_dim=spec.identity_dim,
                camera_gains=spec.camera_gains,
                camera_biases=spec.camera_biases,
                noise_sigma=spec.noise_sigma,
                channels=spec.channels,
                height=spec.height,
                width=spec.width,
                domain_id=d,
                client_id=k,
                identity_offset=total + d * data_config.source_test_identities,
                render_seed=spec.render_seed,
            )
            test_samples = generate_domain(test_spec, seed=_domain_seed(seed, d, split=1))
            source_tests.append(split_query_gallery(f"source_d{d}", test_samples))

    logger.info(f"Federation: {len(clients)} clients, "
                f"{sum(len(c) for c in clients)} source samples, "
                f"{len(source_tests)} source test splits, target={target}")
    return FederationDataset(clients=clients, target=target_split, source_tests=source_tests)


def _domain_seed(seed: int, domain: int, split: int = 0) -> int:
    return int(np.random.SeedSequence([seed, domain, split]).generate_state(1)[0])
