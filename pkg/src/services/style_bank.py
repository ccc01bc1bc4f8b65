"""
Global style diversification: per-camera style templates, the server-side
style bank, template-based re-normalization, camera-metadata corruption and
k-means pseudo-grouping for clients without camera metadata.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from src.models.sample import Sample
from src.utils.numerics import ChannelStats, channel_stats, pooled_channel_stats

logger = logging.getLogger(__name__)

MAX_KMEANS_ITERATIONS = 100
CENTROID_MOVEMENT = 1e-6


@dataclass(frozen=True)
class StyleTemplate:
    """Channel statistics of one camera (or pseudo-group) of one client"""
    stats: ChannelStats
    origin_client: int
    origin_group: int

    @property
    def sort_key(self) -> Tuple[int, int]:
        return (self.origin_client, self.origin_group)


@dataclass(frozen=True)
class StyleBank:
    """Union of every client's style templates, ordered by (client, group)"""
    templates: Tuple[StyleTemplate, ...]

    def __len__(self) -> int:
        return len(self.templates)

    @property
    def num_channels(self) -> int:
        return self.templates[0].stats.num_channels

    def for_client(self, client: int) -> List[StyleTemplate]:
        return [t for t in self.templates if t.origin_client == client]

    def mean_matrix(self) -> np.ndarray:
        return np.stack([t.stats.mean for t in self.templates])

    def var_matrix(self) -> np.ndarray:
        return np.stack([t.stats.var for t in self.templates])


@dataclass
class PseudoGroups:
    """K-means grouping of samples by their per-image channel statistics"""
    labels: np.ndarray
    centroids: np.ndarray
    num_groups: int


def extract_templates(samples: Sequence[Sample], groups: Sequence[int],
                      client: Optional[int] = None,
                      group_ids: Optional[Sequence[int]] = None) -> List[StyleTemplate]:
    """One template per group, pooled over all pixels of all images in the group.

    group_ids declares the groups a client expects (e.g. its camera list);
    declared groups without samples are skipped.
    """
    if len(samples) != len(groups):
        raise ValueError(f"{len(samples)} samples but {len(groups)} group labels")
    by_group: Dict[int, List[np.ndarray]] = {int(g): [] for g in (group_ids or [])}
    for sample, group in zip(samples, groups):
        by_group.setdefault(int(group), []).append(sample.image)

    origin = client if client is not None else (samples[0].client if samples else -1)
    templates = []
    for group in sorted(by_group):
        images = by_group[group]
        if not images:
            logger.warning(f"Skipping empty group {group} of client {origin}")
            continue
        stats = pooled_channel_stats(np.stack(images))
        templates.append(StyleTemplate(stats=stats, origin_client=int(origin), origin_group=group))
    return templates


def stylize(x: np.ndarray, template: StyleTemplate, epsilon: float = 1e-5) -> np.ndarray:
    """Re-normalize x's channel statistics to the template's"""
    x = np.asarray(x, dtype=np.float64)
    target = template.stats
    if x.ndim != 3 or x.shape[0] != target.num_channels:
        raise ValueError(f"channel mismatch: template has {target.num_channels} channels, input shape {x.shape}")
    own = channel_stats(x)
    mean = own.mean[:, None, None]
    denom = np.sqrt(own.var + epsilon)[:, None, None]
    # Zero-variance channels with epsilon=0 normalize to 0
    safe = np.where(denom > 0, denom, 1.0)
    normalized = np.where(denom > 0, (x - mean) / safe, 0.0)
    return normalized * np.sqrt(target.var)[:, None, None] + target.mean[:, None, None]


def stylize_batch(images: np.ndarray, templates: Sequence[StyleTemplate], epsilon: float = 1e-5) -> np.ndarray:
    """Stylize image i with template i"""
    return np.stack([stylize(x, t, epsilon) for x, t in zip(images, templates)])


class StyleBankService:
    """Builds the style bank and samples templates for stylized views"""

    def __init__(self, epsilon: float = 1e-5,
                 random_stat_mean_range: Optional[Sequence[float]] = None,
                 random_stat_var_range: Optional[Sequence[float]] = None):
        self.epsilon = epsilon
        self.random_stat_mean_range = random_stat_mean_range
        self.random_stat_var_range = random_stat_var_range
        self.build_count = 0
        self.logger = logging.getLogger(__name__)

    def build_bank(self, client_templates: Sequence[Sequence[StyleTemplate]]) -> StyleBank:
        """Union of all uploaded templates, stable-sorted by (client, group)"""
        merged = [t for templates in client_templates for t in templates]
        if not merged:
            raise ValueError("empty bank")
        channels = {t.stats.num_channels for t in merged}
        if len(channels) != 1:
            raise ValueError(f"templates disagree on channel count: {sorted(channels)}")
        merged.sort(key=lambda t: t.sort_key)
        self.build_count += 1
        self.logger.info(f"Built style bank #{self.build_count} with {len(merged)} templates")
        return StyleBank(templates=tuple(merged))

    def sample_template(self, bank: StyleBank, rng: np.random.Generator,
                        scope: str = 'global', client: Optional[int] = None) -> StyleTemplate:
        """Draw one template under the given sampling scope"""
        if scope == 'global':
            if len(bank) == 0:
                raise ValueError("empty bank")
            return bank.templates[int(rng.integers(len(bank)))]
        if scope == 'local':
            local = bank.for_client(client)
            if not local:
                raise ValueError(f"no templates for client {client} in local scope")
            return local[int(rng.integers(len(local)))]
        if scope == 'random_stat':
            mean_low, mean_high = self._range(bank, 'mean')
            var_low, var_high = self._range(bank, 'var')
            stats = ChannelStats(mean=rng.uniform(mean_low, mean_high),
                                 var=rng.uniform(var_low, var_high))
            return StyleTemplate(stats=stats, origin_client=-1, origin_group=-1)
        raise ValueError(f"unknown sampling scope: {scope}")

    def _range(self, bank: StyleBank, which: str) -> Tuple[np.ndarray, np.ndarray]:
        configured = self.random_stat_mean_range if which == 'mean' else self.random_stat_var_range
        channels = bank.num_channels
        if configured is not None:
            low, high = configured
            return np.full(channels, float(low)), np.full(channels, float(high))
        # Default: the per-channel span covered by the bank
        matrix = bank.mean_matrix() if which == 'mean' else bank.var_matrix()
        return matrix.min(axis=0), matrix.max(axis=0)


def corrupt_camera_ids(samples: Sequence[Sample], fraction: float,
                       rng: np.random.Generator) -> List[Sample]:
    """Re-draw exactly round(fraction * n) camera labels per client to a different camera"""
    if not 0 <= fraction <= 1:
        raise ValueError(f"corruption fraction must be in [0, 1], got {fraction}")
    samples = list(samples)
    by_client: Dict[int, List[int]] = {}
    for i, s in enumerate(samples):
        by_client.setdefault(s.client, []).append(i)

    corrupted = list(samples)
    for client in sorted(by_client):
        indices = by_client[client]
        cameras = sorted({samples[i].camera for i in indices})
        n_corrupt = int(round(fraction * len(indices)))
        if n_corrupt == 0:
            continue
        if len(cameras) < 2:
            raise ValueError(f"cannot corrupt camera labels of client {client}: only one camera")
        chosen = rng.choice(len(indices), size=n_corrupt, replace=False)
        for slot in sorted(chosen):
            i = indices[slot]
            alternatives = [c for c in cameras if c != samples[i].camera]
            corrupted[i] = replace(samples[i], camera=int(alternatives[int(rng.integers(len(alternatives)))]))
        logger.info(f"Corrupted {n_corrupt}/{len(indices)} camera labels of client {client}")
    return corrupted


def kmeans_tolerance(features: np.ndarray, movement: float = CENTROID_MOVEMENT) -> float:
    """sklearn tol giving an absolute stop at total centroid movement < movement.

    sklearn stops once the summed squared centroid shift falls under
    tol * mean per-feature variance, so the absolute bound is rescaled.
    """
    scale = float(np.mean(np.var(features, axis=0)))
    if scale <= 0:
        return 0.0
    return movement ** 2 / scale


def pseudo_group(samples: Sequence[Sample], num_groups: int, rng: np.random.Generator) -> PseudoGroups:
    """Lloyd k-means on per-image (mean, var) channel-stat vectors.

    Initial centroids are distinct random points; empty clusters are re-seeded
    to the farthest point.
    """
    if num_groups < 1:
        raise ValueError("num_groups must be >= 1")
    if num_groups > len(samples):
        raise ValueError(f"num_groups {num_groups} exceeds number of samples {len(samples)}")
    features = np.stack([channel_stats(s.image).as_vector() for s in samples])

    distinct = np.unique(features, axis=0)
    if len(distinct) < num_groups:
        logger.warning(f"Only {len(distinct)} distinct stat vectors; reducing pseudo-groups from {num_groups}")
        num_groups = len(distinct)

    init = distinct[rng.choice(len(distinct), size=num_groups, replace=False)]
    kmeans = KMeans(n_clusters=num_groups, init=init, n_init=1, max_iter=MAX_KMEANS_ITERATIONS,
                    tol=kmeans_tolerance(features), algorithm='lloyd',
                    random_state=int(rng.integers(2 ** 31 - 1)))
    labels = kmeans.fit_predict(features)
    return PseudoGroups(labels=labels.astype(np.int64), centroids=kmeans.cluster_centers_, num_groups=num_groups)


def observe_groups(samples: Sequence[Sample], metadata: str, rng: np.random.Generator,
                   corruption_fraction: float = 0.3, num_pseudo_groups: Optional[int] = None) -> np.ndarray:
    """Per-sample style-group labels one client can see under a metadata regime.

    clean: true camera ids; corrupt: a fraction re-drawn to wrong cameras;
    pseudo_group: k-means clusters standing in for cameras.
    """
    if metadata == 'clean':
        return np.array([s.camera for s in samples], dtype=np.int64)
    if metadata == 'corrupt':
        corrupted = corrupt_camera_ids(samples, corruption_fraction, rng)
        return np.array([s.camera for s in corrupted], dtype=np.int64)
    if metadata == 'pseudo_group':
        groups = num_pseudo_groups or len({s.camera for s in samples})
        return pseudo_group(samples, groups, rng).labels
    raise ValueError(f"unknown metadata mode: {metadata}")
