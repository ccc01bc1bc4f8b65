"""Experiment configuration tree. Every field carries its default."""

from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

ANCHORING_MODES = ('static', 'dynamic')
SAMPLING_SCOPES = ('global', 'local', 'random_stat')
METADATA_MODES = ('clean', 'corrupt', 'pseudo_group')
MINING_MODES = ('batch_hard', 'batch_all')
PROTOCOLS = ('I', 'II', 'III')


@dataclass
class DatasetConfig:
    num_domains: int = 4
    num_identities: int = 20
    num_cameras: int = 4
    samples_per_identity_per_camera: int = 8
    identity_dim: int = 8
    channels: int = 4
    height: int = 8
    width: int = 8
    noise_sigma: float = 1.0
    gain_range: List[float] = field(default_factory=lambda: [0.5, 1.5])
    bias_range: List[float] = field(default_factory=lambda: [-1.5, 1.5])
    target_style_outside_bank: bool = True
    target_style_gap: float = 2.0
    source_test_identities: int = 10


@dataclass
class ProtocolConfig:
    name: str = 'I'
    target_domain: int = 3
    sources: Optional[List[int]] = None
    rotate: bool = False


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    embedding_dim: int = 32
    token_dim: int = 16


@dataclass
class CsaConfig:
    enabled: bool = True
    num_tokens: int = 4
    lambda_c3: float = 0.1
    temperature: float = 0.07
    epochs: int = 200
    learning_rate: float = 0.01
    batch_identities: int = 4
    batch_instances: int = 4
    dedup_identities: bool = True
    anchoring: str = 'static'
    dynamic_steps: int = 20
    token_init_scale: float = 0.02

    @property
    def batch_size(self) -> int:
        return self.batch_identities * self.batch_instances


@dataclass
class GsdConfig:
    enabled: bool = True
    scope: str = 'global'
    epsilon: float = 1e-5
    metadata: str = 'clean'
    corruption_fraction: float = 0.3
    num_pseudo_groups: Optional[int] = None
    refresh_each_round: bool = False
    random_stat_mean_range: Optional[List[float]] = None
    random_stat_var_range: Optional[List[float]] = None


@dataclass
class LocalObjectiveConfig:
    """Hyperparameters of one client's local optimization"""
    lambda_align: float = 1.0
    margin: float = 0.3
    temperature: float = 0.07
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_identities: int = 4
    batch_instances: int = 4
    local_epochs: int = 1
    triplet_mining: str = 'batch_hard'
    use_alignment: bool = True
    use_stylized_view: bool = True

    @property
    def batch_size(self) -> int:
        return self.batch_identities * self.batch_instances


@dataclass
class FederationConfig:
    rounds: int = 40
    local_epochs: int = 1
    batch_identities: int = 4
    batch_instances: int = 4
    lambda_align: float = 1.0
    margin: float = 0.3
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: List[float] = field(default_factory=lambda: [2.0 / 3.0])
    lr_gamma: float = 0.1
    triplet_mining: str = 'batch_hard'
    shared_head: bool = False
    eval_every: int = 1

    @property
    def batch_size(self) -> int:
        return self.batch_identities * self.batch_instances

    def milestone_rounds(self) -> List[int]:
        """0-indexed round indices from which the next decay applies"""
        return sorted(int(f * self.rounds) for f in self.lr_milestones)

    def learning_rate_at(self, round_index: int) -> float:
        """Step-decayed learning rate for a 0-indexed round"""
        passed = sum(1 for m in self.milestone_rounds() if round_index >= m)
        return self.learning_rate * (self.lr_gamma ** passed)

    def objective(self, use_alignment: bool, use_stylized_view: bool, temperature: float) -> LocalObjectiveConfig:
        return LocalObjectiveConfig(
            lambda_align=self.lambda_align,
            margin=self.margin,
            temperature=temperature,
            learning_rate=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_identities=self.batch_identities,
            batch_instances=self.batch_instances,
            local_epochs=self.local_epochs,
            triplet_mining=self.triplet_mining,
            use_alignment=use_alignment,
            use_stylized_view=use_stylized_view,
        )


@dataclass
class EvaluationConfig:
    max_rank: int = 10
    histogram_bins: int = 20


SECTION_TYPES = {
    'dataset': DatasetConfig,
    'protocol': ProtocolConfig,
    'model': ModelConfig,
    'csa': CsaConfig,
    'gsd': GsdConfig,
    'federation': FederationConfig,
    'evaluation': EvaluationConfig,
}

# Desk-scale values that differ from the full-scale training recipe
SCALE_DEVIATIONS = {
    'federation.batch_size': {'full_scale': 64, 'desk': 16},
    'federation.learning_rate': {'full_scale': 1e-3, 'desk': 0.01},
    'federation.rounds': {'full_scale': 60, 'desk': 40},
    'csa.epochs': {'full_scale': 120, 'desk': 200},
}


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration"""
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    csa: CsaConfig = field(default_factory=CsaConfig)
    gsd: GsdConfig = field(default_factory=GsdConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    seed: int = 0
    output_dir: str = 'runs/seed_%SEED%'
    workers: int = 1

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> 'ExperimentConfig':
        """Build a config, filling every missing field with its default"""
        data = dict(data or {})
        kwargs = {}
        for name, section_cls in SECTION_TYPES.items():
            section = data.pop(name, None) or {}
            known = {f.name for f in fields(section_cls)}
            kwargs[name] = section_cls(**{k: v for k, v in section.items() if k in known})
        for key in ('seed', 'output_dir', 'workers'):
            if key in data and data[key] is not None:
                kwargs[key] = data[key]
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, overrides: Dict[str, Any]) -> 'ExperimentConfig':
        """Copy with dotted-path overrides applied, e.g. {'csa.lambda_c3': 0.0}"""
        data = self.to_dict()
        for path, value in overrides.items():
            node = data
            parts = path.split('.')
            for part in parts[:-1]:
                node = node[part]
            if parts[-1] not in node:
                raise KeyError(f"unknown config field: {path}")
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(data)

    def local_objective(self, use_alignment: bool, use_stylized_view: bool) -> LocalObjectiveConfig:
        """Client objective; the alignment temperature is the anchoring one"""
        return self.federation.objective(use_alignment, use_stylized_view, temperature=self.csa.temperature)

    def resolved_output_dir(self) -> str:
        return (self.output_dir
                .replace('%SEED%', str(self.seed))
                .replace('%PROTOCOL%', self.protocol.name))
