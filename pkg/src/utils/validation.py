from dataclasses import fields
from typing import Any, Callable, Dict, List, Optional, Tuple, Union, get_args, get_origin, get_type_hints

from src.models.experiment import (
    ANCHORING_MODES,
    METADATA_MODES,
    MINING_MODES,
    PROTOCOLS,
    SAMPLING_SCOPES,
    SECTION_TYPES,
)

TOP_LEVEL_FIELDS = {'seed': int, 'output_dir': str, 'workers': int}

Rule = Tuple[Callable[[Any], bool], str]


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


def _ordered_pair(v) -> bool:
    return len(v) == 2 and v[0] <= v[1]


class ExperimentConfigValidator:
    """Validates experiment config data against the declared schema"""

    RULES: Dict[str, Rule] = {
        'dataset.num_domains': (lambda v: v >= 2, "must be >= 2"),
        'dataset.num_identities': (lambda v: v >= 2, "must be >= 2"),
        'dataset.num_cameras': (lambda v: v >= 2, "must be >= 2 (cross-camera pairs are required)"),
        'dataset.samples_per_identity_per_camera': (_positive, "must be >= 1"),
        'dataset.identity_dim': (_positive, "must be >= 1"),
        'dataset.channels': (_positive, "must be >= 1"),
        'dataset.height': (_positive, "must be >= 1"),
        'dataset.width': (_positive, "must be >= 1"),
        'dataset.noise_sigma': (_non_negative, "must be >= 0"),
        'dataset.gain_range': (lambda v: _ordered_pair(v) and v[0] > 0, "must be [low, high] with 0 < low <= high"),
        'dataset.bias_range': (_ordered_pair, "must be [low, high] with low <= high"),
        'dataset.target_style_gap': (_non_negative, "must be >= 0"),
        'dataset.source_test_identities': (lambda v: v >= 1, "must be >= 1"),
        'protocol.name': (lambda v: v in PROTOCOLS, f"must be one of {list(PROTOCOLS)}"),
        'protocol.target_domain': (_non_negative, "must be >= 0"),
        'model.hidden_dim': (_positive, "must be >= 1"),
        'model.embedding_dim': (_positive, "must be >= 1"),
        'model.token_dim': (_positive, "must be >= 1"),
        'csa.num_tokens': (lambda v: v >= 1, "must be >= 1"),
        'csa.lambda_c3': (_non_negative, "must be >= 0"),
        'csa.temperature': (_positive, "must be > 0"),
        'csa.epochs': (_non_negative, "must be >= 0"),
        'csa.learning_rate': (_positive, "must be > 0"),
        'csa.batch_identities': (_positive, "must be >= 1"),
        'csa.batch_instances': (_positive, "must be >= 1"),
        'csa.anchoring': (lambda v: v in ANCHORING_MODES, f"must be one of {list(ANCHORING_MODES)}"),
        'csa.dynamic_steps': (_non_negative, "must be >= 0"),
        'csa.token_init_scale': (_non_negative, "must be >= 0"),
        'gsd.scope': (lambda v: v in SAMPLING_SCOPES, f"must be one of {list(SAMPLING_SCOPES)}"),
        'gsd.epsilon': (_non_negative, "must be >= 0"),
        'gsd.metadata': (lambda v: v in METADATA_MODES, f"must be one of {list(METADATA_MODES)}"),
        'gsd.corruption_fraction': (lambda v: 0 <= v <= 1, "must be in [0, 1]"),
        'gsd.num_pseudo_groups': (lambda v: v is None or v >= 1, "must be >= 1"),
        'gsd.random_stat_mean_range': (lambda v: v is None or _ordered_pair(v), "must be [low, high]"),
        'gsd.random_stat_var_range': (lambda v: v is None or (_ordered_pair(v) and v[0] >= 0),
                                      "must be [low, high] with low >= 0"),
        'federation.rounds': (_non_negative, "must be >= 0"),
        'federation.local_epochs': (lambda v: v >= 1, "must be >= 1"),
        'federation.batch_identities': (lambda v: v >= 2, "must be >= 2 (triplets need a negative)"),
        'federation.batch_instances': (lambda v: v >= 2, "must be >= 2 (triplets need a positive)"),
        'federation.lambda_align': (_non_negative, "must be >= 0"),
        'federation.margin': (_non_negative, "must be >= 0"),
        'federation.learning_rate': (_positive, "must be > 0"),
        'federation.momentum': (lambda v: 0 <= v < 1, "must be in [0, 1)"),
        'federation.weight_decay': (_non_negative, "must be >= 0"),
        'federation.lr_milestones': (lambda v: all(0 <= f <= 1 for f in v), "fractions must be in [0, 1]"),
        'federation.lr_gamma': (_positive, "must be > 0"),
        'federation.triplet_mining': (lambda v: v in MINING_MODES, f"must be one of {list(MINING_MODES)}"),
        'federation.eval_every': (lambda v: v >= 1, "must be >= 1"),
        'evaluation.max_rank': (lambda v: v >= 1, "must be >= 1"),
        'evaluation.histogram_bins': (lambda v: v >= 1, "must be >= 1"),
        'seed': (_non_negative, "must be >= 0"),
        'workers': (lambda v: v >= 1, "must be >= 1"),
    }

    def validate(self, data: Optional[Dict[str, Any]],
                 line_map: Optional[Dict[str, int]] = None) -> Tuple[bool, List[str]]:
        """
        Validate experiment config data
        Returns: (is_valid, error_messages), each message prefixed with its source line
        """
        line_map = line_map or {}
        errors: List[str] = []
        data = data or {}

        if not isinstance(data, dict):
            return False, ["line 1: top level must be a mapping"]

        for key, value in data.items():
            if key in SECTION_TYPES:
                if value is None:
                    continue
                if not isinstance(value, dict):
                    errors.append(self._anchor(line_map, key, f"section '{key}' must be a mapping"))
                    continue
                errors.extend(self._validate_section(key, value, line_map))
            elif key in TOP_LEVEL_FIELDS:
                errors.extend(self._validate_field(key, value, TOP_LEVEL_FIELDS[key], line_map))
            else:
                errors.append(self._anchor(line_map, key, f"unknown key '{key}'"))

        # Cross-field rules
        dataset = data.get('dataset') or {}
        protocol = data.get('protocol') or {}
        if isinstance(dataset, dict) and isinstance(protocol, dict):
            num_domains = dataset.get('num_domains', 4)
            target = protocol.get('target_domain', 3)
            if isinstance(target, int) and isinstance(num_domains, int) and target >= num_domains:
                errors.append(self._anchor(line_map, 'protocol.target_domain',
                                           f"target_domain {target} outside 0..{num_domains - 1}"))
            sources = protocol.get('sources')
            if isinstance(sources, list) and sources:
                if len(sources) < 2:
                    errors.append(self._anchor(line_map, 'protocol.sources', "at least 2 source domains required"))
                if isinstance(num_domains, int):
                    outside = [s for s in sources if isinstance(s, int) and not 0 <= s < num_domains]
                    if outside:
                        errors.append(self._anchor(line_map, 'protocol.sources',
                                                   f"sources {outside} outside 0..{num_domains - 1}"))
                if all(isinstance(s, int) for s in sources) and len(set(sources)) != len(sources):
                    errors.append(self._anchor(line_map, 'protocol.sources', "duplicate source domains"))
                if target in sources and protocol.get('name', 'I') != 'III':
                    errors.append(self._anchor(line_map, 'protocol.sources', "target domain listed as a source"))

        return len(errors) == 0, errors

    def _validate_section(self, section: str, values: Dict[str, Any],
                          line_map: Dict[str, int]) -> List[str]:
        section_cls = SECTION_TYPES[section]
        hints = get_type_hints(section_cls)
        known = {f.name for f in fields(section_cls)}
        errors = []
        for key, value in values.items():
            path = f"{section}.{key}"
            if key not in known:
                errors.append(self._anchor(line_map, path, f"unknown key '{path}'"))
                continue
            errors.extend(self._validate_field(path, value, hints[key], line_map))
        return errors

    def _validate_field(self, path: str, value: Any, hint: Any, line_map: Dict[str, int]) -> List[str]:
        if not self._matches(value, hint):
            return [self._anchor(line_map, path, f"invalid type for {path}: got {type(value).__name__}")]
        rule = self.RULES.get(path)
        if rule is not None:
            check, message = rule
            try:
                ok = check(value)
            except TypeError:
                ok = False
            if not ok:
                return [self._anchor(line_map, path, f"{path} {message}")]
        return []

    def _matches(self, value: Any, hint: Any) -> bool:
        origin = get_origin(hint)
        if origin is Union:
            return any(self._matches(value, arg) for arg in get_args(hint))
        if hint is type(None):
            return value is None
        if origin in (list, List):
            (item_hint,) = get_args(hint) or (Any,)
            return isinstance(value, list) and all(self._matches(v, item_hint) for v in value)
        if hint is bool:
            return isinstance(value, bool)
        if hint is int:
            return isinstance(value, int) and not isinstance(value, bool)
        if hint is float:
            return isinstance(value, (int, float)) and not isinstance(value, bool)
        if hint is Any:
            return True
        return isinstance(value, hint)

    @staticmethod
    def _anchor(line_map: Dict[str, int], path: str, message: str) -> str:
        # Fall back to the enclosing section's line
        key = path
        while key and key not in line_map:
            key = key.rpartition('.')[0]
        line = line_map.get(key)
        return f"line {line}: {message}" if line else f"line ?: {message}"
