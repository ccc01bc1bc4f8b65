"""
One end-to-end experiment: generate the federation, run the anchoring phase on
every client, build the style bank, train federatively, evaluate and persist.
"""

import hashlib
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import joblib
import numpy as np
import pandas as pd
import scipy
import sklearn
from joblib import Parallel, delayed

from src import __version__
from src.models.encoders import ClassifierHead, EncoderParams, TextEncoderSurrogate, TextPrototype
from src.models.experiment import SCALE_DEVIATIONS, ExperimentConfig
from src.models.local_objective import AnchorSet
from src.models.sample import FederationDataset
from src.services.anchoring import AnchoringService, CsaResult
from src.services.federation import ClientState, FederationResult, FederationService
from src.services.style_bank import StyleBank, StyleBankService, extract_templates, observe_groups
from src.services.synthdata import generate_federation
from src.utils.artifact_dao import ArtifactDAO


class PhaseError(RuntimeError):
    """Failure inside a named pipeline phase"""

    def __init__(self, phase: str, message: str = ''):
        super().__init__(f"[{phase}] {message}")
        self.phase = phase
        self.message = message

    def __reduce__(self):
        # args holds only the formatted text
        return type(self), (self.phase, self.message)


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    seed: int
    dataset: FederationDataset
    federation: FederationResult
    bank: Optional[StyleBank]
    prototypes: Dict[int, List[TextPrototype]] = field(default_factory=dict)
    csa_results: Dict[int, CsaResult] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def camera_variance(self) -> float:
        """Client-mean cross-camera similarity variance after the anchoring phase"""
        if not self.csa_results:
            return float('nan')
        return float(np.mean([r.camera_variance for r in self.csa_results.values()]))

    @property
    def summary(self) -> Dict[str, float]:
        """Split-averaged final retrieval metrics"""
        frame = pd.DataFrame(list(self.federation.final_metrics.values()))
        return {column: float(value) for column, value in frame.mean().items()} if not frame.empty else {}

    def metrics(self) -> Dict[str, Any]:
        """Everything in metrics.json; contains no timing so reruns are byte-identical"""
        margins = self.federation.final_margins
        return {
            'seed': self.seed,
            'protocol': self.config.protocol.name,
            'splits': self.federation.final_metrics,
            'summary': self.summary,
            'margins': margins.to_dict() if margins is not None else None,
            'csa_camera_variance': None if np.isnan(self.camera_variance) else self.camera_variance,
            'csa_final_loss': {str(k): (r.loss_history[-1] if r.loss_history else None)
                               for k, r in sorted(self.csa_results.items())},
            'bank_size': len(self.bank) if self.bank is not None else 0,
        }

    def rounds_frame(self) -> pd.DataFrame:
        rows = [row for report in self.federation.reports for row in report.rows()]
        return pd.DataFrame(rows, columns=['round', 'client', 'metric', 'value'])


def dataset_digest(dataset: FederationDataset) -> str:
    """sha256 over every image and label of the federation, in a fixed order"""
    digest = hashlib.sha256()
    groups = list(dataset.clients) + [split.samples for split in dataset.evaluation_splits()]
    for samples in groups:
        for s in samples:
            digest.update(np.ascontiguousarray(s.image, dtype='<f8').tobytes())
            digest.update(np.array([s.identity, s.camera, s.client, s.domain], dtype='<i8').tobytes())
    return digest.hexdigest()


def library_versions() -> Dict[str, str]:
    return {
        'coevo': __version__,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'scipy': scipy.__version__,
        'scikit-learn': sklearn.__version__,
        'pandas': pd.__version__,
        'joblib': joblib.__version__,
    }


def _run_client_csa(service: AnchoringService, state: ClientState, encoder: EncoderParams, seed: int) -> CsaResult:
    return service.run_csa_phase(state.client, state.images, state.labels, state.observed_cameras, encoder, seed)


class ExperimentRunner:
    """Runs the full pipeline for one (config, seed) pair"""

    def __init__(self, config: ExperimentConfig, workers: int = 1):
        self.config = config
        self.workers = max(1, workers)
        self.phase = 'config'
        self.logger = logging.getLogger(__name__)

    @contextmanager
    def _phase(self, name: str, timings: Dict[str, float]):
        self.phase = name
        self.logger.info(f"== phase {name} ==")
        start = time.perf_counter()
        try:
            yield
        except PhaseError:
            raise
        except Exception as e:
            raise PhaseError(name, str(e)) from e
        finally:
            timings[name] = time.perf_counter() - start

    def initial_encoder(self, seed: int) -> EncoderParams:
        c = self.config
        input_dim = c.dataset.channels * c.dataset.height * c.dataset.width
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xe7c]))
        return EncoderParams.initialize(input_dim, c.model.hidden_dim, c.model.embedding_dim, rng)

    def client_states(self, dataset: FederationDataset, seed: int) -> List[ClientState]:
        """Client-local state: data, observed camera metadata and identity head"""
        gsd = self.config.gsd
        states = []
        for k, samples in enumerate(dataset.clients):
            metadata_rng = np.random.default_rng([seed, k, 0x0b5])
            observed = observe_groups(samples, gsd.metadata, metadata_rng,
                                      gsd.corruption_fraction, gsd.num_pseudo_groups)
            head = ClassifierHead.initialize(dataset.client_identities(k), self.config.model.embedding_dim,
                                             np.random.default_rng([seed, k, 0x4ead]))
            states.append(ClientState.from_samples(k, samples, head, observed_cameras=observed))
        return states

    def shared_head(self, dataset: FederationDataset, seed: int) -> Optional[ClassifierHead]:
        if not self.config.federation.shared_head:
            return None
        classes = sorted({y for k in range(dataset.num_clients) for y in dataset.client_identities(k)})
        return ClassifierHead.initialize(classes, self.config.model.embedding_dim,
                                         np.random.default_rng([seed, 0x4ead]))

    def run(self, seed: Optional[int] = None, dataset: Optional[FederationDataset] = None) -> ExperimentResult:
        config = self.config
        seed = config.seed if seed is None else seed
        timings: Dict[str, float] = {}

        with self._phase('data', timings):
            if dataset is None:
                dataset = generate_federation(config, seed)
            states = self.client_states(dataset, seed)
            encoder = self.initial_encoder(seed)
            surrogate = TextEncoderSurrogate(config.model.token_dim, config.model.embedding_dim, seed)

        anchoring = AnchoringService(surrogate, config.csa)
        csa_results: Dict[int, CsaResult] = {}
        with self._phase('csa', timings):
            if config.csa.enabled:
                results = Parallel(n_jobs=self.workers)(
                    delayed(_run_client_csa)(anchoring, state, encoder, seed) for state in states)
                for state, result in zip(states, results):
                    state.tokens = result.tokens
                    state.anchors = AnchorSet.from_prototypes(result.prototypes)
                    csa_results[state.client] = result
            else:
                self.logger.info("Anchoring disabled; alignment loss is skipped")

        style_service = StyleBankService(config.gsd.epsilon, config.gsd.random_stat_mean_range,
                                         config.gsd.random_stat_var_range)
        bank = None
        with self._phase('bank', timings):
            if config.gsd.enabled:
                templates = [extract_templates(state.samples, state.observed_cameras, client=state.client)
                             for state in states]
                bank = style_service.build_bank(templates)
            else:
                self.logger.info("Style diversification disabled; training on original views only")

        def refresh(state: ClientState, current: EncoderParams, round_number: int) -> AnchorSet:
            rng = np.random.default_rng([seed, round_number, state.client, 2])
            prototypes = anchoring.refresh_prototypes(state.tokens, current, state.images, state.labels,
                                                      state.observed_cameras, rng, config.csa.dynamic_steps)
            return AnchorSet.from_prototypes(prototypes)

        with self._phase('federation', timings):
            service = FederationService(config, workers=self.workers, style_service=style_service,
                                        prototype_refresher=refresh)
            federation = service.run_federation(dataset, states, encoder, bank, seed,
                                                shared_head=self.shared_head(dataset, seed))

        self.logger.info(f"Finished seed {seed}: {federation.final_metrics}")
        return ExperimentResult(
            config=config, seed=seed, dataset=dataset, federation=federation, bank=bank,
            prototypes={k: r.prototypes for k, r in csa_results.items()},
            csa_results=csa_results, timings=timings,
        )

    def run_rotation(self, seed: Optional[int] = None) -> Dict[int, ExperimentResult]:
        """Leave-one-domain-out over every domain as the target in turn"""
        results = {}
        for target in range(self.config.dataset.num_domains):
            rotated = self.config.with_overrides({'protocol.target_domain': target, 'protocol.sources': None})
            self.logger.info(f"Rotation: target domain {target}")
            results[target] = ExperimentRunner(rotated, self.workers).run(seed)
        return results

    def write_artifacts(self, result: ExperimentResult, dao: ArtifactDAO) -> Dict[str, str]:
        """Persist metrics, round log, bank, prototypes and checkpoint; the manifest goes last"""
        timings = result.timings
        with self._phase('output', timings):
            dao.write_json('metrics.json', result.metrics())
            dao.write_frame('rounds.csv', result.rounds_frame())
            if result.bank is not None:
                dao.save_bank(result.bank)
            for client, prototypes in sorted(result.prototypes.items()):
                dao.save_prototypes(client, prototypes)
            dao.save_checkpoint(result.federation.encoder, result.federation.heads, result.seed)
            if result.federation.final_margins is not None:
                dao.write_frame('margins.csv', result.federation.final_margins.histogram_frame())
            manifest = {
                'config': result.config.to_dict(),
                'seed': result.seed,
                'deviations': SCALE_DEVIATIONS,
                'dataset_sha256': dataset_digest(result.dataset),
                'checksums': dao.checksums(),
                'versions': library_versions(),
                'timings': timings,
            }
            dao.write_json('manifest.json', manifest)
        return manifest['checksums']
