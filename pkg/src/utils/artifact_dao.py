import hashlib
import json
import logging
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.models.encoders import ClassifierHead, EncoderParams, TextPrototype
from src.models.sample import FederationDataset, RetrievalSplit, Sample
from src.services.style_bank import StyleBank, StyleTemplate
from src.utils.numerics import ChannelStats

BANK_MAGIC = b'GCSB'
PROTOTYPE_MAGIC = b'TPRO'
CHECKPOINT_MAGIC = b'CKPT'
FORMAT_VERSION = 1

_HEADER = np.dtype('<u4')
_DTYPE_CODES = {0: np.dtype('<f8'), 1: np.dtype('<i8')}


def _bank_record(channels: int) -> np.dtype:
    return np.dtype([('client', '<i4'), ('group', '<i4'),
                     ('mean', '<f8', (channels,)), ('var', '<f8', (channels,))])


def _prototype_record(dim: int) -> np.dtype:
    return np.dtype([('identity', '<i8'), ('vector', '<f8', (dim,))])


def _read_header(blob: bytes, magic: bytes, fields: int) -> Tuple[np.ndarray, int]:
    if blob[:4] != magic:
        raise ValueError(f"bad magic: expected {magic!r}, got {blob[:4]!r}")
    header = np.frombuffer(blob, dtype=_HEADER, count=fields, offset=4)
    if int(header[0]) != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {int(header[0])}")
    return header, 4 + fields * _HEADER.itemsize


def encode_bank(bank: StyleBank) -> bytes:
    """Little-endian binary: magic, (version, channels, count), then one record per template"""
    channels = bank.num_channels
    records = np.zeros(len(bank), dtype=_bank_record(channels))
    for i, t in enumerate(bank.templates):
        records[i] = (t.origin_client, t.origin_group, t.stats.mean, t.stats.var)
    header = np.array([FORMAT_VERSION, channels, len(bank)], dtype=_HEADER)
    return BANK_MAGIC + header.tobytes() + records.tobytes()


def decode_bank(blob: bytes) -> StyleBank:
    header, offset = _read_header(blob, BANK_MAGIC, 3)
    channels, count = int(header[1]), int(header[2])
    records = np.frombuffer(blob, dtype=_bank_record(channels), count=count, offset=offset)
    templates = tuple(
        StyleTemplate(stats=ChannelStats(mean=np.array(r['mean']), var=np.array(r['var'])),
                      origin_client=int(r['client']), origin_group=int(r['group']))
        for r in records
    )
    return StyleBank(templates=templates)


def encode_prototypes(prototypes: Sequence[TextPrototype]) -> bytes:
    dim = int(prototypes[0].vector.shape[0]) if prototypes else 0
    records = np.zeros(len(prototypes), dtype=_prototype_record(dim))
    for i, p in enumerate(prototypes):
        records[i] = (p.identity, p.vector)
    header = np.array([FORMAT_VERSION, dim, len(prototypes)], dtype=_HEADER)
    return PROTOTYPE_MAGIC + header.tobytes() + records.tobytes()


def decode_prototypes(blob: bytes) -> List[TextPrototype]:
    header, offset = _read_header(blob, PROTOTYPE_MAGIC, 3)
    dim, count = int(header[1]), int(header[2])
    records = np.frombuffer(blob, dtype=_prototype_record(dim), count=count, offset=offset)
    prototypes = []
    for r in records:
        vector = np.array(r['vector'], dtype=np.float64)
        vector.setflags(write=False)
        prototypes.append(TextPrototype(identity=int(r['identity']), vector=vector))
    return prototypes


def encode_checkpoint(arrays: Dict[str, np.ndarray], seed: int) -> bytes:
    """Named arrays in sorted-name order; each entry is (name, dtype code, shape, raw data)"""
    parts = [CHECKPOINT_MAGIC, np.array([FORMAT_VERSION, seed & 0xffffffff, len(arrays)], dtype=_HEADER).tobytes()]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        encoded_name = name.encode('utf-8')
        parts.append(np.array([len(encoded_name), code, arr.ndim], dtype=_HEADER).tobytes())
        parts.append(encoded_name)
        parts.append(np.array(arr.shape, dtype='<u8').tobytes())
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    return b''.join(parts)


def decode_checkpoint(blob: bytes) -> Tuple[Dict[str, np.ndarray], int]:
    header, offset = _read_header(blob, CHECKPOINT_MAGIC, 3)
    seed, count = int(header[1]), int(header[2])
    arrays = {}
    for _ in range(count):
        name_len, code, ndim = (int(v) for v in np.frombuffer(blob, dtype=_HEADER, count=3, offset=offset))
        offset += 3 * _HEADER.itemsize
        name = blob[offset:offset + name_len].decode('utf-8')
        offset += name_len
        shape = tuple(int(v) for v in np.frombuffer(blob, dtype='<u8', count=ndim, offset=offset))
        offset += 8 * ndim
        dtype = _DTYPE_CODES[code]
        size = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=size, offset=offset).reshape(shape).copy()
        offset += size * dtype.itemsize
    return arrays, seed


def model_arrays(encoder: EncoderParams, heads: Optional[Dict[int, ClassifierHead]] = None) -> Dict[str, np.ndarray]:
    """Flat name -> array map of the global encoder and client heads"""
    arrays = {f'encoder.{name}': arr for name, arr in encoder.arrays().items()}
    for client, head in (heads or {}).items():
        arrays[f'head{client}.weight'] = head.weight
        arrays[f'head{client}.bias'] = head.bias
        arrays[f'head{client}.classes'] = np.asarray(head.classes, dtype=np.int64)
    return arrays


def model_from_arrays(arrays: Dict[str, np.ndarray]) -> Tuple[EncoderParams, Dict[int, ClassifierHead]]:
    encoder = EncoderParams(**{name: arrays[f'encoder.{name}'] for name in EncoderParams.NAMES})
    heads = {}
    for key in arrays:
        if key.startswith('head') and key.endswith('.weight'):
            client = int(key[len('head'):-len('.weight')])
            heads[client] = ClassifierHead(weight=arrays[key], bias=arrays[f'head{client}.bias'],
                                           classes=[int(c) for c in arrays[f'head{client}.classes']])
    return encoder, heads


def sha256_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactDAO:
    """Reads and writes run artifacts under one output directory"""

    def __init__(self, base_dir: str):
        self.base_dir = base_dir
        self.logger = logging.getLogger(__name__)
        self.written: List[str] = []

    def path(self, name: str) -> str:
        return os.path.join(self.base_dir, name)

    def _write_bytes(self, name: str, blob: bytes) -> str:
        path = self.path(name)
        os.makedirs(os.path.dirname(path) or '.', exist_ok=True)
        with open(path, 'wb') as f:
            f.write(blob)
        self.written.append(name)
        self.logger.debug(f"Wrote {path} ({len(blob)} bytes)")
        return path

    def _read_bytes(self, name: str) -> bytes:
        with open(self.path(name), 'rb') as f:
            return f.read()

    def write_json(self, name: str, data: Any) -> str:
        """Sorted keys and fixed indentation so identical data gives identical bytes"""
        text = json.dumps(data, indent=2, sort_keys=True, default=_json_default)
        return self._write_bytes(name, (text + '\n').encode('utf-8'))

    def read_json(self, name: str) -> Any:
        return json.loads(self._read_bytes(name).decode('utf-8'))

    def write_frame(self, name: str, frame: pd.DataFrame) -> str:
        return self._write_bytes(name, frame.to_csv(index=False, float_format='%.10g').encode('utf-8'))

    def read_frame(self, name: str) -> pd.DataFrame:
        return pd.read_csv(self.path(name))

    def write_text(self, name: str, text: str) -> str:
        return self._write_bytes(name, text.encode('utf-8'))

    def save_bank(self, bank: StyleBank, name: str = 'bank') -> None:
        """Binary bank plus a JSON twin for inspection"""
        self._write_bytes(f'{name}.bin', encode_bank(bank))
        self.write_json(f'{name}.json', bank_to_dict(bank))

    def load_bank(self, name: str = 'bank.bin') -> StyleBank:
        return decode_bank(self._read_bytes(name))

    def save_prototypes(self, client: int, prototypes: Sequence[TextPrototype]) -> str:
        return self._write_bytes(f'prototypes_client{client}.bin', encode_prototypes(prototypes))

    def load_prototypes(self, client: int) -> List[TextPrototype]:
        return decode_prototypes(self._read_bytes(f'prototypes_client{client}.bin'))

    def save_checkpoint(self, encoder: EncoderParams, heads: Optional[Dict[int, ClassifierHead]],
                        seed: int, name: str = 'checkpoint.bin') -> str:
        return self._write_bytes(name, encode_checkpoint(model_arrays(encoder, heads), seed))

    def load_checkpoint(self, name: str = 'checkpoint.bin') -> Tuple[EncoderParams, Dict[int, ClassifierHead], int]:
        arrays, seed = decode_checkpoint(self._read_bytes(name))
        encoder, heads = model_from_arrays(arrays)
        return encoder, heads, seed

    def save_samples(self, name: str, samples: Sequence[Sample]) -> None:
        """Images as .npy (no timestamps) and labels as CSV"""
        images = np.stack([s.image for s in samples]) if samples else np.zeros((0,))
        path = self.path(f'{name}_images.npy')
        os.makedirs(os.path.dirname(path), exist_ok=True)
        np.save(path, images, allow_pickle=False)
        self.written.append(f'{name}_images.npy')
        self.write_frame(f'{name}_labels.csv', pd.DataFrame([s.to_dict() for s in samples],
                                                             columns=['identity', 'camera', 'client', 'domain']))

    def load_samples(self, name: str) -> List[Sample]:
        images = np.load(self.path(f'{name}_images.npy'), allow_pickle=False)
        labels = self.read_frame(f'{name}_labels.csv')
        return [Sample(image=images[i], identity=int(row.identity), camera=int(row.camera),
                       client=int(row.client), domain=int(row.domain))
                for i, row in enumerate(labels.itertuples(index=False))]

    def save_federation(self, dataset: FederationDataset, prefix: str = 'data') -> None:
        """Export every client and evaluation split; dataset.json indexes them"""
        index: Dict[str, Any] = {'clients': [], 'target': None, 'source_tests': []}
        for k, samples in enumerate(dataset.clients):
            name = f'{prefix}/client{k}'
            self.save_samples(name, samples)
            index['clients'].append(name)
        splits = ([('target', dataset.target)] if dataset.target is not None else []) + \
            [('source_tests', s) for s in dataset.source_tests]
        for kind, split in splits:
            for part in ('query', 'gallery'):
                self.save_samples(f'{prefix}/{split.name}_{part}', getattr(split, part))
            entry = {'name': split.name, 'query': f'{prefix}/{split.name}_query',
                     'gallery': f'{prefix}/{split.name}_gallery'}
            if kind == 'target':
                index['target'] = entry
            else:
                index['source_tests'].append(entry)
        self.write_json(f'{prefix}/dataset.json', index)
        self.logger.info(f"Exported {len(dataset.clients)} clients and {len(splits)} evaluation splits "
                         f"to {self.path(prefix)}")

    def load_federation(self, prefix: str = 'data') -> FederationDataset:
        index = self.read_json(f'{prefix}/dataset.json')

        def split(entry):
            return RetrievalSplit(name=entry['name'], query=self.load_samples(entry['query']),
                                  gallery=self.load_samples(entry['gallery']))

        return FederationDataset(
            clients=[self.load_samples(name) for name in index['clients']],
            target=split(index['target']) if index['target'] else None,
            source_tests=[split(e) for e in index['source_tests']],
        )

    def checksums(self, names: Optional[Sequence[str]] = None) -> Dict[str, str]:
        """sha256 of each written (or named) artifact"""
        names = sorted(set(self.written if names is None else names))
        return {name: sha256_file(self.path(name)) for name in names if os.path.exists(self.path(name))}


def bank_to_dict(bank: StyleBank) -> Dict[str, Any]:
    return {
        'num_channels': bank.num_channels,
        'templates': [
            {'client': t.origin_client, 'group': t.origin_group,
             'mean': [float(v) for v in t.stats.mean], 'var': [float(v) for v in t.stats.var]}
            for t in bank.templates
        ],
    }


def _json_default(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")
