"""
Binary checkpoint container shared by score networks, sampler parameters and
precomputed feature tables.

Layout: 8-byte little-endian header length, a UTF-8 JSON header
{format_version, manifest, metadata}, then the raw little-endian array
payloads in manifest order. Offsets in the manifest are relative to the
first payload byte.
"""
from __future__ import annotations
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Tuple

import numpy as np

from utils.diffusion import NoiseSchedule, ScoreNetwork
from utils.errors import FormatError, StructuralError
from utils.ggdm import GGDMParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
DTYPES = {'<f8': np.float64, '<i8': np.int64}
_LEN = struct.Struct('<Q')


@dataclass
class Checkpoint:
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


def _dtype_tag(arr: np.ndarray) -> str:
    if np.issubdtype(arr.dtype, np.integer) or arr.dtype == np.bool_:
        return '<i8'
    if np.issubdtype(arr.dtype, np.floating):
        return '<f8'
    raise FormatError(f"unsupported array dtype {arr.dtype}")


def encode(ckpt: Checkpoint) -> bytes:
    manifest: Dict[str, Dict[str, Any]] = {}
    payloads = []
    offset = 0
    for name, value in ckpt.arrays.items():
        arr = np.asarray(value)
        tag = _dtype_tag(arr)
        raw = np.ascontiguousarray(arr, dtype=tag).tobytes()
        manifest[name] = {'shape': list(arr.shape), 'dtype': tag, 'offset': offset, 'length': len(raw)}
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({'format_version': FORMAT_VERSION, 'manifest': manifest, 'metadata': ckpt.metadata},
                        separators=(',', ':'), ensure_ascii=False, allow_nan=False).encode('utf-8')
    return _LEN.pack(len(header)) + header + b''.join(payloads)


def decode(blob: bytes, source: str = '<bytes>') -> Checkpoint:
    if len(blob) < _LEN.size:
        raise FormatError(f"{source}: truncated checkpoint (no header length)")
    (hlen,) = _LEN.unpack_from(blob)
    start = _LEN.size + hlen
    if start > len(blob):
        raise FormatError(f"{source}: header length {hlen} runs past end of file")
    try:
        header = json.loads(blob[_LEN.size:start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{source}: unreadable checkpoint header: {e}") from None
    if not isinstance(header, dict) or header.get('format_version') != FORMAT_VERSION:
        raise FormatError(f"{source}: unsupported format_version {header.get('format_version') if isinstance(header, dict) else None!r}")
    manifest = header.get('manifest')
    if not isinstance(manifest, dict):
        raise FormatError(f"{source}: checkpoint header has no manifest")
    payload = memoryview(blob)[start:]
    arrays: Dict[str, np.ndarray] = {}
    spans = []
    for name, entry in manifest.items():
        try:
            shape = tuple(int(s) for s in entry['shape'])
            dtype = DTYPES[entry['dtype']]
            offset, length = int(entry['offset']), int(entry['length'])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"{source}: malformed manifest entry for '{name}'") from None
        count = int(np.prod(shape)) if shape else 1
        if length != count * 8 or offset < 0 or offset + length > len(payload):
            raise FormatError(f"{source}: array '{name}' is out of bounds or has the wrong byte length")
        spans.append((offset, offset + length, name))
        arrays[name] = np.frombuffer(payload[offset:offset + length], dtype=entry['dtype']).astype(dtype).reshape(shape)
    spans.sort()
    for (_, end, a), (begin, _, b) in zip(spans, spans[1:]):
        if begin < end:
            raise FormatError(f"{source}: arrays '{a}' and '{b}' overlap")
    return Checkpoint(arrays=arrays, metadata=header.get('metadata') or {})


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode(ckpt))
    logger.debug("wrote checkpoint %s (%d arrays)", path, len(ckpt.arrays))


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, 'rb') as f:
            blob = f.read()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from None
    return decode(blob, path)


def _require(ckpt: Checkpoint, kind: str, path: str) -> None:
    if ckpt.metadata.get('kind') != kind:
        raise FormatError(f"{path}: expected a {kind} checkpoint, found {ckpt.metadata.get('kind')!r}")


# score networks

def save_model(path: str, network: ScoreNetwork, ema: ScoreNetwork, schedule: NoiseSchedule, *,
               seed: int, final_loss: float) -> None:
    arrays: Dict[str, np.ndarray] = {}
    for name in sorted(network.params):
        arrays[f'weights/{name}'] = network.params[name]
    for name in sorted(ema.params):
        arrays[f'ema/{name}'] = ema.params[name]
    arrays['schedule/beta'] = schedule.beta
    arrays['schedule/alpha_bar'] = schedule.alpha_bar
    metadata = {
        'kind': 'score_network',
        'd': network.d, 'T': schedule.T, 'hidden': network.hidden, 'depth': network.depth,
        'time_dim': network.time_dim, 'schedule_kind': schedule.kind,
        'schedule_fingerprint': schedule.fingerprint(), 'seed': int(seed),
        'final_loss': float(final_loss) if np.isfinite(final_loss) else None,
    }
    save_checkpoint(path, Checkpoint(arrays=arrays, metadata=metadata))


def load_model(path: str) -> Tuple[ScoreNetwork, ScoreNetwork, NoiseSchedule]:
    """Returns (raw weights, EMA weights, schedule)."""
    ckpt = load_checkpoint(path)
    _require(ckpt, 'score_network', path)
    m = ckpt.metadata
    try:
        schedule = NoiseSchedule(T=int(m['T']), beta=ckpt.arrays['schedule/beta'],
                                 alpha_bar=ckpt.arrays['schedule/alpha_bar'], kind=m['schedule_kind'])
        shape = dict(d=int(m['d']), T=int(m['T']), hidden=int(m['hidden']), depth=int(m['depth']),
                     time_dim=int(m['time_dim']))
    except KeyError as e:
        raise FormatError(f"{path}: model checkpoint lacks {e}") from None
    if schedule.fingerprint() != m.get('schedule_fingerprint'):
        raise FormatError(f"{path}: stored schedule does not match its recorded fingerprint")

    def section(prefix: str) -> Dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in ckpt.arrays.items() if k.startswith(prefix)}

    return ScoreNetwork(params=section('weights/'), **shape), ScoreNetwork(params=section('ema/'), **shape), schedule


# sampler parameters

def save_sampler(path: str, params: GGDMParams, *, seed: int, extra: Dict[str, Any] | None = None) -> None:
    arrays: Dict[str, np.ndarray] = {name: params.variables[name] for name in sorted(params.variables)}
    arrays['timesteps'] = params.timesteps
    arrays['mu_mask'] = params.mu_mask.astype(np.int64)
    metadata = {
        'kind': 'sampler', 'family': params.family, 'time': bool(params.time), 'K': int(params.K),
        'stride': params.stride_kind, 'schedule_fingerprint': params.schedule_fingerprint, 'seed': int(seed),
        **(extra or {}),
    }
    save_checkpoint(path, Checkpoint(arrays=arrays, metadata=metadata))


def load_sampler(path: str) -> GGDMParams:
    ckpt = load_checkpoint(path)
    _require(ckpt, 'sampler', path)
    m = ckpt.metadata
    arrays = dict(ckpt.arrays)
    try:
        timesteps = arrays.pop('timesteps')
        mask = arrays.pop('mu_mask').astype(bool)
        return GGDMParams(K=int(m['K']), family=m['family'], time=bool(m['time']), timesteps=timesteps,
                          variables=arrays, mu_mask=mask, schedule_fingerprint=m['schedule_fingerprint'],
                          stride_kind=m.get('stride', 'linear'))
    except KeyError as e:
        raise FormatError(f"{path}: sampler checkpoint lacks {e}") from None
    except StructuralError as e:
        raise FormatError(f"{path}: {e}") from None


def save_features(path: str, features: np.ndarray) -> None:
    save_checkpoint(path, Checkpoint(arrays={'features': np.asarray(features, dtype=np.float64)},
                                     metadata={'kind': 'features'}))
