"""
Model checkpoint container.

Layout (all integers little-endian):

    offset 0   8 bytes   magic b"UTRNCKPT"
    offset 8   uint32    format version (1)
    offset 12  uint32    header length H in bytes
    offset 16  H bytes   UTF-8 JSON header, keys sorted, no whitespace
    then       float64   every block in header["blocks"] order, row-major

The header carries kind, dims, L, nonlinearity, hyperparameters, free-form
metadata and the block table (name + shape per block).
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .exceptions import CheckpointError, ParameterError
from .models import DustLayerParams, ModelParams, Nonlinearity, init_model

logger = logging.getLogger(__name__)

MAGIC = b"UTRNCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def build_header(params: ModelParams, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    hyper: Dict[str, Any] = {
        "orientation": params.orientation,
        "eta": params.eta,
        "shared_dictionary": params.shared_dictionary,
    }
    if params.kind == "dust":
        first: DustLayerParams = params.layers[0]
        hyper.update(lambda1=first.lambda1, lambda2=first.lambda2, c=first.c)
    return {
        "kind": params.kind,
        "dims": {
            "n": params.n,
            "d": params.d,
            "num_classes": params.readout.num_classes if params.readout is not None else None,
        },
        "num_layers": params.num_layers,
        "nonlinearity": params.nonlinearity.describe(),
        "hyperparameters": hyper,
        "metadata": dict(metadata or {}),
        "blocks": [{"name": name, "shape": list(tensor.shape)} for name, tensor in params.named_blocks().items()],
    }


def encode_checkpoint(params: ModelParams, metadata: Optional[Dict[str, Any]] = None) -> bytes:
    header = json.dumps(build_header(params, metadata), sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(tensor.data, dtype="<f8").tobytes() for tensor in params.named_blocks().values()
    )
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)) + header + payload


def save_checkpoint(path: Union[str, Path], params: ModelParams, metadata: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, metadata))
    logger.info(f"Saved {params.kind} checkpoint ({params.num_layers} layers) to {path}")
    return path


def decode_checkpoint(blob: bytes) -> Tuple[ModelParams, Dict[str, Any]]:
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    end = _PREFIX.size + header_len
    if len(blob) < end:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[_PREFIX.size:end].decode("utf-8"))
        dims = header["dims"]
        hyper = header["hyperparameters"]
        params = init_model(
            header["kind"],
            int(dims["n"]),
            int(dims["d"]),
            int(header["num_layers"]),
            nonlinearity=Nonlinearity.parse(header["nonlinearity"]),
            num_classes=dims.get("num_classes"),
            orientation=hyper.get("orientation", "source"),
            eta=float(hyper.get("eta", 1.0)),
            shared_dictionary=bool(hyper.get("shared_dictionary", False)),
            lambda1=float(hyper.get("lambda1", 0.9)),
            lambda2=float(hyper.get("lambda2", 0.25)),
            c=float(hyper.get("c", 1.0)),
        )
        table = header["blocks"]
    except (KeyError, TypeError, ValueError, ParameterError) as e:
        raise CheckpointError(f"invalid checkpoint header: {e}") from e

    blocks = params.named_blocks()
    declared = [(entry["name"], tuple(entry["shape"])) for entry in table]
    expected = [(name, tensor.shape) for name, tensor in blocks.items()]
    if declared != expected:
        raise CheckpointError(f"block table does not match a {header['kind']} model: {declared}")

    offset = end
    for name, shape in declared:
        count = int(np.prod(shape))
        stop = offset + 8 * count
        if stop > len(blob):
            raise CheckpointError(f"truncated data for block '{name}'")
        blocks[name].data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = stop
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after the last block")
    return params, header["metadata"]


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelParams, Dict[str, Any]]:
    """Read a checkpoint; returns the model and its metadata"""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    params, metadata = decode_checkpoint(blob)
    logger.debug(f"Loaded {params.kind} checkpoint from {path}")
    return params, metadata
