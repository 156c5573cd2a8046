"""
Checkpoint directories.

``manifest.json`` records the network config, the seed and, per component, the
name, shape and offset of every tensor; ``<component>.f32`` holds the tensors
back to back as little-endian float32.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch
from pydantic import ValidationError

from ..exceptions import CheckpointFormatError, InputFileError, TruncatedFileError
from .pipeline import GuidancePipeline, NetConfig, wire_variant

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
FORMAT_VERSION = 1

PathLike = Union[str, Path]


def save_checkpoint(pipeline: GuidancePipeline, directory: PathLike, seed: Optional[int] = None,
                    extra: Optional[Dict[str, Any]] = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: Dict[str, Any] = {
        "format": FORMAT_VERSION,
        "variant": pipeline.variant,
        "seed": pipeline.config.seed if seed is None else seed,
        "config": pipeline.config.model_dump(mode="json"),
        "components": {},
    }
    if extra:
        manifest["extra"] = extra

    for name, module in pipeline.components().items():
        entries, offset = [], 0
        with (directory / f"{name}.f32").open("wb") as f:
            for key, tensor in module.state_dict().items():
                values = tensor.detach().cpu().float().contiguous().numpy().astype("<f4")
                f.write(values.tobytes())
                entries.append({"name": key, "shape": list(values.shape), "offset": offset})
                offset += values.size
        manifest["components"][name] = entries

    with (directory / MANIFEST).open("w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved checkpoint to {directory}")
    return directory


def _read_manifest(directory: Path) -> Dict[str, Any]:
    path = directory / MANIFEST
    if not path.exists():
        raise InputFileError(path)
    try:
        with path.open(encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"{path} is not valid JSON: {e}")
    except UnicodeDecodeError as e:
        raise CheckpointFormatError(f"{path} is not UTF-8 text: {e.reason}")
    for key in ("format", "config", "components"):
        if key not in manifest:
            raise CheckpointFormatError(f"{path} is missing '{key}'")
    if manifest["format"] != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint format {manifest['format']}")
    return manifest


def load_checkpoint(directory: PathLike) -> GuidancePipeline:
    directory = Path(directory)
    manifest = _read_manifest(directory)
    try:
        config = NetConfig(**manifest["config"])
    except ValidationError as e:
        raise CheckpointFormatError(f"bad network config in checkpoint: {e}")
    pipeline = wire_variant(config)

    components = pipeline.components()
    if set(manifest["components"]) != set(components):
        raise CheckpointFormatError(
            f"checkpoint components {sorted(manifest['components'])} do not match variant {config.variant}"
        )

    for name, entries in manifest["components"].items():
        path = directory / f"{name}.f32"
        if not path.exists():
            raise InputFileError(path)
        raw = path.read_bytes()
        payload = np.frombuffer(raw, dtype="<f4", count=len(raw) // 4)
        expected = components[name].state_dict()
        if [e["name"] for e in entries] != list(expected):
            raise CheckpointFormatError(f"tensor names in {path} do not match the {name} component")

        state = {}
        for entry in entries:
            shape = tuple(entry["shape"])
            if shape != tuple(expected[entry["name"]].shape):
                raise CheckpointFormatError(f"{name}.{entry['name']}: shape {shape} != {tuple(expected[entry['name']].shape)}")
            count = int(np.prod(shape, dtype=np.int64))
            end = entry["offset"] + count
            if end > payload.size:
                raise TruncatedFileError(path, 4 * end, len(raw))
            values = payload[entry["offset"]:end].reshape(shape)
            state[entry["name"]] = torch.from_numpy(values.astype(np.float32))
        components[name].load_state_dict(state)

    logger.info(f"Loaded {config.variant} checkpoint from {directory}")
    return pipeline
