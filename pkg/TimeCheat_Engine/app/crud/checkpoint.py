import io
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from app import logger
from app.errors import CheckpointError

_META_KEY = "__meta__"


class CheckpointFormatError(CheckpointError):
    """Raised when a checkpoint file is readable but not in the expected layout."""


@dataclass
class Checkpoint:
    """Parameter values by name plus the run snapshot needed to rebuild the model."""

    params: Dict[str, np.ndarray]
    config: Dict
    epoch: int = 0
    history: List[Dict] = field(default_factory=list)
    stats: Optional[Dict] = None
    dataset: Dict = field(default_factory=dict)

    def meta(self) -> Dict:
        return {
            "config": self.config,
            "epoch": self.epoch,
            "history": self.history,
            "stats": self.stats,
            "dataset": self.dataset,
        }


def save_checkpoint(checkpoint: Checkpoint, path: str) -> str:
    arrays = {name: np.asarray(value) for name, value in checkpoint.params.items()}
    if _META_KEY in arrays:
        raise CheckpointFormatError(f"parameter name {_META_KEY!r} is reserved")
    encoded = json.dumps(checkpoint.meta(), sort_keys=True).encode("utf-8")
    arrays[_META_KEY] = np.frombuffer(encoded, dtype=np.uint8)

    buffer = io.BytesIO()
    np.savez(buffer, **arrays)
    tmp_path = f"{path}.tmp"
    try:
        directory = os.path.dirname(os.path.abspath(path))
        os.makedirs(directory, exist_ok=True)
        with open(tmp_path, "wb") as handle:
            handle.write(buffer.getvalue())
        os.replace(tmp_path, path)
    except OSError as exc:
        logger.exception("Failed to write checkpoint %s: %s", path, exc)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint {path} does not exist") from exc
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc

    raw_meta = arrays.pop(_META_KEY, None)
    if raw_meta is None:
        raise CheckpointFormatError(f"checkpoint {path} has no metadata record")
    try:
        meta = json.loads(raw_meta.tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"checkpoint {path} has corrupt metadata") from exc
    return Checkpoint(
        params=arrays,
        config=meta.get("config", {}),
        epoch=int(meta.get("epoch", 0)),
        history=list(meta.get("history", [])),
        stats=meta.get("stats"),
        dataset=dict(meta.get("dataset", {})),
    )
