"""Versioned checkpoint persistence.

Every artifact saved by the pipeline goes through `save_checkpoint`, which
wraps the payload with a format tag, a kind string, and caller metadata.
`load_checkpoint` refuses files whose tag or kind does not match, so stages
cannot silently consume each other's outputs.
"""

from pathlib import Path

import torch

from .errors import PersistenceError

CHECKPOINT_FORMAT = "diffinv-ckpt-v1"


def save_checkpoint(path: str | Path, kind: str, payload: dict, meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "meta": dict(meta),
        "payload": payload,
    }
    torch.save(record, path)


def load_checkpoint(path: str | Path, kind: str) -> tuple[dict, dict]:
    """Return (payload, meta) for a checkpoint of the expected kind."""
    path = Path(path)
    if not path.is_file():
        raise PersistenceError(f"checkpoint not found: {path}")
    try:
        record = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise PersistenceError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(record, dict) or record.get("format") != CHECKPOINT_FORMAT:
        raise PersistenceError(f"not a recognized checkpoint file: {path}")
    if record.get("kind") != kind:
        raise PersistenceError(
            f"checkpoint {path} holds {record.get('kind')!r}, expected {kind!r}"
        )
    return record["payload"], record["meta"]


def require_meta(meta: dict, path: str | Path, **expected) -> None:
    """Assert metadata fields match, naming the offending file on failure."""
    for key, want in expected.items():
        got = meta.get(key)
        if got != want:
            raise PersistenceError(
                f"checkpoint {path} has {key}={got!r}, expected {want!r}"
            )
