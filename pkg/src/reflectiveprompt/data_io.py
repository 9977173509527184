"""Dataset ingestion, deterministic subsampling, and checkpoint persistence.

Datasets are JSONL: one object per line with non-empty "input" and
"target" strings and an optional unique "id". Checkpoints are a single
JSON document carrying a schema version and an integrity digest of the
canonicalized state body.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random

from .errors import CheckpointIntegrityError, CheckpointVersionError, ValidationError
from .evaluation import EvalSample

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1


def load_dataset(path: str) -> list[EvalSample]:
    """Parse a JSONL dataset, preserving file order and line numbers."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path} is not valid UTF-8: {exc}") from exc

    samples: list[EvalSample] = []
    seen_ids: set = set()
    for number, line in enumerate(text.splitlines(), start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: line {number} is not valid JSON: {exc}") from exc
        if not isinstance(record, dict):
            raise ValidationError(f"{path}: line {number} must be a JSON object")
        for key in ("input", "target"):
            if key not in record:
                raise ValidationError(f"{path}: line {number} missing field {key!r}")
            if not isinstance(record[key], str) or not record[key].strip():
                raise ValidationError(
                    f"{path}: line {number} field {key!r} must be a non-empty string"
                )
        if "id" in record:
            if record["id"] in seen_ids:
                raise ValidationError(f"{path}: line {number} duplicates id {record['id']!r}")
            seen_ids.add(record["id"])
        samples.append(EvalSample(input=record["input"], target=record["target"], line=number))
    if not samples:
        raise ValidationError(f"{path} contains no samples")
    return samples


def subsample(samples: list[EvalSample], size: int, seed: int) -> list[EvalSample]:
    """Uniform sample without replacement, reproducible from the seed alone."""
    if size < 1:
        raise ValidationError("subsample size must be >= 1")
    if size > len(samples):
        logger.warning(
            "subsample size %d exceeds dataset size %d; clamping", size, len(samples)
        )
        size = len(samples)
    return random.Random(seed).sample(samples, size)


def _canonical(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def save_checkpoint(state, path: str) -> None:
    """Persist a RunState-like object (anything exposing ``to_doc()``)."""
    body = state.to_doc() if hasattr(state, "to_doc") else state
    digest = hashlib.sha256(_canonical(body).encode("utf-8")).hexdigest()
    document = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "state": body,
        "digest": digest,
    }
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", encoding="utf-8") as fh:
        json.dump(document, fh, sort_keys=True, ensure_ascii=False)
        fh.write("\n")
    os.replace(tmp_path, path)


def load_checkpoint(path: str):
    """Load, verify, and reconstruct a checkpointed RunState."""
    doc = load_checkpoint_doc(path)
    from .engine import RunState  # avoid import cycle: engine imports data_io

    return RunState.from_doc(doc)


def load_checkpoint_doc(path: str) -> dict:
    """Checkpoint state body as a dict, after version and digest checks."""
    try:
        with open(path, encoding="utf-8") as fh:
            document = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path} is corrupt or truncated: {exc}") from exc
    if not isinstance(document, dict) or "schema_version" not in document:
        raise CheckpointIntegrityError(f"{path} is not a checkpoint document")
    version = document["schema_version"]
    if version != CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointVersionError(
            f"{path} has schema_version {version!r}; this build reads "
            f"{CHECKPOINT_SCHEMA_VERSION}"
        )
    if "state" not in document or "digest" not in document:
        raise CheckpointIntegrityError(f"{path} is missing state or digest")
    digest = hashlib.sha256(_canonical(document["state"]).encode("utf-8")).hexdigest()
    if digest != document["digest"]:
        raise CheckpointIntegrityError(f"{path} failed its integrity digest check")
    return document["state"]
