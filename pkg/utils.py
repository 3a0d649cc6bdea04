"""
Utility functions for driftclass.
Includes seed derivation, config hashing, and JSON persistence helpers.
"""

import hashlib
import json
import logging
import zlib
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)

# Decimal format for every float written to CSV
FLOAT_FORMAT = "%.17g"

SeedLike = Union[int, np.random.SeedSequence]


def _tag_to_int(tag: Union[int, str]) -> int:
    if isinstance(tag, (int, np.integer)):
        if tag < 0:
            raise ValueError(f"Seed tags must be nonnegative, got {tag}")
        return int(tag)
    return zlib.crc32(str(tag).encode("utf-8"))


def derive_seed(seed: SeedLike, *tags: Union[int, str]) -> np.random.SeedSequence:
    """
    Derive an independent seed sequence from a parent seed and purpose tags.

    The result depends only on (seed, tags), so streams derived for one
    purpose never shift when another purpose is added.

    Args:
        seed: Master seed or an already derived seed sequence
        *tags: Integer indices or string purpose tags ("data", "train", ...)

    Returns:
        Seed sequence for the tagged sub-stream
    """
    key = tuple(_tag_to_int(tag) for tag in tags)
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(entropy=seed.entropy, spawn_key=tuple(seed.spawn_key) + key)
    return np.random.SeedSequence(entropy=int(seed), spawn_key=key)


def make_rng(seed: SeedLike, *tags: Union[int, str]) -> np.random.Generator:
    """
    Build a counter-based (Philox) generator for a tagged sub-stream.

    Args:
        seed: Master seed or seed sequence
        *tags: Purpose tags, see derive_seed

    Returns:
        Seeded numpy Generator
    """
    return np.random.Generator(np.random.Philox(derive_seed(seed, *tags)))


def seed_to_json(seed: SeedLike) -> Any:
    """Describe a seed (int or seed sequence) as JSON-friendly data."""
    if isinstance(seed, np.random.SeedSequence):
        return {"entropy": int(seed.entropy), "spawn_key": [int(k) for k in seed.spawn_key]}
    return int(seed)


def seed_from_json(data: Any) -> SeedLike:
    """Inverse of seed_to_json."""
    if isinstance(data, dict):
        return np.random.SeedSequence(entropy=int(data["entropy"]), spawn_key=tuple(data["spawn_key"]))
    return int(data)


def make_json_serializable(obj: Any) -> Any:
    """
    Convert an object to JSON serializable format.

    Args:
        obj: Object to convert

    Returns:
        JSON serializable version of the object
    """
    if isinstance(obj, datetime):
        return obj.isoformat()
    elif isinstance(obj, np.ndarray):
        return make_json_serializable(obj.tolist())
    elif isinstance(obj, np.integer):
        return int(obj)
    elif isinstance(obj, np.floating):
        return float(obj)
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.random.SeedSequence):
        return seed_to_json(obj)
    elif isinstance(obj, Path):
        return str(obj)
    elif isinstance(obj, dict):
        return {str(key): make_json_serializable(value) for key, value in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [make_json_serializable(item) for item in obj]
    elif isinstance(obj, (str, int, float, bool, type(None))):
        return obj
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def hash_config(data: Dict[str, Any]) -> str:
    """
    Hash a configuration dictionary.

    Args:
        data: Configuration as plain data

    Returns:
        First 16 hex digits of the SHA256 of the canonical JSON form
    """
    canonical = json.dumps(make_json_serializable(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def save_json(data: Dict[str, Any], path: Union[str, Path]) -> str:
    """
    Save a dictionary as pretty-printed JSON.

    Args:
        data: Data dictionary to save
        path: Destination file

    Returns:
        Path to saved file
    """
    filepath = Path(path)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(make_json_serializable(data), f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug(f"Data saved to {filepath}")
    return str(filepath)


def load_json(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Load a JSON file.

    Args:
        path: File to load

    Returns:
        Parsed dictionary
    """
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(rows: Iterable[Dict[str, Any]], path: Union[str, Path]) -> str:
    """Write one JSON object per line, keys sorted."""
    filepath = Path(path)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(make_json_serializable(row), sort_keys=True))
            f.write("\n")
    return str(filepath)


def read_jsonl(path: Union[str, Path]) -> List[Dict[str, Any]]:
    """Read a JSON-lines file, skipping blank lines."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def ensure_writable_dir(path: Union[str, Path], create: bool = True) -> Optional[Path]:
    """
    Make sure an output directory exists and accepts files.

    Args:
        path: Directory path
        create: Create the directory when missing

    Returns:
        The directory as a Path

    Raises:
        OSError: If the directory cannot be created or written
    """
    directory = Path(path)
    if create:
        directory.mkdir(parents=True, exist_ok=True)
    marker = directory / ".write_check"
    marker.write_text("")
    marker.unlink()
    return directory
