"""
Raw array persistence with JSON sidecars.

Arrays are written as raw little-endian float64 (``f8``) or complex128
(``c16``, interleaved re/im) in C order. A sidecar ``<stem>.json`` holds
``{"shape": [...], "dtype": "f8" | "c16", "meta": {...}}``. The format is
bit-exact and trivially parseable from any language.
"""
import hashlib
import json
import os
from typing import Any, Dict, Tuple

import numpy as np
from loguru import logger

from utils.errors import ConfigError

_DTYPES = {
    "f8": np.dtype("<f8"),
    "c16": np.dtype("<c16"),
}


def _jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into JSON-friendly values."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, (complex, np.complexfloating)):
        return [float(np.real(value)), float(np.imag(value))]
    return value


def _paths(stem: str, code: str) -> Tuple[str, str]:
    return f"{stem}.{code}", f"{stem}.json"


def save_array(stem: str, array: np.ndarray, meta: Dict[str, Any] = None) -> str:
    """
    Save an array as raw little-endian data plus a JSON sidecar.

    Args:
        stem (str): Output path without extension
        array (np.ndarray): Real or complex array
        meta (dict): Extra metadata stored under ``meta``

    Returns:
        str: Path of the raw data file
    """
    array = np.asarray(array)
    code = "c16" if np.iscomplexobj(array) else "f8"
    data_path, sidecar_path = _paths(stem, code)

    directory = os.path.dirname(data_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    np.ascontiguousarray(array, dtype=_DTYPES[code]).tofile(data_path)
    sidecar = {
        "shape": list(array.shape),
        "dtype": code,
        "meta": _jsonable(meta or {}),
    }
    with open(sidecar_path, "w") as handle:
        json.dump(sidecar, handle, indent=2, sort_keys=True)

    logger.debug(f"Saved {code} array {array.shape} to {data_path}")
    return data_path


def load_array(stem: str) -> Tuple[np.ndarray, Dict[str, Any]]:
    """
    Load an array saved with ``save_array``.

    Returns:
        Tuple[np.ndarray, dict]: The array and its ``meta`` dictionary

    Raises:
        ConfigError: If the sidecar or data file is missing or inconsistent
    """
    sidecar_path = f"{stem}.json"
    if not os.path.exists(sidecar_path):
        raise ConfigError(f"Missing sidecar {sidecar_path}", stage="storage")

    with open(sidecar_path) as handle:
        sidecar = json.load(handle)

    code = sidecar.get("dtype")
    if code not in _DTYPES:
        raise ConfigError(f"Unsupported dtype {code!r} in {sidecar_path}", stage="storage")

    data_path, _ = _paths(stem, code)
    if not os.path.exists(data_path):
        raise ConfigError(f"Missing data file {data_path}", stage="storage")

    shape = tuple(sidecar["shape"])
    flat = np.fromfile(data_path, dtype=_DTYPES[code])
    if flat.size != int(np.prod(shape)):
        raise ConfigError(
            f"{data_path} holds {flat.size} values, sidecar expects shape {shape}",
            stage="storage",
        )
    native = np.complex128 if code == "c16" else np.float64
    return flat.reshape(shape).astype(native), sidecar.get("meta", {})


def grid_hash(*arrays: np.ndarray, extra: str = "") -> str:
    """SHA-256 over the raw bytes of the given grids (cache keys)."""
    digest = hashlib.sha256()
    for array in arrays:
        digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
    digest.update(extra.encode())
    return digest.hexdigest()[:16]
