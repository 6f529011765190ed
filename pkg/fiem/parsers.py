import json
import re
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from fiem.core.algorithms import ALGORITHMS
from fiem.errors import ArgumentError, ConfigurationError
from fiem.models.gmm import GmmDataset
from fiem.utils.path_utils import resolve_input_path
from fiem.utils.validators import validate_probability_vector

SYNTHETIC_FIELDS = ("seed", "n", "g", "p", "separation")


def _resolve(path: str) -> str:
    resolved = resolve_input_path(path)
    if resolved is None:
        raise ConfigurationError(f"File not found: {path}")
    return resolved


def parse_synthetic_spec(text: str) -> Dict[str, Any]:
    """Parse a "seed,n,g,p,sep" string into a synthetic-data spec."""
    parts = [part.strip() for part in text.split(",")]
    if len(parts) != len(SYNTHETIC_FIELDS):
        raise ArgumentError(f"expected seed,n,g,p,sep, got {text!r}")
    try:
        seed, n, g, p = (int(x) for x in parts[:4])
        separation = float(parts[4])
    except ValueError:
        raise ArgumentError(f"malformed synthetic spec {text!r}")
    if n < 1 or g < 1 or p < 1 or separation < 0:
        raise ArgumentError(f"synthetic spec needs n, g, p >= 1 and sep >= 0, got {text!r}")
    return dict(zip(SYNTHETIC_FIELDS, (seed, n, g, p, separation)))


def parse_algorithms(text: str, allow_hybrid: bool = True) -> List[str]:
    """Split a comma-separated algorithm list, keeping order."""
    names = [name for name in re.split(r"[,\s]+", text.strip().lower()) if name]
    known = ALGORITHMS + (("h-fiem",) if allow_hybrid else ())
    for name in names:
        if name not in known:
            raise ArgumentError(f"unknown algorithm '{name}', expected one of {known}")
    if not names:
        raise ArgumentError("empty algorithm list")
    return names


def load_json(path: str) -> Dict[str, Any]:
    with open(_resolve(path), "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path} is not valid JSON: {e}")
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")
    return doc


def load_plan_file(path: str) -> Dict[str, Any]:
    """Plan reference from a JSON file written by `fiem plan --out`."""
    doc = load_json(path)
    if "gamma" not in doc:
        raise ConfigurationError(f"{path} has no 'gamma' entry")
    if doc.get("feasible") is False:
        raise ConfigurationError(
            f"{path} holds an infeasible plan ({doc.get('violated_condition', 'unknown')})"
        )
    plan = {"gamma": doc["gamma"]}
    if "weights" in doc:
        plan["weights"] = doc["weights"]
    return plan


def load_weights(path: str) -> np.ndarray:
    """Termination weights from a one-column CSV (header optional) or JSON list."""
    resolved = _resolve(path)
    if resolved.endswith(".json"):
        with open(resolved, "r", encoding="utf-8") as f:
            weights = np.asarray(json.load(f), dtype=float)
    else:
        frame = pd.read_csv(resolved, header=None, comment="#")
        if frame.shape[1] != 1:
            raise ConfigurationError(f"{path} must have a single column, found {frame.shape[1]}")
        column = pd.to_numeric(frame.iloc[:, 0], errors="coerce")
        if np.isnan(column.iloc[0]):
            column = column.iloc[1:]
        weights = column.to_numpy(dtype=float)
    is_valid, reason = validate_probability_vector(weights)
    if not is_valid:
        raise ConfigurationError(f"{path}: {reason}")
    return weights


def load_dataset(path: str) -> GmmDataset:
    """Numeric CSV, one observation per row."""
    return GmmDataset.from_csv(_resolve(path))


def dump_json(doc: Dict[str, Any], path: str) -> None:
    """Deterministic JSON (sorted keys, fixed indent)."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True, allow_nan=True)
        f.write("\n")
