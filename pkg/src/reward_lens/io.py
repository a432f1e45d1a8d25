"""File formats and report plumbing: pair files, JSON/CSV reports, schemas, thread pool."""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import jsonschema
import numpy as np

from .engine import PreferencePair
from .errors import DataFormatError
from .tensorfile import atomic_write_bytes

_ALIASES = {"preferred": ("preferred", "chosen"), "dispreferred": ("dispreferred", "rejected")}


def parse_pair_record(rec: Any, where: str = "<pairs>") -> PreferencePair:
    if not isinstance(rec, dict):
        raise DataFormatError(f"{where}: expected a JSON object")
    values = {}
    for field, keys in _ALIASES.items():
        found = [k for k in keys if k in rec]
        if not found:
            raise DataFormatError(f"{where}: missing {' or '.join(repr(k) for k in keys)}")
        if len(found) > 1:
            raise DataFormatError(f"{where}: both {found[0]!r} and {found[1]!r} given")
        values[field] = rec[found[0]]
    if "prompt" not in rec:
        raise DataFormatError(f"{where}: missing 'prompt'")
    fields = {"prompt": rec["prompt"], **values}
    for k, v in fields.items():
        if not isinstance(v, str):
            raise DataFormatError(f"{where}: {k!r} must be a string")
    dim = rec.get("dimension")
    if dim is not None and not isinstance(dim, str):
        raise DataFormatError(f"{where}: 'dimension' must be a string")
    try:
        return PreferencePair(fields["prompt"], fields["preferred"], fields["dispreferred"], dim)
    except ValueError as exc:
        raise DataFormatError(f"{where}: {exc}") from None


def read_pairs(path) -> list[PreferencePair]:
    """Preference pairs from JSONL (``chosen``/``rejected`` accepted as aliases)."""
    path = Path(path)
    try:
        text = path.read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DataFormatError(f"{path}: not UTF-8 ({exc.reason})") from None
    pairs = []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
        pairs.append(parse_pair_record(rec, f"{path}:{n}"))
    if not pairs:
        raise DataFormatError(f"{path}: no pairs")
    return pairs


def write_pairs(path, pairs: Iterable[PreferencePair]) -> None:
    lines = []
    for p in pairs:
        rec = {"prompt": p.prompt, "preferred": p.preferred, "dispreferred": p.dispreferred}
        if p.dimension is not None:
            rec["dimension"] = p.dimension
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def jsonable(obj: Any) -> Any:
    """Plain-JSON copy: numpy to Python, +/-inf to "inf"/"-inf", nan to null."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(obj: Any) -> bytes:
    return (json.dumps(jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def write_json(path, obj: Any) -> None:
    atomic_write_bytes(path, dumps(obj))


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in jsonable(list(row))])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def load_schema(name: str) -> dict:
    text = resources.files("reward_lens").joinpath("schemas", f"{name}.schema.json").read_text("utf-8")
    return json.loads(text)


def validate_report(doc: dict, name: str) -> None:
    """Raise DataFormatError when ``doc`` does not match the shipped schema ``name``."""
    try:
        jsonschema.validate(doc, load_schema(name))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise DataFormatError(f"report does not match schema {name!r} at {path or '<root>'}: {exc.message}") from None


def thread_count() -> int:
    raw = os.environ.get("REWARD_LENS_THREADS")
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise DataFormatError(f"REWARD_LENS_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def parallel_map(fn: Callable, items: Sequence) -> list:
    """``[fn(x) for x in items]`` on up to REWARD_LENS_THREADS threads; order preserved."""
    items = list(items)
    n = min(thread_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
