#!/usr/bin/env python3
"""
Serialization helpers

Fitted step state travels as base64-encoded joblib blobs inside JSON
documents; JSON and JSONL files are written with a fixed key order and
layout so repeated runs produce identical bytes.
"""

import base64
import io
import json
import os
from typing import Any, Dict, Iterable, List

import joblib
import numpy as np


def encode_state(obj: Any) -> str:
    buffer = io.BytesIO()
    joblib.dump(obj, buffer, compress=3)
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_state(blob: str) -> Any:
    return joblib.load(io.BytesIO(base64.b64decode(blob.encode("ascii"))))


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars and arrays to plain Python values"""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def write_json(path: str, document: Dict) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(document), f, indent=2)
        f.write("\n")


def read_json(path: str) -> Dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: str, rows: Iterable[Dict]) -> int:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(to_jsonable(row)))
            f.write("\n")
            count += 1
    return count


def read_jsonl(path: str) -> List[Dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rows.append(json.loads(line))
    return rows
