"""Text persistence: trial CSVs, hardware ingestion, model and config files.

Everything is plain text.  JSON documents are written with sorted keys and
Python's shortest round-trip float repr, so identical objects give
byte-identical files and every float survives a round trip exactly.
"""

from __future__ import annotations

import csv
import io
import json
import os
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

import numpy as np

from .chsh import Dataset, MeasurementRecord, as_dataset
from .config import CONFIG_KINDS, from_dict, to_dict
from .conformal import CalibrationSet, LhvConditionalModel
from .datagen import ConfigError
from .tara_k import EnvelopeModel

HEADER = ("trial", "x", "z", "a", "b")
CALIBRATION_SCHEMA = "tara.calibration"
ENVELOPE_SCHEMA = "tara.envelope"
SCHEMA_VERSION = 1


class DatasetParseError(ValueError):
    def __init__(self, message: str, line: int, column: int | None = None):
        where = f"line {line}" if column is None else f"line {line}, column {column}"
        super().__init__(f"{message}, {where}")
        self.line = line
        self.column = column


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_dataset(path: str | os.PathLike, records: Dataset | Iterable[MeasurementRecord],
                  metadata: dict[str, Any] | None = None) -> None:
    """Write trials as ``trial,x,z,a,b`` with ``# key: json`` metadata lines."""
    ds = as_dataset(records)
    meta = dict(ds.metadata)
    if ds.label is not None:
        meta.setdefault("label", ds.label)
    meta.update(metadata or {})
    buf = io.StringIO()
    buf.write(f"# tara-dataset v{SCHEMA_VERSION}\n")
    for key in sorted(meta):
        buf.write(f"# {key}: {json.dumps(meta[key], sort_keys=True)}\n")
    buf.write(",".join(HEADER) + "\n")
    cols = np.column_stack([ds.trial, ds.x, ds.z, ds.a, ds.b])
    buf.writelines(f"{t},{x},{z},{a},{b}\n" for t, x, z, a, b in cols.tolist())
    Path(path).write_text(buf.getvalue())


def _parse_meta(line: str) -> tuple[str, Any] | None:
    body = line[1:].strip()
    if ":" not in body:
        return None
    key, _, raw = body.partition(":")
    raw = raw.strip()
    try:
        return key.strip(), json.loads(raw)
    except json.JSONDecodeError:
        return key.strip(), raw


def iter_records(lines: Iterable[str], meta: dict[str, Any] | None = None) -> Iterator[MeasurementRecord]:
    """Parse trial CSV lines lazily, one record at a time.

    Metadata comment lines are collected into ``meta`` when given.  Errors
    carry the 1-based line number of the offending row.
    """
    header_seen = False
    prev_trial = None
    lineno = 0
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            kv = _parse_meta(stripped)
            if kv is not None and meta is not None:
                meta[kv[0]] = kv[1]
            continue
        fields = [f.strip() for f in stripped.split(",")]
        if not header_seen:
            if tuple(fields) != HEADER:
                raise DatasetParseError(f"expected header {','.join(HEADER)}", lineno)
            header_seen = True
            continue
        if len(fields) != 5:
            raise DatasetParseError(f"expected 5 fields, got {len(fields)}", lineno)
        values = []
        for col, (name, raw) in enumerate(zip(HEADER, fields), start=1):
            try:
                values.append(int(raw))
            except ValueError:
                raise DatasetParseError(f"{name} is not an integer: {raw!r}", lineno, col) from None
        t, x, z, a, b = values
        if t < 0:
            raise DatasetParseError("trial index must be non-negative", lineno, 1)
        if x not in (0, 1):
            raise DatasetParseError("x out of range", lineno)
        if z not in (0, 1):
            raise DatasetParseError("z out of range", lineno)
        if a not in (-1, 0, 1):
            raise DatasetParseError("a out of range", lineno)
        if b not in (-1, 0, 1):
            raise DatasetParseError("b out of range", lineno)
        if prev_trial is not None and t <= prev_trial:
            raise DatasetParseError("trial indices must be strictly increasing", lineno, 1)
        prev_trial = t
        yield MeasurementRecord(t, x, z, a, b)
    if not header_seen:
        raise DatasetParseError("missing header", max(lineno, 1))


def parse_dataset(lines: Iterable[str]) -> Dataset:
    meta: dict[str, Any] = {}
    rows = [(r.trial_index, r.x, r.z, r.a, r.b) for r in iter_records(lines, meta)]
    arr = np.array(rows, dtype=np.int64).reshape(-1, 5)
    label = meta.get("label")
    return Dataset(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4],
                   label=label if isinstance(label, str) else None, metadata=meta)


def read_dataset(path: str | os.PathLike) -> Dataset:
    """Parse a trial CSV, reporting the first malformed row with its line number."""
    with open(path, newline="") as fh:
        return parse_dataset(fh)


DEFAULT_MAPPING = {
    "columns": {"x": "x", "z": "z", "a": "a", "b": "b"},
    "values": {},
}


def read_hardware_csv(path: str | os.PathLike, mapping: dict[str, Any] | str | os.PathLike | None = None) -> Dataset:
    """Ingest an external CSV through a column-mapping sidecar.

    The mapping names the source columns for ``x``, ``z``, ``a``, ``b`` and
    optionally ``trial`` and ``count`` (one row standing for ``count`` shots).
    ``values`` maps raw cell strings to encoded values per target column,
    e.g. ``{"a": {"0": 1, "1": -1}}`` for bit-valued outcomes.
    """
    if mapping is None:
        mapping = DEFAULT_MAPPING
    elif not isinstance(mapping, dict):
        mapping = json.loads(Path(mapping).read_text())
    unknown = set(mapping) - {"columns", "values"}
    if unknown:
        raise ConfigError(f"mapping: unknown key {sorted(unknown)[0]!r}")
    columns = dict(DEFAULT_MAPPING["columns"], **mapping.get("columns", {}))
    bad = set(columns) - {"x", "z", "a", "b", "trial", "count"}
    if bad:
        raise ConfigError(f"mapping: unknown target column {sorted(bad)[0]!r}")
    value_maps = {k: {str(raw): int(v) for raw, v in m.items()} for k, m in mapping.get("values", {}).items()}

    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(row for row in fh if not row.lstrip().startswith("#"))
        fieldnames = reader.fieldnames or []
        for target, source in columns.items():
            if source not in fieldnames:
                raise DatasetParseError(f"missing column {source!r} for {target}", 1)
        for lineno, raw in enumerate(reader, start=2):
            decoded = {}
            for target in ("x", "z", "a", "b"):
                cell = raw[columns[target]].strip()
                vmap = value_maps.get(target)
                try:
                    decoded[target] = vmap[cell] if vmap is not None else int(float(cell))
                except (KeyError, ValueError):
                    raise DatasetParseError(f"cannot decode {target} value {cell!r}", lineno) from None
            count = int(raw[columns["count"]]) if "count" in columns else 1
            if count < 0:
                raise DatasetParseError("negative count", lineno)
            for key, ok in (("x", (0, 1)), ("z", (0, 1)), ("a", (-1, 0, 1)), ("b", (-1, 0, 1))):
                if decoded[key] not in ok:
                    raise DatasetParseError(f"{key} out of range", lineno)
            rows.extend([(decoded["x"], decoded["z"], decoded["a"], decoded["b"])] * count)
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return Dataset(np.arange(len(arr)), arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3],
                   metadata={"source": str(path)})


def load_any_dataset(path: str | os.PathLike, mapping: str | os.PathLike | None = None) -> Dataset:
    """Native trial CSV unless a mapping sidecar is given."""
    if mapping is not None:
        return read_hardware_csv(path, mapping)
    return read_dataset(path)


# -- calibration ----------------------------------------------------------

def calibration_to_dict(model: LhvConditionalModel, cal: CalibrationSet,
                        reference_pvalues: np.ndarray | None = None,
                        extra: dict[str, Any] | None = None) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "schema": CALIBRATION_SCHEMA,
        "version": SCHEMA_VERSION,
        "pseudo_count": model.pseudo_count,
        "tables": model.tables.tolist(),
        "scores": [s.tolist() for s in cal.scores],
        "reference_pvalues": [] if reference_pvalues is None else np.asarray(reference_pvalues).tolist(),
    }
    if extra:
        doc["info"] = extra
    return doc


def calibration_from_dict(doc: dict[str, Any]) -> tuple[LhvConditionalModel, CalibrationSet, np.ndarray]:
    _check_schema(doc, CALIBRATION_SCHEMA)
    model = LhvConditionalModel(np.array(doc["tables"], dtype=float), float(doc["pseudo_count"]))
    cal = CalibrationSet(tuple(np.array(s, dtype=float) for s in doc["scores"]))
    return model, cal, np.array(doc.get("reference_pvalues", []), dtype=float)


def write_calibration(path, model, cal, reference_pvalues=None, extra=None) -> None:
    Path(path).write_text(_dump(calibration_to_dict(model, cal, reference_pvalues, extra)))


def read_calibration(path) -> tuple[LhvConditionalModel, CalibrationSet, np.ndarray]:
    return calibration_from_dict(json.loads(Path(path).read_text()))


# -- envelope -------------------------------------------------------------

def envelope_to_dict(env: EnvelopeModel) -> dict[str, Any]:
    return {
        "schema": ENVELOPE_SCHEMA,
        "version": SCHEMA_VERSION,
        "feature_names": list(env.feature_names),
        "location": env.location.tolist(),
        "scale": env.scale.tolist(),
        "center": env.center.tolist(),
        "precision": env.precision.tolist(),
        "threshold": env.threshold,
        "ridge": env.ridge,
        "target_fpr": env.target_fpr,
        "n_samples": env.n_samples,
        "calibration_distances": env.calibration_distances.tolist(),
    }


def envelope_from_dict(doc: dict[str, Any]) -> EnvelopeModel:
    _check_schema(doc, ENVELOPE_SCHEMA)
    return EnvelopeModel(
        feature_names=tuple(doc["feature_names"]),
        location=np.array(doc["location"], dtype=float),
        scale=np.array(doc["scale"], dtype=float),
        center=np.array(doc["center"], dtype=float),
        precision=np.array(doc["precision"], dtype=float),
        threshold=float(doc["threshold"]),
        ridge=float(doc["ridge"]),
        target_fpr=float(doc["target_fpr"]),
        n_samples=int(doc["n_samples"]),
        calibration_distances=np.array(doc.get("calibration_distances", []), dtype=float),
    )


def write_envelope(path, env: EnvelopeModel) -> None:
    Path(path).write_text(_dump(envelope_to_dict(env)))


def read_envelope(path) -> EnvelopeModel:
    return envelope_from_dict(json.loads(Path(path).read_text()))


def _check_schema(doc: dict[str, Any], schema: str) -> None:
    if doc.get("schema") != schema:
        raise ConfigError(f"not a {schema} document (schema={doc.get('schema')!r})")
    if doc.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"unsupported {schema} version {doc.get('version')!r}")


# -- configs --------------------------------------------------------------

def config_from_json(text: str, kind: str) -> Any:
    if kind not in CONFIG_KINDS:
        raise ConfigError(f"unknown config kind {kind!r}")
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    if isinstance(data, dict) and "kind" in data:
        if data["kind"] != kind:
            raise ConfigError(f"config kind is {data['kind']!r}, expected {kind!r}")
        data = {k: v for k, v in data.items() if k != "kind"}
    return from_dict(CONFIG_KINDS[kind], data)


def read_config(path: str | os.PathLike, kind: str) -> Any:
    return config_from_json(Path(path).read_text(), kind)


def config_to_json(cfg: Any) -> str:
    kind = next(k for k, cls in CONFIG_KINDS.items() if isinstance(cfg, cls))
    return _dump({"kind": kind, **to_dict(cfg)})


def write_config(path: str | os.PathLike, cfg: Any) -> None:
    Path(path).write_text(config_to_json(cfg))
