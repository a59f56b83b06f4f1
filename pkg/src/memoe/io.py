"""Long-format CSV ingestion, the text model archive, and file helpers.

The CSV layout is long format: one row per observation, with a subject
identifier column, a response column, and named covariate columns for the
fixed-effect design x, the random-effect design z, and the subject-level
covariates w (which must be constant within each subject).  Rows group by
subject in order of first appearance, keeping their file order within a
subject.

A fitted model persists as a versioned JSON document whose floats are
written with round-trip-exact decimal encoding, so save -> load -> save is
byte-identical and a loaded model predicts bit-for-bit like the in-memory
one.  All output files are written atomically (temp file + rename).
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .model import Dataset, ModelParams, Subject, MemoeError, GATE_X, GATE_XZ
from .em import DatasetSums

__all__ = [
    "DataError",
    "ArchiveError",
    "LongCsvSchema",
    "ModelArchive",
    "load_long_csv",
    "iter_covariate_rows",
    "save_model",
    "load_model",
    "atomic_write_text",
    "write_csv",
    "read_key_value_file",
    "schema_from_file",
    "fmt_float",
]

ARCHIVE_FORMAT = "memoe-model"
ARCHIVE_VERSION = 1


class DataError(MemoeError):
    """Malformed input data; the message carries row/column context."""


class ArchiveError(MemoeError):
    """Unusable model archive."""


@dataclass(frozen=True)
class LongCsvSchema:
    """Column binding for long-format CSV files.

    ``x_cols``/``z_cols``/``w_cols`` are ordered; ``add_intercept_x`` and
    ``add_intercept_w`` prepend a constant-1 column to x and w.  x and z may
    share columns; w must be constant within each subject.
    """

    subject_col: str
    y_col: str
    x_cols: tuple
    z_cols: tuple
    w_cols: tuple = ()
    add_intercept_x: bool = False
    add_intercept_w: bool = False
    gating: str = GATE_X

    def __post_init__(self):
        object.__setattr__(self, "x_cols", tuple(self.x_cols))
        object.__setattr__(self, "z_cols", tuple(self.z_cols))
        object.__setattr__(self, "w_cols", tuple(self.w_cols))
        if self.gating not in (GATE_X, GATE_XZ):
            raise ValueError(f"unknown gating policy {self.gating!r}")

    def required_columns(self, need_y: bool = True):
        cols = {self.subject_col, *self.x_cols, *self.z_cols, *self.w_cols}
        if need_y:
            cols.add(self.y_col)
        return cols


def _parse_cell(raw, row_no: int, col: str) -> float:
    if raw is None or raw.strip() == "":
        raise DataError(f"row {row_no}: missing value in column {col!r}")
    try:
        val = float(raw)
    except ValueError:
        raise DataError(
            f"row {row_no}: non-numeric value {raw!r} in column {col!r}")
    if not np.isfinite(val):
        raise DataError(f"row {row_no}: non-finite value in column {col!r}")
    return val


def _read_rows(path, schema: LongCsvSchema, need_y: bool):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = schema.required_columns(need_y) - set(reader.fieldnames)
        if missing:
            raise DataError(f"{path}: missing column(s) {sorted(missing)}")
        rows = []
        for row_no, row in enumerate(reader, start=2):
            sid = row[schema.subject_col]
            y = (_parse_cell(row[schema.y_col], row_no, schema.y_col)
                 if need_y else float("nan"))
            x = [_parse_cell(row[c], row_no, c) for c in schema.x_cols]
            z = [_parse_cell(row[c], row_no, c) for c in schema.z_cols]
            w = [_parse_cell(row[c], row_no, c) for c in schema.w_cols]
            if schema.add_intercept_x:
                x = [1.0] + x
            if schema.add_intercept_w:
                w = [1.0] + w
            rows.append((row_no, sid, y, x, z, w))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return rows


def load_long_csv(path, schema: LongCsvSchema) -> Dataset:
    """Read a long-format CSV into a :class:`Dataset`.

    Rows group by the subject column preserving within-subject order; the
    subject covariates w come from the first row per subject after
    validating that they are constant within the subject.
    """
    rows = _read_rows(path, schema, need_y=True)
    by_subject: dict = {}
    order = []
    for row_no, sid, y, x, z, w in rows:
        if sid not in by_subject:
            by_subject[sid] = {"w": w, "y": [], "X": [], "Z": []}
            order.append(sid)
        elif by_subject[sid]["w"] != w:
            raise DataError(f"row {row_no}: subject {sid!r} has varying "
                            "subject-level covariates")
        rec = by_subject[sid]
        rec["y"].append(y)
        rec["X"].append(x)
        rec["Z"].append(z)
    subjects = [Subject(sid, by_subject[sid]["w"], by_subject[sid]["y"],
                        by_subject[sid]["X"], by_subject[sid]["Z"])
                for sid in order]
    return Dataset(subjects, gating_policy=schema.gating)


def iter_covariate_rows(path, schema: LongCsvSchema):
    """Row-wise covariate tuples for prediction: yields
    ``(row_id, x, z, w, y)`` with y = NaN when the response column is
    absent.  Each row stands alone; no grouping is required."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        has_y = (reader.fieldnames is not None
                 and schema.y_col in reader.fieldnames)
    for row_no, sid, y, x, z, w in _read_rows(path, schema, need_y=has_y):
        yield (f"{sid}:{row_no}", np.array(x), np.array(z), np.array(w), y)


# ---------------------------------------------------------------------------
# Model archive
# ---------------------------------------------------------------------------

@dataclass
class ModelArchive:
    """Self-describing persisted model: dimensions, parameters, the training
    summaries needed for prediction, and fit diagnostics."""

    params: ModelParams
    sums: DatasetSums
    gating_policy: str
    dims: tuple
    diagnostics: dict = field(default_factory=dict)
    version: int = ARCHIVE_VERSION

    @classmethod
    def from_fitted(cls, fitted) -> "ModelArchive":
        if isinstance(fitted, ModelArchive):
            return fitted
        diag = {
            "converged": bool(fitted.converged),
            "em_iters": int(fitted.em_iters),
            "final_loglik": float(fitted.final_loglik),
            "n_starts": int(fitted.best_of.get("n_starts", 1))
                        if fitted.best_of else 1,
        }
        return cls(params=fitted.params, sums=fitted.sums,
                   gating_policy=fitted.gating_policy,
                   dims=tuple(fitted.dims), diagnostics=diag)


def save_model(fitted, path) -> None:
    """Serialize a fitted model (or archive) to a versioned JSON file."""
    arc = ModelArchive.from_fitted(fitted)
    p, q, d = arc.dims
    doc = {
        "format": ARCHIVE_FORMAT,
        "version": arc.version,
        "dims": {"p": p, "q": q, "d": d,
                 "g": int(arc.params.g), "K": int(arc.params.K)},
        "gating_policy": arc.gating_policy,
        "params": {
            "alpha": arc.params.alpha.tolist(),
            "beta": arc.params.beta.tolist(),
            "sigma2": arc.params.sigma2.tolist(),
            "kappa": arc.params.kappa.tolist(),
            "Sigma": arc.params.Sigma.tolist(),
        },
        "sums": {
            "gram": arc.sums.gram.tolist(),
            "w_gram": arc.sums.w_gram.tolist(),
        },
        "diagnostics": arc.diagnostics,
    }
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_model(path) -> ModelArchive:
    """Load, validate, and return a persisted model."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable archive ({exc})")
    if doc.get("format") != ARCHIVE_FORMAT:
        raise ArchiveError(f"{path}: not a model archive")
    if doc.get("version") != ARCHIVE_VERSION:
        raise ArchiveError(
            f"{path}: unsupported archive version {doc.get('version')!r}")
    try:
        dims = doc["dims"]
        p, q, d, g, K = (int(dims[k]) for k in ("p", "q", "d", "g", "K"))
        raw = doc["params"]
        arrays = {k: np.asarray(raw[k], dtype=float)
                  for k in ("alpha", "beta", "sigma2", "kappa", "Sigma")}
        sums_raw = doc["sums"]
        gram = np.asarray(sums_raw["gram"], dtype=float)
        w_gram = np.asarray(sums_raw["w_gram"], dtype=float)
        policy = doc["gating_policy"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{path}: corrupt archive ({exc})")
    shapes = {"alpha": (K, g), "beta": (K, p), "sigma2": (K,),
              "kappa": (q, d), "Sigma": (q, q)}
    for name, want in shapes.items():
        if arrays[name].shape != want:
            raise ArchiveError(f"{path}: {name} has shape "
                               f"{arrays[name].shape}, expected {want}")
    Sigma = arrays["Sigma"]
    if not np.array_equal(Sigma, Sigma.T):
        raise ArchiveError(f"{path}: Sigma block is not symmetric")
    try:
        params = ModelParams(**arrays)
    except ValueError as exc:
        raise ArchiveError(f"{path}: invalid parameters ({exc})")
    if gram.shape != (K, p, p) or w_gram.shape != (d, d):
        raise ArchiveError(f"{path}: design summaries have wrong shape")
    return ModelArchive(params=params,
                        sums=DatasetSums(gram=gram, w_gram=w_gram),
                        gating_policy=policy, dims=(p, q, d),
                        diagnostics=doc.get("diagnostics", {}))


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------

def atomic_write_text(path, text: str) -> None:
    """Write via a sibling temp file and rename, so readers never observe a
    partial file and failures leave nothing behind."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-memoe-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def fmt_float(x) -> str:
    """Decimal encoding with 17 significant digits (round-trip exact)."""
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(path, header, rows) -> None:
    """RFC-4180 CSV with a fixed header and 17-significant-digit floats,
    written atomically."""
    import io as _io
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt_float(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def read_key_value_file(path) -> dict:
    """Parse a ``key=value`` configuration file.

    Blank lines and lines starting with ``#`` are skipped; values keep their
    raw string form for the caller to coerce.
    """
    out = {}
    try:
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise DataError(
                        f"{path}:{line_no}: expected key=value")
                key, _, value = line.partition("=")
                out[key.strip()] = value.strip()
    except OSError as exc:
        raise DataError(f"{path}: unreadable ({exc})")
    return out


def _as_bool(raw: str, key: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise DataError(f"{key}: expected a boolean, got {raw!r}")


def schema_from_file(path) -> LongCsvSchema:
    """Build a :class:`LongCsvSchema` from a key=value file.

    Keys: ``subject_col``, ``y_col``, ``x_cols``, ``z_cols`` (required);
    ``w_cols``, ``add_intercept_x``, ``add_intercept_w``, ``gating``
    (optional).  Column lists are comma separated.
    """
    kv = read_key_value_file(path)
    for key in ("subject_col", "y_col", "x_cols", "z_cols"):
        if key not in kv:
            raise DataError(f"{path}: schema is missing {key!r}")

    def cols(key):
        raw = kv.get(key, "")
        return tuple(c.strip() for c in raw.split(",") if c.strip())

    return LongCsvSchema(
        subject_col=kv["subject_col"],
        y_col=kv["y_col"],
        x_cols=cols("x_cols"),
        z_cols=cols("z_cols"),
        w_cols=cols("w_cols"),
        add_intercept_x=_as_bool(kv.get("add_intercept_x", "false"),
                                 "add_intercept_x"),
        add_intercept_w=_as_bool(kv.get("add_intercept_w", "false"),
                                 "add_intercept_w"),
        gating=kv.get("gating", GATE_X),
    )
