"""On-disk formats: slide bundles, manifests, clinical tables and analytic outputs."""

import csv
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataIOError, InputValidationError
from .model.bags import SlideBag

PACKED_MAGIC = b"PDSUBAG\x00"
LABEL_CODES = {"BASAL": 1, "CLASSICAL": 0}


def fmt_float(x):
    return repr(float(x))


def _open(path, mode="r"):
    try:
        return open(path, mode, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataIOError(f"cannot open {path}: {exc}") from exc


def write_tsv(path, header, rows):
    with _open(path, "w") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(fmt_float(v) if isinstance(v, float) else str(v) for v in row) + "\n")


def read_tsv(path):
    with _open(path) as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise InputValidationError(f"{path}: empty file") from None
        rows = [r for r in reader if r]
    for i, r in enumerate(rows, start=2):
        if len(r) != len(header):
            raise InputValidationError(f"{path}:{i}: expected {len(header)} fields, got {len(r)}")
    return header, rows


def _jsonable(obj):
    # NaN/inf become null so outputs stay strict JSON
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, obj):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputValidationError(f"{path}: invalid JSON: {exc}") from exc


# --- slide bundles ------------------------------------------------------------


def write_slide_bundle(bag, directory, packed=False, float_fmt="%.9g"):
    """Write ``patches.tsv`` and ``cells.tsv`` (and ``bundle.f32`` when ``packed``)."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {directory}: {exc}") from exc

    def emb(row):
        return "\t".join(float_fmt % float(v) for v in row)

    with _open(directory / "patches.tsv", "w") as fh:
        cols = [f"e{i}" for i in range(bag.patch_emb.shape[1])]
        fh.write("\t".join(["patch_id", "gx", "gy"] + cols) + "\n")
        for i, ((gx, gy), row) in enumerate(zip(bag.grid, bag.patch_emb)):
            fh.write(f"p{i}\t{gx}\t{gy}\t{emb(row)}\n")
    with _open(directory / "cells.tsv", "w") as fh:
        cols = [f"e{i}" for i in range(bag.cell_emb.shape[1])]
        fh.write("\t".join(["cell_id", "x", "y", "class"] + cols) + "\n")
        for j in range(bag.n_cells):
            x, y = bag.centroids[j]
            fh.write(f"c{j}\t{float_fmt % float(x)}\t{float_fmt % float(y)}\t{bag.cell_class[j]}\t{emb(bag.cell_emb[j])}\n")
    if packed:
        write_packed_bundle(bag, directory / "bundle.f32")


def write_packed_bundle(bag, path):
    """Little-endian float32 bundle: magic, u32 x4 (k, P, m, d_cell), then
    grid (k x 2), patch embeddings, centroids (m x 2), classes (m), cell embeddings."""
    k, p = bag.patch_emb.shape
    m = bag.n_cells
    d = bag.cell_emb.shape[1] if m else 0
    parts = [
        PACKED_MAGIC,
        struct.pack("<IIII", k, p, m, d),
        bag.grid.astype("<f4").tobytes(),
        bag.patch_emb.astype("<f4").tobytes(),
        bag.centroids.astype("<f4").tobytes(),
        bag.cell_class.astype("<f4").tobytes(),
        bag.cell_emb.reshape(m, d).astype("<f4").tobytes(),
    ]
    try:
        with open(path, "wb") as fh:
            fh.write(b"".join(parts))
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_packed_bundle(path, slide_id, label=None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if data[:8] != PACKED_MAGIC:
        raise InputValidationError(f"{path}: bad magic")
    k, p, m, d = struct.unpack_from("<IIII", data, 8)
    flat = np.frombuffer(data, dtype="<f4", offset=24).astype(np.float64)
    sizes = [2 * k, k * p, 2 * m, m, m * d]
    if flat.size != sum(sizes):
        raise InputValidationError(f"{path}: payload size mismatch")
    chunks = np.split(flat, np.cumsum(sizes)[:-1])
    return SlideBag(
        slide_id=slide_id,
        patch_emb=chunks[1].reshape(k, p),
        grid=chunks[0].reshape(k, 2).astype(np.int64),
        cell_emb=chunks[4].reshape(m, d),
        centroids=chunks[2].reshape(m, 2),
        cell_class=chunks[3].astype(np.int64),
        label=label,
    )


def read_slide_bundle(directory, slide_id, label=None):
    directory = Path(directory)
    if (directory / "bundle.f32").exists():
        return read_packed_bundle(directory / "bundle.f32", slide_id, label)
    header, rows = read_tsv(directory / "patches.tsv")
    if header[:3] != ["patch_id", "gx", "gy"]:
        raise InputValidationError(f"{directory}/patches.tsv: bad header")
    try:
        grid = np.array([[int(r[1]), int(r[2])] for r in rows], dtype=np.int64).reshape(-1, 2)
        patch_emb = np.array([[float(v) for v in r[3:]] for r in rows]).reshape(len(rows), -1)
    except ValueError as exc:
        raise InputValidationError(f"{directory}/patches.tsv: {exc}") from exc

    cells_path = directory / "cells.tsv"
    if cells_path.exists():
        header, rows = read_tsv(cells_path)
        if header[:4] != ["cell_id", "x", "y", "class"]:
            raise InputValidationError(f"{cells_path}: bad header")
        try:
            cent = np.array([[float(r[1]), float(r[2])] for r in rows]).reshape(-1, 2)
            cls = np.array([int(r[3]) for r in rows], dtype=np.int64)
            cell_emb = np.array([[float(v) for v in r[4:]] for r in rows]).reshape(len(rows), len(header) - 4)
        except ValueError as exc:
            raise InputValidationError(f"{cells_path}: {exc}") from exc
    else:
        cent, cls, cell_emb = None, None, None
    return SlideBag(slide_id, patch_emb, grid, cell_emb, cent, cls, label)


# --- manifest and clinical ----------------------------------------------------

MANIFEST_COLUMNS = ("slide_id", "directory", "label", "cohort", "disease_status")


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    directory: Path
    label: str
    cohort: str
    disease_status: str

    @property
    def label_code(self):
        return LABEL_CODES.get(self.label)


def write_manifest(entries, path):
    write_tsv(
        path,
        MANIFEST_COLUMNS,
        [(e.slide_id, str(e.directory), e.label, e.cohort, e.disease_status) for e in entries],
    )


def read_manifest(path):
    path = Path(path)
    header, rows = read_tsv(path)
    if tuple(header[: len(MANIFEST_COLUMNS)]) != MANIFEST_COLUMNS:
        raise InputValidationError(f"{path}: expected columns {MANIFEST_COLUMNS}")
    out = []
    for r in rows:
        d = Path(r[1])
        if not d.is_absolute():
            d = path.parent / d
        out.append(ManifestEntry(r[0], d, r[2], r[3], r[4]))
    return out


def load_slides(entries, labels=None):
    """Read bundles; ``labels`` (slide_id -> 0/1) overrides manifest labels."""
    bags = []
    for e in entries:
        y = labels.get(e.slide_id) if labels is not None else e.label_code
        bags.append(read_slide_bundle(e.directory, e.slide_id, y))
    return bags


@dataclass(frozen=True)
class ClinicalRecord:
    sample_id: str
    os_months: float
    event: int
    cohort: str
    disease_status: str


CLINICAL_COLUMNS = ("sample_id", "os_months", "event", "cohort", "disease_status")


def write_clinical_csv(records, path):
    with _open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CLINICAL_COLUMNS)
        for r in records:
            w.writerow([r.sample_id, fmt_float(r.os_months), r.event, r.cohort, r.disease_status])


def read_clinical_csv(path):
    with _open(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(CLINICAL_COLUMNS) <= set(reader.fieldnames):
            raise InputValidationError(f"{path}: expected columns {CLINICAL_COLUMNS}")
        out = []
        for i, row in enumerate(reader, start=2):
            try:
                rec = ClinicalRecord(
                    row["sample_id"],
                    float(row["os_months"]),
                    int(row["event"]),
                    row["cohort"],
                    row["disease_status"],
                )
            except ValueError as exc:
                raise InputValidationError(f"{path}:{i}: {exc}") from exc
            if rec.event not in (0, 1) or not (rec.os_months > 0 and np.isfinite(rec.os_months)):
                raise InputValidationError(f"{path}:{i}: event must be 0/1 and os_months > 0")
            if rec.disease_status not in ("metastatic", "resected"):
                raise InputValidationError(f"{path}:{i}: disease_status must be metastatic|resected")
            out.append(rec)
    return out
