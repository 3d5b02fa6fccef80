"""Gene-expression matrices, gene sets and the normalizations applied to them."""

import csv
import enum
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import check_array, check_unique
from .exceptions import (
    DataIOError,
    DegenerateStatisticsError,
    InputValidationError,
)


class Mode(str, enum.Enum):
    COUNTS = "counts"
    TPM = "tpm"
    LOG2_TPM1 = "log2_tpm1"
    ZSCORE = "zscore"


class CollisionPolicy(str, enum.Enum):
    SUM = "sum"
    MAX = "max"
    ERROR = "error"


class DegenerateSampleError(DegenerateStatisticsError):
    def __init__(self, samples):
        self.samples = list(samples)
        super().__init__(f"samples with zero total expression: {self.samples}")


class InsufficientCohortError(DegenerateStatisticsError):
    pass


@dataclass(frozen=True)
class ExpressionMatrix:
    """Dense genes x samples matrix tagged with its normalization mode."""

    gene_ids: tuple
    sample_ids: tuple
    values: np.ndarray
    mode: Mode = Mode.TPM

    def __post_init__(self):
        genes = tuple(check_unique(self.gene_ids, "gene_ids"))
        samples = tuple(check_unique(self.sample_ids, "sample_ids"))
        mode = Mode(self.mode)
        values = check_array(
            self.values,
            ndim=2,
            name="expression values",
            nonnegative=mode in (Mode.COUNTS, Mode.TPM),
        )
        if values.shape != (len(genes), len(samples)):
            raise InputValidationError(
                f"values shape {values.shape} != ({len(genes)}, {len(samples)})"
            )
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "gene_ids", genes)
        object.__setattr__(self, "sample_ids", samples)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mode", mode)

    @property
    def shape(self):
        return self.values.shape

    def gene_index(self, gene):
        try:
            return self.gene_ids.index(gene)
        except ValueError:
            raise InputValidationError(f"gene {gene!r} not in matrix") from None

    def row(self, gene):
        return self.values[self.gene_index(gene)]

    def column(self, sample):
        try:
            j = self.sample_ids.index(sample)
        except ValueError:
            raise InputValidationError(f"sample {sample!r} not in matrix") from None
        return self.values[:, j]

    def subset_genes(self, genes):
        missing = [g for g in genes if g not in self.gene_ids]
        if missing:
            raise InputValidationError(f"genes not in matrix: {missing}")
        idx = [self.gene_index(g) for g in genes]
        return ExpressionMatrix(tuple(genes), self.sample_ids, self.values[idx], self.mode)

    def subset_samples(self, samples):
        pos = {s: j for j, s in enumerate(self.sample_ids)}
        missing = [s for s in samples if s not in pos]
        if missing:
            raise InputValidationError(f"samples not in matrix: {missing}")
        idx = [pos[s] for s in samples]
        return ExpressionMatrix(self.gene_ids, tuple(samples), self.values[:, idx], self.mode)

    def with_values(self, values, mode):
        return ExpressionMatrix(self.gene_ids, self.sample_ids, values, mode)


@dataclass(frozen=True)
class GeneSet:
    name: str
    genes: tuple = field(default_factory=tuple)
    description: str = ""

    def __post_init__(self):
        # dedupe, first occurrence wins
        genes = tuple(dict.fromkeys(str(g) for g in self.genes))
        if not genes:
            raise InputValidationError(f"gene set {self.name!r} is empty")
        object.__setattr__(self, "genes", genes)

    def __len__(self):
        return len(self.genes)

    def __iter__(self):
        return iter(self.genes)

    def __contains__(self, gene):
        return gene in self.genes


@dataclass(frozen=True)
class GeneIdMap:
    """Many-to-one mapping from source identifiers to gene symbols."""

    entries: dict

    def __getitem__(self, key):
        return self.entries[key]

    def __contains__(self, key):
        return key in self.entries


def counts_to_tpm(counts, lengths):
    """Convert a COUNTS matrix to transcripts per million.

    ``lengths`` gives gene lengths in kilobases, either as a mapping keyed by
    gene id or as a sequence aligned with ``counts.gene_ids``.
    """
    if counts.mode is not Mode.COUNTS:
        raise InputValidationError(f"counts_to_tpm expects COUNTS, got {counts.mode.value}")
    if hasattr(lengths, "get"):
        missing = [g for g in counts.gene_ids if lengths.get(g) is None]
        if missing:
            raise InputValidationError(f"missing gene lengths for {missing}")
        lengths = [lengths[g] for g in counts.gene_ids]
    lengths = np.asarray(lengths, dtype=np.float64)
    if lengths.shape != (len(counts.gene_ids),):
        raise InputValidationError(
            f"lengths has shape {lengths.shape}, expected ({len(counts.gene_ids)},)"
        )
    bad = [g for g, ell in zip(counts.gene_ids, lengths) if not (np.isfinite(ell) and ell > 0)]
    if bad:
        raise InputValidationError(f"non-positive or non-finite gene lengths for {bad}")

    rate = counts.values / lengths[:, None]
    totals = rate.sum(axis=0)
    zero = [s for s, t in zip(counts.sample_ids, totals) if t <= 0]
    if zero:
        raise DegenerateSampleError(zero)
    return counts.with_values(rate / totals * 1e6, Mode.TPM)


def log2p1(m):
    if m.mode is not Mode.TPM:
        raise InputValidationError(f"log2p1 expects TPM, got {m.mode.value}")
    return m.with_values(np.log2(m.values + 1.0), Mode.LOG2_TPM1)


def zscore_rows(values):
    """Row-wise z-score with ddof=1; constant rows map to zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] < 2:
        raise InsufficientCohortError(f"z-scoring needs >= 2 samples, got {values.shape[-1]}")
    mean = values.mean(axis=-1, keepdims=True)
    centered = values - mean
    sd = np.sqrt((centered**2).sum(axis=-1, keepdims=True) / (values.shape[-1] - 1))
    out = np.zeros_like(centered)
    np.divide(centered, sd, out=out, where=sd > 0)
    # an exactly-constant row can leave rounding residue in ``centered``
    const = np.all(values == values[..., :1], axis=-1)
    out[const] = 0.0
    return out


def zscore_genes(m):
    return m.with_values(zscore_rows(m.values), Mode.ZSCORE)


def map_gene_ids(m, id_map, collision=CollisionPolicy.SUM, drop_unmapped=False):
    collision = CollisionPolicy(collision)
    unmapped = [g for g in m.gene_ids if g not in id_map]
    if unmapped and not drop_unmapped:
        raise InputValidationError(f"unmapped gene ids: {unmapped}")

    groups = {}
    for i, g in enumerate(m.gene_ids):
        if g in id_map:
            groups.setdefault(id_map[g], []).append(i)

    symbols = list(groups)
    rows = []
    for sym in symbols:
        idx = groups[sym]
        if len(idx) > 1 and collision is CollisionPolicy.ERROR:
            sources = [m.gene_ids[i] for i in idx]
            raise InputValidationError(f"ids {sources} collide on symbol {sym!r}")
        block = m.values[idx]
        rows.append(block.max(axis=0) if collision is CollisionPolicy.MAX else block.sum(axis=0))
    values = np.vstack(rows) if rows else np.zeros((0, len(m.sample_ids)))
    return ExpressionMatrix(tuple(symbols), m.sample_ids, values, m.mode)


# --- file formats -----------------------------------------------------------


def _open_text(path, mode="r"):
    try:
        return open(path, mode, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataIOError(f"cannot open {path}: {exc}") from exc


def read_matrix_tsv(path, mode=Mode.TPM):
    """Read a ``gene<TAB>sample...`` matrix file."""
    with _open_text(path) as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise InputValidationError(f"{path}: empty file") from None
        if not header or header[0] != "gene":
            raise InputValidationError(f"{path}: first header cell must be 'gene'")
        genes, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise InputValidationError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}"
                )
            genes.append(rec[0])
            try:
                rows.append([float(v) for v in rec[1:]])
            except ValueError as exc:
                raise InputValidationError(f"{path}:{lineno}: {exc}") from exc
    values = np.array(rows, dtype=np.float64).reshape(len(genes), len(header) - 1)
    return ExpressionMatrix(tuple(genes), tuple(header[1:]), values, mode)


def write_matrix_tsv(m, path):
    with _open_text(path, "w") as fh:
        fh.write("\t".join(("gene",) + m.sample_ids) + "\n")
        for g, row in zip(m.gene_ids, m.values):
            fh.write(g + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")


def read_id_map(path):
    entries = {}
    with _open_text(path) as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not rec or rec[0].startswith("#"):
                continue
            if len(rec) != 2:
                raise InputValidationError(f"{path}:{lineno}: expected source_id<TAB>symbol")
            if rec[0] in entries and entries[rec[0]] != rec[1]:
                raise InputValidationError(f"{path}:{lineno}: {rec[0]!r} mapped twice")
            entries[rec[0]] = rec[1]
    return GeneIdMap(entries)


def read_lengths_tsv(path):
    """Two-column ``gene<TAB>length_kb`` table; a header row is skipped if non-numeric."""
    out = {}
    with _open_text(path) as fh:
        for lineno, rec in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not rec:
                continue
            try:
                out[rec[0]] = float(rec[1])
            except (IndexError, ValueError):
                if lineno == 1:
                    continue
                raise InputValidationError(f"{path}:{lineno}: bad length row") from None
    return out


def parse_gmt(text):
    sets = []
    for line in text.splitlines():
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) < 3:
            raise InputValidationError(f"GMT line for {parts[0]!r} has no genes")
        sets.append(GeneSet(parts[0], tuple(g for g in parts[2:] if g), parts[1]))
    return sets


def read_gmt(path):
    with _open_text(path) as fh:
        return parse_gmt(fh.read())


def write_gmt(sets, path):
    with _open_text(path, "w") as fh:
        for s in sets:
            fh.write("\t".join((s.name, s.description or "na") + s.genes) + "\n")


def builtin_gene_set(name):
    """Load one of the packaged gene sets: ``moffitt_classical``, ``moffitt_basal``, ``ddr6``."""
    try:
        text = resources.files("pdac_subtype.data").joinpath(f"{name}.gmt").read_text("utf-8")
    except FileNotFoundError:
        raise InputValidationError(f"no packaged gene set named {name!r}") from None
    (gs,) = parse_gmt(text)
    return gs


def builtin_gmt_path(name):
    return Path(str(resources.files("pdac_subtype.data").joinpath(f"{name}.gmt")))
