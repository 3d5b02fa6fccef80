"""Transcriptomic subtype calls: ssGSEA enrichment, cohort z-score thresholds,
GATA6 refinement of intermediate cases and the DDR composite score."""

import csv
import enum
import math
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_array
from .exceptions import (
    DataIOError,
    DegenerateStatisticsError,
    InputValidationError,
    MissingGenesError,
)
from .expression import ExpressionMatrix, Mode, builtin_gene_set, zscore_rows


class Label(str, enum.Enum):
    BASAL = "BASAL"
    CLASSICAL = "CLASSICAL"
    INTERMEDIATE = "INTERMEDIATE"
    AMBIGUOUS = "AMBIGUOUS"


class ZeroVarianceCohortError(DegenerateStatisticsError):
    pass


@dataclass(frozen=True)
class SsgseaParams:
    alpha: float = 0.25
    # only "symbol" (ascending gene symbol among equal values) is implemented
    tie_break: str = "symbol"

    def __post_init__(self):
        if not (self.alpha >= 0 and math.isfinite(self.alpha)):
            raise InputValidationError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.tie_break != "symbol":
            raise InputValidationError(f"unknown tie_break {self.tie_break!r}")


@dataclass(frozen=True)
class TertileCutoffs:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower <= self.upper:
            raise InputValidationError(f"tertile cutoffs out of order: {self.lower} > {self.upper}")


@dataclass(frozen=True)
class SubtypeRecord:
    sample_id: str
    es_classical: float
    es_basal: float
    score: float
    zscore: float
    label: Label
    gata6_tpm: float = None
    ddr_score: float = None


def ssgsea_es(values, gene_ids, gene_set, params=SsgseaParams()):
    """Single-sample enrichment score of ``gene_set`` in one expression vector.

    Genes are ordered by descending expression (ties by ascending symbol) and
    the running difference between the rank-weighted in-set CDF and the
    uniform out-of-set CDF is summed over all positions.
    """
    values = check_array(values, ndim=1, name="expression vector")
    gene_ids = np.asarray([str(g) for g in gene_ids])
    n = len(gene_ids)
    if values.shape[0] != n:
        raise InputValidationError(f"{values.shape[0]} values for {n} gene ids")

    members = set(gene_set.genes)
    in_set = np.fromiter((g in members for g in gene_ids), dtype=bool, count=n)
    n_in = int(in_set.sum())
    if n_in == 0:
        raise MissingGenesError(gene_set.genes, context=f"gene set {gene_set.name!r}")
    if n_in == n:
        raise DegenerateStatisticsError(
            f"gene set {gene_set.name!r} covers all {n} genes; out-of-set CDF undefined"
        )

    order = np.lexsort((gene_ids, -values))
    hit = in_set[order]
    rank_value = np.arange(n, 0, -1, dtype=np.float64)
    w = np.where(hit, rank_value**params.alpha, 0.0)
    p_in = np.cumsum(w) / w.sum()
    p_out = np.cumsum(~hit) / (n - n_in)
    return float(np.sum(p_in - p_out))


def subtype_score(values, gene_ids, classical, basal, params=SsgseaParams()):
    es_c = ssgsea_es(values, gene_ids, classical, params)
    es_b = ssgsea_es(values, gene_ids, basal, params)
    return es_c, es_b, es_c - es_b


def label_from_z(z, threshold=1.0):
    if z > threshold:
        return Label.CLASSICAL
    if z < -threshold:
        return Label.BASAL
    return Label.INTERMEDIATE


def cohort_zscore(scores):
    scores = check_array(scores, ndim=1, name="scores")
    if scores.size < 2:
        raise DegenerateStatisticsError(f"z-scoring needs >= 2 samples, got {scores.size}")
    if np.all(scores == scores[0]):
        raise ZeroVarianceCohortError("all subtype scores are identical; z-score undefined")
    return zscore_rows(scores)


def assign_labels(scores, threshold=1.0):
    """Cohort z-score (ddof=1) of the subtype scores and the threshold label per sample."""
    z = cohort_zscore(scores)
    return [(float(zi), label_from_z(zi, threshold)) for zi in z]


def gata6_tertiles(gata6_tpm, override=None):
    """Empirical 1/3 and 2/3 quantiles (linear interpolation), or ``override`` verbatim."""
    if override is not None:
        lo, hi = override
        return TertileCutoffs(float(lo), float(hi))
    x = check_array(gata6_tpm, ndim=1, name="GATA6 TPM", nonnegative=True)
    if x.size < 3:
        raise DegenerateStatisticsError(f"tertiles need >= 3 samples, got {x.size}")
    lo, hi = np.quantile(x, [1 / 3, 2 / 3])
    return TertileCutoffs(float(lo), float(hi))


def refine_with_gata6(records, cutoffs):
    out = []
    for rec in records:
        if rec.label is not Label.INTERMEDIATE:
            out.append(rec)
            continue
        if rec.gata6_tpm is None:
            raise InputValidationError(
                f"sample {rec.sample_id!r} is INTERMEDIATE but has no GATA6 value"
            )
        if rec.gata6_tpm <= cutoffs.lower:
            label = Label.BASAL
        elif rec.gata6_tpm >= cutoffs.upper:
            label = Label.CLASSICAL
        else:
            label = Label.AMBIGUOUS
        out.append(replace(rec, label=label))
    return out


def _require_genes(m, gene_set):
    missing = [g for g in gene_set.genes if g not in m.gene_ids]
    if missing:
        raise MissingGenesError(missing, context=f"gene set {gene_set.name!r}")


def ddr_score(m, ddr, log_transform=True):
    """Per-sample sum of gene-wise z-scores over the DDR genes."""
    if m.mode is not Mode.TPM:
        raise InputValidationError(f"ddr_score expects TPM, got {m.mode.value}")
    _require_genes(m, ddr)
    block = m.subset_genes(ddr.genes).values
    if log_transform:
        block = np.log2(block + 1.0)
    return zscore_rows(block).sum(axis=0)


class SubtypeLabeler(TransformerMixin, BaseEstimator):
    """Cohort-level subtype labeling as a fit/transform estimator.

    ``fit`` learns the cohort statistics (mean and sd of the subtype score,
    GATA6 cutoffs, per-gene DDR mean/sd); ``transform`` returns one
    :class:`SubtypeRecord` per sample. On the fitting cohort,
    ``fit_transform`` gives the z-scores and labels of the labeling rule.

    Parameters
    ----------
    classical, basal, ddr : GeneSet or None
        ``None`` loads the packaged sets. ``ddr=False`` skips DDR scoring.
    alpha : float
        Rank-weight exponent of the enrichment score.
    normalize_es : bool
        Divide enrichment scores by their cohort range (max - min over both sets).
    gata6_cutoffs : (float, float) or None
        Fixed GATA6 cutoffs; ``None`` uses the cohort tertiles.
    z_threshold : float
        Labels are CLASSICAL above ``+z_threshold`` and BASAL below ``-z_threshold``.
    """

    def __init__(
        self,
        classical=None,
        basal=None,
        ddr=None,
        alpha=0.25,
        normalize_es=False,
        gata6_gene="GATA6",
        gata6_cutoffs=None,
        ddr_log=True,
        z_threshold=1.0,
        refine=True,
    ):
        self.classical = classical
        self.basal = basal
        self.ddr = ddr
        self.alpha = alpha
        self.normalize_es = normalize_es
        self.gata6_gene = gata6_gene
        self.gata6_cutoffs = gata6_cutoffs
        self.ddr_log = ddr_log
        self.z_threshold = z_threshold
        self.refine = refine

    def _sets(self):
        classical = self.classical or builtin_gene_set("moffitt_classical")
        basal = self.basal or builtin_gene_set("moffitt_basal")
        ddr = None if self.ddr is False else (self.ddr or builtin_gene_set("ddr6"))
        return classical, basal, ddr

    def _check_matrix(self, X):
        if not isinstance(X, ExpressionMatrix):
            raise InputValidationError("expected an ExpressionMatrix")
        if X.mode is not Mode.TPM:
            raise InputValidationError(f"subtype labeling ranks TPM values; got {X.mode.value}")
        return X

    def _enrichment(self, X):
        classical, basal, _ = self._sets()
        params = SsgseaParams(alpha=self.alpha)
        es = np.array(
            [subtype_score(X.values[:, j], X.gene_ids, classical, basal, params)[:2]
             for j in range(len(X.sample_ids))]
        ).reshape(-1, 2)
        return es

    def _gata6(self, X):
        if self.gata6_gene in X.gene_ids:
            return X.row(self.gata6_gene)
        return None

    def fit(self, X, y=None, groups=None):
        X = self._check_matrix(X)
        _, _, ddr = self._sets()
        es = self._enrichment(X)
        self.es_range_ = float(es.max() - es.min()) if self.normalize_es else 1.0
        if self.es_range_ == 0:
            raise ZeroVarianceCohortError("enrichment scores have zero range")
        score = (es[:, 0] - es[:, 1]) / self.es_range_

        groups = self._groups(X, groups)
        self.score_stats_ = {}
        for g in sorted(set(groups)):
            s = score[np.asarray(groups) == g]
            cohort_zscore(s)  # raises on degenerate cohorts
            self.score_stats_[g] = (float(s.mean()), float(s.std(ddof=1)))

        gata6 = self._gata6(X)
        if self.gata6_cutoffs is not None:
            self.cutoffs_ = gata6_tertiles(None, override=self.gata6_cutoffs)
        elif gata6 is not None:
            self.cutoffs_ = gata6_tertiles(gata6)
        else:
            self.cutoffs_ = None

        if ddr is not None:
            _require_genes(X, ddr)
            block = X.subset_genes(ddr.genes).values
            if self.ddr_log:
                block = np.log2(block + 1.0)
            self.ddr_mean_ = block.mean(axis=1)
            self.ddr_sd_ = block.std(axis=1, ddof=1)
        self.n_samples_fit_ = len(X.sample_ids)
        return self

    @staticmethod
    def _groups(X, groups):
        if groups is None:
            return ["all"] * len(X.sample_ids)
        if hasattr(groups, "get"):
            missing = [s for s in X.sample_ids if s not in groups]
            if missing:
                raise InputValidationError(f"no group for samples {missing[:10]}")
            return [str(groups[s]) for s in X.sample_ids]
        groups = [str(g) for g in groups]
        if len(groups) != len(X.sample_ids):
            raise InputValidationError("groups must align with samples")
        return groups

    def _ddr(self, X):
        _, _, ddr = self._sets()
        if ddr is None:
            return None
        _require_genes(X, ddr)
        block = X.subset_genes(ddr.genes).values
        if self.ddr_log:
            block = np.log2(block + 1.0)
        centered = block - self.ddr_mean_[:, None]
        z = np.zeros_like(centered)
        sd = self.ddr_sd_[:, None]
        np.divide(centered, sd, out=z, where=np.broadcast_to(sd > 0, z.shape))
        return z.sum(axis=0)

    def transform(self, X, groups=None):
        check_is_fitted(self, "score_stats_")
        X = self._check_matrix(X)
        es = self._enrichment(X)
        score = (es[:, 0] - es[:, 1]) / self.es_range_
        groups = self._groups(X, groups)
        gata6 = self._gata6(X)
        ddr = self._ddr(X)

        records = []
        for j, sid in enumerate(X.sample_ids):
            if groups[j] not in self.score_stats_:
                raise InputValidationError(f"group {groups[j]!r} was not seen during fit")
            mean, sd = self.score_stats_[groups[j]]
            z = (score[j] - mean) / sd
            records.append(
                SubtypeRecord(
                    sample_id=sid,
                    es_classical=float(es[j, 0]),
                    es_basal=float(es[j, 1]),
                    score=float(score[j]),
                    zscore=float(z),
                    label=label_from_z(z, self.z_threshold),
                    gata6_tpm=None if gata6 is None else float(gata6[j]),
                    ddr_score=None if ddr is None else float(ddr[j]),
                )
            )
        if self.refine:
            needs = any(r.label is Label.INTERMEDIATE for r in records)
            if needs and self.cutoffs_ is None:
                raise MissingGenesError([self.gata6_gene], context="GATA6 refinement")
            if needs:
                records = refine_with_gata6(records, self.cutoffs_)
        return records

    def fit_transform(self, X, y=None, groups=None):
        return self.fit(X, groups=groups).transform(X, groups=groups)


def label_summary(records):
    counts = {lab.value: 0 for lab in Label}
    for r in records:
        counts[r.label.value] += 1
    n_c, n_b = counts["CLASSICAL"], counts["BASAL"]
    called = n_c + n_b
    return {
        "n": len(records),
        "counts": counts,
        "classical_fraction": n_c / called if called else None,
        "basal_fraction": n_b / called if called else None,
    }


LABEL_COLUMNS = (
    "sample_id", "es_classical", "es_basal", "score", "zscore", "label", "gata6_tpm", "ddr_score",
)


def _fmt(v):
    if v is None:
        return "NA"
    if isinstance(v, Label):
        return v.value
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_labels_tsv(records, path):
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("\t".join(LABEL_COLUMNS) + "\n")
            for r in records:
                fh.write("\t".join(_fmt(getattr(r, c)) for c in LABEL_COLUMNS) + "\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_labels_tsv(path):
    def opt(v):
        return None if v in ("", "NA") else float(v)

    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh, delimiter="\t")
        if reader.fieldnames is None or tuple(reader.fieldnames[:6]) != LABEL_COLUMNS[:6]:
            raise InputValidationError(f"{path}: not a labels table")
        out = []
        for row in reader:
            try:
                out.append(
                    SubtypeRecord(
                        sample_id=row["sample_id"],
                        es_classical=float(row["es_classical"]),
                        es_basal=float(row["es_basal"]),
                        score=float(row["score"]),
                        zscore=float(row["zscore"]),
                        label=Label(row["label"]),
                        gata6_tpm=opt(row.get("gata6_tpm", "NA")),
                        ddr_score=opt(row.get("ddr_score", "NA")),
                    )
                )
            except (KeyError, ValueError) as exc:
                raise InputValidationError(f"{path}: bad row {row}: {exc}") from exc
    return out
