"""Synthetic cohorts with planted subtype signal for end-to-end runs."""

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._rng import substream
from .exceptions import DataIOError, InputValidationError
from .expression import ExpressionMatrix, Mode, builtin_gene_set, write_gmt, write_matrix_tsv
from .io import (
    ClinicalRecord,
    ManifestEntry,
    write_clinical_csv,
    write_json,
    write_manifest,
    write_slide_bundle,
    write_tsv,
)
from .model.bags import N_CELL_CLASSES, PATCH_SIZE_40X, SlideBag


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the synthetic generator.

    ``delta`` is the per-dimension mean shift (in units of ``sigma``) of
    basal patch and cell embeddings; classical embeddings are centred at 0.
    """

    n_slides: int = 60
    patches_per_slide: tuple = (4, 8)
    cells_per_patch: tuple = (0, 6)
    delta: float = 3.0
    sigma: float = 1.0
    d_patch: int = 768
    d_cell: int = 4
    grid_size: int = 4
    n_expression: int = 200
    n_filler_genes: int = 200
    classical_fraction: float = 0.65
    classical_effect: float = 2.0
    basal_effect: float = 2.0
    gata6_classical_tpm: float = 90.0
    gata6_basal_tpm: float = 8.0
    hazard_ratio: float = 3.0
    classical_median_months: float = 24.0
    censor_fraction: float = 0.2
    metastatic_fraction: float = 0.6

    def __post_init__(self):
        lo_p, hi_p = self.patches_per_slide
        lo_c, hi_c = self.cells_per_patch
        if self.n_slides < 1 or self.n_expression < 1 or lo_p < 1 or hi_p < lo_p:
            raise InputValidationError("counts in SynthSpec must be >= 1 with lo <= hi")
        if lo_c < 0 or hi_c < lo_c:
            raise InputValidationError("cells_per_patch must satisfy 0 <= lo <= hi")
        if hi_p > self.grid_size**2:
            raise InputValidationError("grid too small for the requested patch count")
        if self.delta < 0 or self.sigma <= 0:
            raise InputValidationError("delta must be >= 0 and sigma > 0")
        if self.n_slides > self.n_expression:
            raise InputValidationError("n_slides cannot exceed n_expression (slides are a subset)")
        if not 0 <= self.censor_fraction < 1 or self.hazard_ratio <= 0:
            raise InputValidationError("censor_fraction in [0, 1) and hazard_ratio > 0 required")


def planted_classes(n, classical_fraction, rng):
    """Exactly ``round(n * classical_fraction)`` classical (0) samples, shuffled; basal = 1."""
    n_classical = int(round(n * classical_fraction))
    y = np.array([0] * n_classical + [1] * (n - n_classical), dtype=np.int64)
    return y[rng.permutation(n)]


def synth_slide(slide_id, label, spec, rng):
    k = int(rng.integers(spec.patches_per_slide[0], spec.patches_per_slide[1] + 1))
    cells_flat = rng.choice(spec.grid_size**2, size=k, replace=False)
    grid = np.column_stack([cells_flat % spec.grid_size, cells_flat // spec.grid_size])
    shift_p = spec.delta * spec.sigma * label
    patch_emb = rng.normal(shift_p, spec.sigma, size=(k, spec.d_patch))

    n_cells = rng.integers(spec.cells_per_patch[0], spec.cells_per_patch[1] + 1, size=k)
    m = int(n_cells.sum())
    owner = np.repeat(np.arange(k), n_cells)
    centroids = (grid[owner] + rng.uniform(0.0, 1.0, size=(m, 2))) * PATCH_SIZE_40X
    # keep centroids strictly inside their patch after float32 rounding on disk
    centroids = np.clip(centroids, grid[owner] * PATCH_SIZE_40X, (grid[owner] + 1) * PATCH_SIZE_40X - 1e-3)
    cell_emb = rng.normal(spec.delta * spec.sigma * label, spec.sigma, size=(m, spec.d_cell))
    cell_class = rng.integers(0, N_CELL_CLASSES, size=m)
    return SlideBag(slide_id, patch_emb, grid, cell_emb, centroids, cell_class, int(label))


def synth_slides(spec, seed):
    rng = substream(seed, "synth", 1)
    y = planted_classes(spec.n_slides, spec.classical_fraction, rng)
    return [synth_slide(f"S{i + 1:04d}", y[i], spec, rng) for i in range(spec.n_slides)]


def synth_expression(spec, seed, y=None):
    """TPM matrix with basal genes raised in basal samples, classical genes
    raised in classical samples and GATA6 high in classical samples."""
    rng = substream(seed, "synth", 2)
    n = spec.n_expression
    if y is None:
        y = planted_classes(n, spec.classical_fraction, rng)
    classical = builtin_gene_set("moffitt_classical").genes
    basal = builtin_gene_set("moffitt_basal").genes
    ddr = builtin_gene_set("ddr6").genes
    fillers = tuple(f"GENE{i:04d}" for i in range(spec.n_filler_genes))
    genes = classical + basal + ("GATA6",) + ddr + fillers

    base = rng.uniform(2.0, 8.0, size=len(genes))
    log_expr = base[:, None] + rng.normal(0.0, 0.7, size=(len(genes), n))
    nc, nb = len(classical), len(basal)
    log_expr[:nc] += spec.classical_effect * (y == 0)
    log_expr[nc : nc + nb] += spec.basal_effect * (y == 1)
    tpm = np.exp2(log_expr)
    tpm = tpm / tpm.sum(axis=0) * 1e6
    gata6_center = np.where(y == 0, spec.gata6_classical_tpm, spec.gata6_basal_tpm)
    tpm[nc + nb] = gata6_center * np.exp(rng.normal(0.0, 0.25, size=n))
    samples = tuple(f"S{i + 1:04d}" for i in range(n))
    return ExpressionMatrix(genes, samples, tpm, Mode.TPM), y


def synth_survival(y, spec, seed, stream=3, sample_ids=None):
    """Exponential survival with hazard ``hazard_ratio`` times higher for basal
    (``y == 1``); independent exponential censoring at the target fraction."""
    rng = substream(seed, "synth", stream)
    y = np.asarray(y)
    rate_c = np.log(2.0) / spec.classical_median_months
    rate = np.where(y == 1, rate_c * spec.hazard_ratio, rate_c)
    t_event = rng.exponential(1.0 / rate)
    if spec.censor_fraction > 0:
        # P(C < T) = mu / (rate + mu) = censor_fraction
        mu = rate * spec.censor_fraction / (1.0 - spec.censor_fraction)
        t_cens = rng.exponential(1.0 / mu)
    else:
        t_cens = np.full(y.shape, np.inf)
    event = (t_event <= t_cens).astype(np.int64)
    time = np.maximum(np.minimum(t_event, t_cens), 1e-3)
    status = np.where(rng.uniform(size=y.size) < spec.metastatic_fraction, "metastatic", "resected")
    ids = sample_ids or [f"S{i + 1:04d}" for i in range(y.size)]
    return [
        ClinicalRecord(sid, float(t), int(e), "SYNTH", str(s))
        for sid, t, e, s in zip(ids, time, event, status)
    ]


def write_synth_cohort(spec, seed, out_dir, packed=False):
    """Write a full synthetic cohort under ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {out}: {exc}") from exc

    slides = synth_slides(spec, seed)
    y_expr = planted_classes(spec.n_expression, spec.classical_fraction, substream(seed, "synth", 0))
    y_expr[: spec.n_slides] = [b.label for b in slides]
    matrix, y_expr = synth_expression(spec, seed, y=y_expr)
    clinical = synth_survival(y_expr, spec, seed, sample_ids=list(matrix.sample_ids))

    write_matrix_tsv(matrix, out / "expression_tpm.tsv")
    lengths = substream(seed, "synth", 4).uniform(0.5, 5.0, size=len(matrix.gene_ids))
    counts = np.round(matrix.values * lengths[:, None] / 50.0)
    write_matrix_tsv(ExpressionMatrix(matrix.gene_ids, matrix.sample_ids, counts, Mode.COUNTS), out / "counts.tsv")
    write_tsv(out / "gene_lengths.tsv", ("gene", "length_kb"), zip(matrix.gene_ids, map(float, lengths)))
    for name in ("moffitt_classical", "moffitt_basal", "ddr6"):
        write_gmt([builtin_gene_set(name)], out / f"{name}.gmt")

    status = {r.sample_id: r.disease_status for r in clinical}
    entries = []
    for bag in slides:
        rel = Path("slides") / bag.slide_id
        write_slide_bundle(bag, out / rel, packed=packed)
        entries.append(
            ManifestEntry(bag.slide_id, rel, "BASAL" if bag.label else "CLASSICAL", "SYNTH", status[bag.slide_id])
        )
    write_manifest(entries, out / "manifest.tsv")
    write_clinical_csv(clinical, out / "clinical.csv")
    write_tsv(
        out / "truth.tsv",
        ("sample_id", "planted_label"),
        [(s, "BASAL" if c else "CLASSICAL") for s, c in zip(matrix.sample_ids, y_expr)],
    )
    spec_dict = asdict(spec)
    spec_dict["seed"] = int(seed)
    write_json(out / "synth_spec.json", spec_dict)
    return out
