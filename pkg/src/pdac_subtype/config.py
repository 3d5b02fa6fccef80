"""Run configuration: a flat JSON document overridden by command-line flags."""

from dataclasses import asdict, dataclass, fields

from .exceptions import InputValidationError
from .io import read_json
from .synth import SynthSpec


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    k_folds: int = 5
    mode: str = "pansubnet"
    n_jobs: int = 1
    # model / training
    d_att: int = 128
    lambda_mode: str = "learned"
    cls_position: str = "centroid"
    pos_enc: bool = False
    lr: float = 5e-5
    weight_decay: float = 1e-5
    max_epochs: int = 100
    patience: int = 10
    early_stopping: str = "inner"
    # labeling
    alpha: float = 0.25
    normalize_es: bool = False
    z_threshold: float = 1.0
    gata6_cutoffs: tuple = None
    ddr_log: bool = True
    zscore_by: str = None
    # evaluation
    threshold: float = 0.5
    confidence_lo: float = 0.10
    confidence_hi: float = 0.90
    # survival: "standard", "paper_replica" or "both"
    censoring_mode: str = "both"

    def __post_init__(self):
        if self.k_folds < 2:
            raise InputValidationError("k_folds must be >= 2")
        if self.mode not in ("pansubnet", "attmil"):
            raise InputValidationError(f"mode must be pansubnet|attmil, got {self.mode!r}")
        if not 0.0 < self.threshold < 1.0:
            raise InputValidationError("threshold must lie in (0, 1)")
        if not 0.0 <= self.confidence_lo <= self.confidence_hi <= 1.0:
            raise InputValidationError("need 0 <= confidence_lo <= confidence_hi <= 1")
        if self.z_threshold < 0:
            raise InputValidationError("z_threshold must be >= 0")
        if self.censoring_mode not in ("standard", "paper_replica", "both"):
            raise InputValidationError("censoring_mode must be standard|paper_replica|both")
        if self.gata6_cutoffs is not None:
            lo, hi = self.gata6_cutoffs
            if lo > hi:
                raise InputValidationError("gata6_cutoffs must be (lower, upper) with lower <= upper")
            object.__setattr__(self, "gata6_cutoffs", (float(lo), float(hi)))

    def to_dict(self):
        d = asdict(self)
        if d["gata6_cutoffs"] is not None:
            d["gata6_cutoffs"] = list(d["gata6_cutoffs"])
        return d


RUN_KEYS = {f.name for f in fields(RunConfig)}
SYNTH_KEYS = {f.name for f in fields(SynthSpec)}


def load_config(path=None, overrides=None):
    """Merge a flat JSON file with ``overrides`` (``None`` values are ignored).

    Returns ``(RunConfig, synth_overrides)``; keys belonging to
    :class:`SynthSpec` are collected separately.
    """
    raw = {}
    if path is not None:
        raw = read_json(path)
        if not isinstance(raw, dict):
            raise InputValidationError(f"{path}: config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(raw) - RUN_KEYS - SYNTH_KEYS
    if unknown:
        raise InputValidationError(f"unknown config keys: {sorted(unknown)}")
    run = {k: v for k, v in raw.items() if k in RUN_KEYS}
    synth = {k: v for k, v in raw.items() if k in SYNTH_KEYS and k not in RUN_KEYS}
    for k in ("patches_per_slide", "cells_per_patch"):
        if k in synth:
            synth[k] = tuple(synth[k])
    try:
        return RunConfig(**run), synth
    except TypeError as exc:
        raise InputValidationError(str(exc)) from exc
