"""Command-line entry point: ``pdac-subtype <command> [options]``."""

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import load_config
from .evaluation import (
    PredictionRecord,
    aggregate_folds,
    confidence_band,
    confusion_metrics,
    decision_margin,
    filter_high_confidence,
)
from .exceptions import DataIOError, InputValidationError, PdacSubtypeError
from .expression import (
    CollisionPolicy,
    Mode as ExprMode,
    counts_to_tpm,
    map_gene_ids,
    read_gmt,
    read_id_map,
    read_lengths_tsv,
    read_matrix_tsv,
)
from .io import (
    LABEL_CODES,
    read_clinical_csv,
    read_manifest,
    read_slide_bundle,
    read_tsv,
    write_json,
    write_tsv,
)
from .model.network import export_attention
from .model.params import load_checkpoint, save_checkpoint
from .model.training import TrainConfig, best_fold, cross_validate, predict_probs
from .subtyping import Label, SubtypeLabeler, label_summary, read_labels_tsv, write_labels_tsv
from .survival import CensoringMode, SurvivalRecord, km_estimate, logrank_test, median_survival
from .synth import SynthSpec, write_synth_cohort

logger = logging.getLogger("pdac_subtype")

CALLED = (Label.BASAL.value, Label.CLASSICAL.value)


# --- helpers ----------------------------------------------------------------------


def _out_dir(args):
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create {out}: {exc}") from exc
    return out


def _sha256(path):
    try:
        return hashlib.sha256(Path(path).read_bytes()).hexdigest()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc


def _train_config(cfg):
    return TrainConfig(
        mode=cfg.mode,
        max_epochs=cfg.max_epochs,
        patience=cfg.patience,
        seed=cfg.seed,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        d_att=cfg.d_att,
        lambda_mode=cfg.lambda_mode,
        cls_position=cfg.cls_position,
        pos_enc=cfg.pos_enc,
        threshold=cfg.threshold,
        early_stopping=cfg.early_stopping,
    )


def _label_map(path):
    """slide/sample id -> label string, from a labels table."""
    return {r.sample_id: r.label.value for r in read_labels_tsv(path)}


def _called_entries(entries, labels):
    """Split manifest entries into (kept with 0/1 code, excluded audit rows)."""
    kept, excluded = [], []
    for e in entries:
        lab = labels.get(e.slide_id, "NA") if labels is not None else e.label
        if lab in CALLED:
            kept.append((e, LABEL_CODES[lab]))
        else:
            excluded.append((e.slide_id, lab))
    return kept, excluded


def _load_bags(kept):
    return [read_slide_bundle(e.directory, e.slide_id, code) for e, code in kept]


# --- commands -----------------------------------------------------------------------


def cmd_synth(args, cfg, synth_over):
    spec = SynthSpec(**synth_over)
    out = _out_dir(args)
    write_synth_cohort(spec, cfg.seed, out, packed=args.packed)
    write_json(out / "run_config.json", {"command": "synth", "config": cfg.to_dict()})
    logger.info("wrote synthetic cohort (%d slides) to %s", spec.n_slides, out)


def cmd_label(args, cfg, _):
    mode = ExprMode(args.input_mode)
    m = read_matrix_tsv(args.expression, mode=mode)
    if args.id_map:
        m = map_gene_ids(m, read_id_map(args.id_map), CollisionPolicy(args.collision), drop_unmapped=True)
    if mode is ExprMode.COUNTS:
        if not args.lengths:
            raise InputValidationError("--input-mode counts requires --lengths")
        m = counts_to_tpm(m, read_lengths_tsv(args.lengths))
    elif mode is not ExprMode.TPM:
        raise InputValidationError("labeling needs TPM or counts input")

    def one_set(path):
        return None if path is None else read_gmt(path)[0]

    ddr = False if args.no_ddr else one_set(args.ddr_gmt)
    labeler = SubtypeLabeler(
        classical=one_set(args.classical_gmt),
        basal=one_set(args.basal_gmt),
        ddr=ddr,
        alpha=cfg.alpha,
        normalize_es=cfg.normalize_es,
        gata6_cutoffs=cfg.gata6_cutoffs,
        ddr_log=cfg.ddr_log,
        z_threshold=cfg.z_threshold,
    )
    groups = None
    if cfg.zscore_by:
        if not args.clinical:
            raise InputValidationError("zscore_by needs --clinical")
        clinical = read_clinical_csv(args.clinical)
        if cfg.zscore_by not in ("cohort", "disease_status"):
            raise InputValidationError("zscore_by must be cohort|disease_status")
        groups = {r.sample_id: getattr(r, cfg.zscore_by) for r in clinical}
    records = labeler.fit_transform(m, groups=groups)

    out = _out_dir(args)
    write_labels_tsv(records, out / "labels.tsv")
    summary = label_summary(records)
    summary["gata6_cutoffs"] = None if labeler.cutoffs_ is None else [labeler.cutoffs_.lower, labeler.cutoffs_.upper]
    summary["score_stats"] = {g: {"mean": mu, "sd": sd} for g, (mu, sd) in labeler.score_stats_.items()}
    summary["config"] = cfg.to_dict()
    write_json(out / "label_summary.json", summary)
    logger.info("labels: %s", summary["counts"])


def cmd_train(args, cfg, _):
    entries = read_manifest(args.manifest)
    labels = _label_map(args.labels) if args.labels else None
    kept, excluded = _called_entries(entries, labels)
    if not kept:
        raise InputValidationError("no BASAL/CLASSICAL slides to train on")
    # only called slides are ever read from disk
    bags = _load_bags(kept)
    tc = _train_config(cfg)
    results = cross_validate(bags, k=cfg.k_folds, config=tc, n_jobs=cfg.n_jobs)

    out = _out_dir(args)
    roles = {}
    for r in results:
        for sid in r.train_ids:
            roles.setdefault(sid, []).append(f"fit{r.fold}")
        for sid in r.stop_ids:
            roles.setdefault(sid, []).append(f"stop{r.fold}")
        for sid in r.val_ids:
            roles.setdefault(sid, []).append(f"val{r.fold}")
    audit = [(e.slide_id, "BASAL" if c else "CLASSICAL", "consumed", ",".join(roles[e.slide_id])) for e, c in kept]
    audit += [(sid, lab, "excluded", "") for sid, lab in excluded]
    write_tsv(out / "train_audit.tsv", ("slide_id", "label", "status", "roles"), audit)

    folds = []
    hashes = {}
    for r in results:
        meta = {"fold": r.fold, "train_config": tc.to_dict(), "val_auc": r.report.auc}
        name = f"fold_{r.fold}.ckpt"
        hashes[name] = save_checkpoint(out / name, r.params, meta)
        folds.append({
            "fold": r.fold,
            "report": r.report.to_dict(),
            "n_fit": len(r.train_ids),
            "n_stop": len(r.stop_ids),
            "n_val": len(r.val_ids),
            "epochs": len(r.history),
            "best_epoch": next(h["epoch"] for h in r.history if h["best"]),
            "history": r.history,
        })
    best = best_fold(results)
    hashes["best_model.ckpt"] = save_checkpoint(
        out / "best_model.ckpt", best.params, {"fold": best.fold, "train_config": tc.to_dict(), "val_auc": best.report.auc}
    )
    preds = sorted((p for r in results for p in r.predictions), key=lambda p: p.sample_id)
    write_tsv(out / "oof_predictions.tsv", ("sample_id", "truth", "prob", "fold"),
              [(p.sample_id, p.truth, p.prob, r.fold) for r in results for p in r.predictions])
    metrics = {
        "mode": cfg.mode,
        "seed": cfg.seed,
        "k_folds": cfg.k_folds,
        "thresholds": {"classification": cfg.threshold, "confidence": [cfg.confidence_lo, cfg.confidence_hi]},
        "folds": folds,
        "aggregate": aggregate_folds([r.report for r in results]),
        "pooled_oof": confusion_metrics(preds, threshold=cfg.threshold).to_dict(),
        "best_fold": best.fold,
        "n_consumed": len(kept),
        "n_excluded": len(excluded),
        "checkpoint_sha256": hashes,
        "config": cfg.to_dict(),
    }
    write_json(out / "metrics.json", metrics)
    agg = metrics["aggregate"]["auc"]
    logger.info("mean validation AUC %.4f +/- %.4f", agg["mean"], agg["sd"])


def _checkpoint_config(header, cfg, mode_flag):
    tc = TrainConfig(**header["train_config"])
    if mode_flag is not None and mode_flag != tc.mode:
        raise InputValidationError(f"checkpoint was trained in mode {tc.mode!r}, not {mode_flag!r}")
    return replace(tc, threshold=cfg.threshold)


def cmd_evaluate(args, cfg, _):
    before = _sha256(args.checkpoint)
    params, header = load_checkpoint(args.checkpoint)
    params.freeze()
    tc = _checkpoint_config(header, cfg, args.mode)
    entries = read_manifest(args.manifest)
    labels = _label_map(args.labels) if args.labels else None
    kept, excluded = _called_entries(entries, labels)
    if not kept:
        raise InputValidationError("no BASAL/CLASSICAL slides to evaluate")
    bags = _load_bags(kept)
    probs = predict_probs(bags, params, tc)
    after = _sha256(args.checkpoint)
    if after != before:
        raise PdacSubtypeError("checkpoint changed during evaluation")

    records = [PredictionRecord(b.slide_id, b.label, float(p)) for b, p in zip(bags, probs)]
    lo, hi = cfg.confidence_lo, cfg.confidence_hi
    report = confusion_metrics(records, threshold=cfg.threshold)
    high, frac = filter_high_confidence(records, lo, hi)
    try:
        high_report = confusion_metrics(high, threshold=cfg.threshold).to_dict() if high else None
    except PdacSubtypeError as exc:
        high_report = {"error": str(exc)}
    margin = decision_margin(records, cfg.threshold)

    out = _out_dir(args)
    write_tsv(
        out / "concordance.tsv",
        ("sample_id", "truth", "prob", "pred", "margin", "confidence"),
        [
            (r.sample_id, "BASAL" if r.truth else "CLASSICAL", r.prob,
             "BASAL" if r.prob >= cfg.threshold else "CLASSICAL", float(m), confidence_band(r.prob, lo, hi))
            for r, m in zip(records, margin.margins)
        ],
    )
    write_json(out / "metrics.json", {
        "mode": tc.mode,
        "checkpoint_sha256": before,
        "report": report.to_dict(),
        "high_confidence": {"fraction": frac, "n": len(high), "report": high_report},
        "margin": {"median_correct": margin.median_correct, "median_incorrect": margin.median_incorrect},
        "n_excluded": len(excluded),
        "thresholds": {"classification": cfg.threshold, "confidence": [lo, hi]},
        "config": cfg.to_dict(),
    })
    logger.info("AUC %.4f accuracy %.4f", report.auc, report.accuracy)


def _prediction_groups(path, threshold):
    header, rows = read_tsv(path)
    try:
        i_sid, i_prob = header.index("sample_id"), header.index("prob")
    except ValueError:
        raise InputValidationError(f"{path}: needs sample_id and prob columns") from None
    return {r[i_sid]: "BASAL" if float(r[i_prob]) >= threshold else "CLASSICAL" for r in rows}


def _km_rows(curve):
    return [(float(t), int(n), int(d), float(s), float(lo), float(hi))
            for t, n, d, s, lo, hi in zip(curve.times, curve.n_at_risk, curve.n_events,
                                          curve.survival, curve.ci_low, curve.ci_high)]


def _median_dict(curve):
    med = median_survival(curve)
    return {"median": med.median, "ci_low": med.ci_low, "ci_high": med.ci_high, "n": curve.n}


def cmd_survival(args, cfg, _):
    clinical = read_clinical_csv(args.clinical)
    sources = {}
    if args.labels:
        sources["rnaseq"] = {k: v for k, v in _label_map(args.labels).items() if v in CALLED}
    if args.predictions:
        sources["model"] = _prediction_groups(args.predictions, cfg.threshold)
    if not sources:
        raise InputValidationError("survival needs --labels and/or --predictions")
    modes = (["standard", "paper_replica"] if cfg.censoring_mode == "both" else [cfg.censoring_mode])

    out = _out_dir(args)
    analyses = []
    for source, groups in sources.items():
        for subset in ("all", "metastatic"):
            recs = [
                SurvivalRecord(c.sample_id, c.os_months, c.event, groups[c.sample_id])
                for c in clinical
                if c.sample_id in groups and (subset == "all" or c.disease_status == "metastatic")
            ]
            by = {g: [r for r in recs if r.group == g] for g in CALLED}
            for g, rs in by.items():
                if not rs:
                    raise InputValidationError(f"{source}/{subset}: group {g} is empty")
            for mode in modes:
                tag = f"{source}_{subset}_{mode}"
                entry = {"source": source, "subset": subset, "censoring_mode": mode, "groups": {}}
                for g, rs in by.items():
                    curve = km_estimate(rs, CensoringMode(mode))
                    write_tsv(out / f"km_{tag}_{g}.tsv",
                              ("time", "n_at_risk", "n_events", "survival", "ci_low", "ci_high"), _km_rows(curve))
                    entry["groups"][g] = _median_dict(curve)
                lr = logrank_test(by["BASAL"], by["CLASSICAL"], CensoringMode(mode))
                entry.update(chi2=lr.chi2, pvalue=lr.pvalue, observed_basal=lr.observed_a,
                             expected_basal=lr.expected_a, variance=lr.variance)
                analyses.append(entry)
    write_json(out / "logrank.json", {"analyses": analyses, "config": cfg.to_dict()})
    for a in analyses:
        logger.info("%s/%s/%s: chi2 %.3f p %.4g", a["source"], a["subset"], a["censoring_mode"], a["chi2"], a["pvalue"])


def cmd_attention(args, cfg, _):
    params, header = load_checkpoint(args.checkpoint)
    params.freeze()
    tc = _checkpoint_config(header, cfg, args.mode)
    entries = {e.slide_id: e for e in read_manifest(args.manifest)}
    ids = args.slide or sorted(entries)
    out = _out_dir(args)
    rows = []
    for sid in ids:
        if sid not in entries:
            raise InputValidationError(f"slide {sid!r} not in manifest")
        bag = read_slide_bundle(entries[sid].directory, sid)
        rows += [(sid, *r) for r in export_attention(bag, params, config=tc.model_config())]
    write_tsv(out / "attention.tsv", ("slide_id", "gx", "gy", "weight", "mask"), rows)
    write_json(out / "attention_config.json", {"mode": tc.mode, "slides": list(ids), "config": cfg.to_dict()})


# --- argument parsing -------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="flat JSON config; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mode", choices=("pansubnet", "attmil"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="pdac-subtype", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic cohort")
    _common(p)
    p.add_argument("--n-slides", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--d-cell", type=int)
    p.add_argument("--d-patch", type=int)
    p.add_argument("--n-expression", type=int)
    p.add_argument("--packed", action="store_true", help="also write packed float32 slide bundles")

    p = sub.add_parser("label", help="subtype labels from expression")
    _common(p)
    p.add_argument("--expression", required=True)
    p.add_argument("--input-mode", choices=("tpm", "counts"), default="tpm")
    p.add_argument("--lengths", help="gene<TAB>length_kb, for counts input")
    p.add_argument("--id-map", help="source_id<TAB>symbol")
    p.add_argument("--collision", choices=[c.value for c in CollisionPolicy], default="sum")
    p.add_argument("--classical-gmt")
    p.add_argument("--basal-gmt")
    p.add_argument("--ddr-gmt")
    p.add_argument("--no-ddr", action="store_true")
    p.add_argument("--gata6-cutoffs", type=float, nargs=2, metavar=("LOWER", "UPPER"))
    p.add_argument("--alpha", type=float)
    p.add_argument("--clinical", help="clinical.csv, for --zscore-by")
    p.add_argument("--zscore-by", choices=("cohort", "disease_status"))

    p = sub.add_parser("train", help="k-fold cross-validated training")
    _common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", help="labels.tsv; defaults to manifest labels")
    p.add_argument("--k-folds", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--n-jobs", type=int)

    p = sub.add_parser("evaluate", help="zero-shot evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels")

    p = sub.add_parser("survival", help="Kaplan-Meier and log-rank by subtype")
    _common(p)
    p.add_argument("--clinical", required=True)
    p.add_argument("--labels")
    p.add_argument("--predictions", help="concordance.tsv from evaluate")
    p.add_argument("--censoring-mode", choices=("standard", "paper_replica", "both"))

    p = sub.add_parser("attention", help="export per-patch attention weights")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--slide", action="append", help="slide id (repeatable); default all")
    return ap


COMMANDS = {
    "synth": cmd_synth,
    "label": cmd_label,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "survival": cmd_survival,
    "attention": cmd_attention,
}

# flag name -> config key, for flags that feed the config
_CONFIG_FLAGS = (
    "seed", "n_slides", "delta", "d_cell", "d_patch", "n_expression", "gata6_cutoffs", "alpha",
    "zscore_by", "k_folds", "max_epochs", "patience", "lr", "weight_decay", "n_jobs", "censoring_mode",
)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {k: getattr(args, k, None) for k in _CONFIG_FLAGS}
    # evaluate/attention take the mode from the checkpoint; --mode there is a consistency check
    if args.command not in ("evaluate", "attention"):
        overrides["mode"] = args.mode
    try:
        cfg, synth_over = load_config(args.config, overrides)
        if args.command != "synth" and synth_over:
            logger.warning("ignoring synthetic-cohort keys for %s: %s", args.command, sorted(synth_over))
        COMMANDS[args.command](args, cfg, synth_over)
    except PdacSubtypeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
