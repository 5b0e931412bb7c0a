"""Batch command-line interface.

Subcommands cover the full pipeline: corpus synthesis, preprocessing, the
contamination audit, augmentation, training, cross-validation, transfer,
evaluation, saliency and the shuffled-target baseline.  Every run writes a
manifest of produced files and a log with the resolved configuration hash;
a lock file prevents two writers on one output directory.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AutodiffError
from .augment import AugmentError
from .contamination import (ContaminationError, block_surrogate_test,
                            bonferroni_report, correlation_matrix,
                            format_table, restrict_band)
from .corpus import (Corpus, CorpusError, GridGeometry, SynthConfig,
                     generate_synthetic_corpus, load_corpus, make_folds,
                     write_corpus)
from .evaluation import EvaluationError, aggregate_saliency, smoothgrad
from .models import ModelError, SpeechDecoder
from .sigproc import FeatureStats, SigprocError, apply_zscore, spectrogram
from .tensorfile import TensorFileError, read_tensor, write_tensor
from .training import (EpochRecord, TargetNorm, TrainConfig, TrainingError,
                       evaluate_model, history_to_csv, preprocess_corpus,
                       run_cv, run_transfer, select_trials,
                       shuffled_target_baseline, summary_table, train_model)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

KNOWN_SECTIONS = {"synth", "train", "paths", "contam", "saliency", "baseline",
                  "augment", "plot"}


def load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p) as f:
            cfg = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {p}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    unknown = set(cfg) - KNOWN_SECTIONS
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section, value in cfg.items():
        if not isinstance(value, dict):
            raise ConfigError(f"config section {section!r} must be an object")
    return cfg


def _build_dataclass(cls, data: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError, CorpusError, TrainingError) as e:
        raise ConfigError(f"invalid [{section}] config: {e}") from e


def synth_config(cfg: dict, seed: int | None) -> SynthConfig:
    data = dict(cfg.get("synth", {}))
    if "grid" in data:
        data["grid"] = _build_dataclass(GridGeometry, dict(data["grid"]),
                                        "synth.grid")
    for key in ("frames_range", "vowel_inventory", "informative_channels"):
        if key in data and data[key] is not None:
            data[key] = tuple(data[key])
    if seed is not None:
        data["seed"] = seed
    return _build_dataclass(SynthConfig, data, "synth")


def train_config(cfg: dict, seed: int | None) -> TrainConfig:
    data = dict(cfg.get("train", {}))
    if "ratios" in data:
        data["ratios"] = tuple(data["ratios"])
    if seed is not None:
        data["seed"] = seed
    return _build_dataclass(TrainConfig, data, "train")


def resolve_path(cfg: dict, key: str) -> Path:
    paths = cfg.get("paths", {})
    if key not in paths:
        raise ConfigError(f"config is missing paths.{key}")
    return Path(paths[key])


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# Output directory plumbing
# ---------------------------------------------------------------------------

class OutputLock:
    """Exclusive lock on an output directory via an O_EXCL sentinel file."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / ".lock"
        self.fd: int | None = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(
                f"output directory is locked by another run: {self.path}")
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)


def finish_run(out_dir: Path, subcommand: str, resolved: dict,
               produced: list[Path]) -> None:
    digest = config_hash(resolved)
    rel = sorted(str(p.relative_to(out_dir)) for p in produced)
    with open(out_dir / "run_manifest.json", "w") as f:
        json.dump({"subcommand": subcommand, "config_hash": digest,
                   "files": rel}, f, indent=1, sort_keys=True)
    with open(out_dir / "run.log", "w") as f:
        f.write(f"subcommand: {subcommand}\n")
        f.write(f"config_hash: {digest}\n")
        f.write(f"resolved_config: {json.dumps(resolved, sort_keys=True, default=str)}\n")
        f.write(f"files_written: {len(rel)}\n")


def _load_prepared(cfg: dict, corpus: Corpus):
    cache = cfg.get("paths", {}).get("features")
    return preprocess_corpus(corpus, cache_dir=cache)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> Path:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _write_json(path: Path, payload) -> Path:
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    return path


def _confusion_csv(path: Path, cm) -> Path:
    rows = [[label] + [int(c) for c in cm.counts[i]]
            for i, label in enumerate(cm.classes)]
    return _write_csv(path, ["true\\pred"] + list(cm.classes), rows)


def _save_norms(out_dir: Path, stats: FeatureStats, norm: TargetNorm) -> list[Path]:
    files = []
    for name, arr in (("feature_mean", stats.mean), ("feature_std", stats.std),
                      ("target_mean", norm.mean), ("target_std", norm.std)):
        p = out_dir / f"{name}.bin"
        write_tensor(p, arr)
        files.append(p)
    return files


def _load_norms(ckpt_dir: Path) -> tuple[FeatureStats, TargetNorm]:
    try:
        stats = FeatureStats(
            mean=read_tensor(ckpt_dir / "feature_mean.bin").astype(np.float64),
            std=read_tensor(ckpt_dir / "feature_std.bin").astype(np.float64))
        norm = TargetNorm(
            mean=read_tensor(ckpt_dir / "target_mean.bin").astype(np.float64),
            std=read_tensor(ckpt_dir / "target_std.bin").astype(np.float64))
    except FileNotFoundError as e:
        raise DataError(
            f"missing normalization tensors in {ckpt_dir}; run `train` first"
        ) from e
    return stats, norm


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    scfg = synth_config(cfg, args.seed)
    corpus = generate_synthetic_corpus(scfg)
    corpus_dir = out / "corpus"
    manifest = write_corpus(corpus, corpus_dir)
    produced = sorted(corpus_dir.iterdir())
    return {"synth": dataclasses.asdict(scfg)}, produced + [manifest]


def cmd_preprocess(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    corpus_path = resolve_path(cfg, "corpus")
    corpus = load_corpus(corpus_path)
    feat_dir = out / "features"
    prepared = preprocess_corpus(corpus, cache_dir=feat_dir)
    listing = {t.trial_id: f"{t.trial_id}.feat" for t in prepared}
    index = _write_json(out / "features_index.json", listing)
    return ({"paths": {"corpus": str(corpus_path)}},
            sorted(feat_dir.iterdir()) + [index])


def cmd_contam(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    from .plots import plot_contamination_matrix

    corpus_path = resolve_path(cfg, "corpus")
    corpus = load_corpus(corpus_path)
    section = dict(cfg.get("contam", {}))
    unknown = set(section) - {"n_surrogates", "alpha"}
    if unknown:
        raise ConfigError(f"unknown keys in [contam]: {sorted(unknown)}")
    n_surrogates = int(section.get("n_surrogates", 500))
    alpha = float(section.get("alpha", 0.05))
    seed = args.seed if args.seed is not None else 0

    blocks: dict[str, list] = {}
    for t in corpus.trials:
        if t.audio_signal is None:
            raise DataError(
                f"trial {t.trial_id} has no recorded audio signal; "
                "generate the corpus with with_audio_signal=true")
        blocks.setdefault(t.block_id, []).append(t)

    fs = corpus.sample_rate_neural
    reports = []
    mean_matrix = None
    for k, block_id in enumerate(sorted(blocks)):
        audio_rows, neural_rows = [], None
        for t in blocks[block_id]:
            spec_a, freqs = spectrogram(np.asarray(t.audio_signal, dtype=np.float64), fs)
            audio_rows.append(restrict_band(spec_a, freqs))
            per_channel = []
            for c in range(t.raw_neural.shape[0]):
                spec_n, freqs_n = spectrogram(
                    np.asarray(t.raw_neural[c], dtype=np.float64), fs)
                per_channel.append(restrict_band(spec_n, freqs_n))
            if neural_rows is None:
                neural_rows = [[p] for p in per_channel]
            else:
                for c, p in enumerate(per_channel):
                    neural_rows[c].append(p)
        audio_cat = np.concatenate(audio_rows, axis=1)
        neural_cat = [np.concatenate(chunks, axis=1) for chunks in neural_rows]
        reports.append(block_surrogate_test(audio_cat, neural_cat,
                                            n_surrogates, seed + k, block_id))
        if mean_matrix is None:
            mean_matrix = np.mean(
                [correlation_matrix(audio_cat, nc) for nc in neural_cat], axis=0)
    reports = bonferroni_report(reports, alpha=alpha)

    table_path = out / "contamination.txt"
    table_path.write_text(format_table(reports) + "\n")
    json_path = _write_json(out / "contamination.json",
                            [dataclasses.asdict(r) for r in reports])
    fig_path = plot_contamination_matrix(mean_matrix, out / "contamination_matrix.png")
    resolved = {"paths": {"corpus": str(corpus_path)},
                "contam": {"n_surrogates": n_surrogates, "alpha": alpha},
                "seed": seed}
    return resolved, [table_path, json_path, fig_path]


def cmd_augment(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    from .training import augment_prepared

    corpus_path = resolve_path(cfg, "corpus")
    corpus = load_corpus(corpus_path)
    section = dict(cfg.get("augment", {}))
    unknown = set(section) - {"factor"}
    if unknown:
        raise ConfigError(f"unknown keys in [augment]: {sorted(unknown)}")
    factor = int(section.get("factor", 4))
    seed = args.seed if args.seed is not None else 0
    prepared = _load_prepared(cfg, corpus)
    augmented = augment_prepared(prepared, factor, seed)
    aug_dir = out / "augmented"
    aug_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    entries = []
    for t in augmented:
        if not t.is_augmented:
            continue
        feat_file = aug_dir / f"{t.trial_id}.feat"
        target_file = aug_dir / f"{t.trial_id}.target.bin"
        write_tensor(feat_file, t.features)
        write_tensor(target_file, t.target)
        produced += [feat_file, target_file]
        entries.append({"trial_id": t.trial_id, "source_trial": t.source_trial,
                        "audio_donor_trial": t.audio_donor_trial,
                        "sentence_id": t.sentence_id})
    index = _write_json(out / "augmented_index.json", entries)
    resolved = {"paths": {"corpus": str(corpus_path)},
                "augment": {"factor": factor}, "seed": seed}
    return resolved, produced + [index]


def cmd_train(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    from .plots import plot_history

    corpus_path = resolve_path(cfg, "corpus")
    corpus = load_corpus(corpus_path)
    tcfg = train_config(cfg, args.seed)
    prepared = _load_prepared(cfg, corpus)
    folds = make_folds(corpus, tcfg.n_folds, tcfg.ratios, tcfg.seed,
                       tcfg.group_by_sentence)
    fold = folds[args.fold]
    result = train_model(tcfg,
                         select_trials(prepared, fold.train_ids),
                         select_trials(prepared, fold.validation_ids),
                         grid=corpus.grid)
    ckpt_dir = out / "checkpoint"
    result.model.save_checkpoint(ckpt_dir)
    produced = sorted(ckpt_dir.iterdir())
    produced += _save_norms(ckpt_dir, result.stats, result.target_norm)
    history_path = out / "history.csv"
    history_path.write_text(history_to_csv(result.history))
    fig_path = plot_history(result.history, out / "history.png")
    resolved = {"paths": {"corpus": str(corpus_path)},
                "train": dataclasses.asdict(tcfg), "fold": args.fold}
    return resolved, produced + [history_path, fig_path]


def cmd_evaluate(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    from .plots import plot_confusion

    corpus_path = resolve_path(cfg, "corpus")
    ckpt_dir = resolve_path(cfg, "checkpoint")
    corpus = load_corpus(corpus_path)
    tcfg = train_config(cfg, args.seed)
    ckpt_file = ckpt_dir / "checkpoint.json"
    if not ckpt_file.exists():
        raise DataError(f"missing checkpoint: {ckpt_file}; run `train` first")
    model = SpeechDecoder.load_checkpoint(ckpt_file)
    stats, norm = _load_norms(ckpt_dir)
    prepared = _load_prepared(cfg, corpus)
    fold = make_folds(corpus, tcfg.n_folds, tcfg.ratios, tcfg.seed,
                      tcfg.group_by_sentence)[args.fold]
    test_set = select_trials(prepared, fold.test_ids)
    ev = evaluate_model(model, test_set, prepared, stats, norm,
                        tcfg.batch_size, tuple(sorted(corpus.vowel_inventory)))
    rows = [[tid, f"{p:.6f}", f"{pm:.6f}", f"{pa:.6f}", f"{pf:.6f}", f"{m:.6f}"]
            for tid, p, pm, pa, pf, m in zip(
                ev.trial_ids, ev.pcc_all, ev.pcc_mel, ev.pcc_ap, ev.pcc_f0,
                ev.mcd_scores)]
    metrics_csv = _write_csv(out / "metrics.csv",
                             ["trial_id", "pcc_all", "pcc_mel", "pcc_ap",
                              "pcc_f0", "mcd"], rows)
    summary = _write_json(out / "metrics.json", {
        "mean_pcc": ev.mean_pcc, "mean_mcd": ev.mean_mcd,
        "macro_f1": ev.macro_f1, "n_trials": len(ev.trial_ids)})
    conf_csv = _confusion_csv(out / "confusion.csv", ev.confusion)
    conf_png = plot_confusion(ev.confusion, out / "confusion.png")
    resolved = {"paths": {"corpus": str(corpus_path), "checkpoint": str(ckpt_dir)},
                "train": dataclasses.asdict(tcfg), "fold": args.fold}
    return resolved, [metrics_csv, summary, conf_csv, conf_png]


def cmd_cv(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    from .plots import plot_confusion

    corpus_path = resolve_path(cfg, "corpus")
    corpus = load_corpus(corpus_path)
    tcfg = train_config(cfg, args.seed)
    prepared = _load_prepared(cfg, corpus)
    result = run_cv(tcfg, corpus, prepared=prepared)
    row = result.summary_row()
    summary_json = _write_json(out / "cv_summary.json", {
        "summary": row,
        "folds": [{
            "fold": f.fold_index,
            "mean_pcc": f.eval_result.mean_pcc,
            "mean_mcd": f.eval_result.mean_mcd,
            "macro_f1": f.eval_result.macro_f1,
            "best_val_mcd": f.best_val_mcd,
        } for f in result.folds],
    })
    table_path = out / "cv_summary.txt"
    table_path.write_text(summary_table([row]) + "\n")
    rows = []
    for f in result.folds:
        ev = f.eval_result
        for tid, p, m in zip(ev.trial_ids, ev.pcc_all, ev.mcd_scores):
            rows.append([f.fold_index, tid, f"{p:.6f}", f"{m:.6f}"])
    sentences_csv = _write_csv(out / "cv_sentences.csv",
                               ["fold", "trial_id", "pcc_all", "mcd"], rows)
    conf_csv = _confusion_csv(out / "cv_confusion.csv", result.confusion)
    conf_png = plot_confusion(result.confusion, out / "cv_confusion.png")
    resolved = {"paths": {"corpus": str(corpus_path)},
                "train": dataclasses.asdict(tcfg)}
    return resolved, [summary_json, table_path, sentences_csv, conf_csv, conf_png]


def cmd_transfer(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    source_path = resolve_path(cfg, "source_corpus")
    target_path = resolve_path(cfg, "target_corpus")
    source = load_corpus(source_path)
    target = load_corpus(target_path)
    tcfg = train_config(cfg, args.seed)
    cv, source_result = run_transfer(tcfg, source, target)
    row = cv.summary_row()
    summary_json = _write_json(out / "transfer_summary.json", {
        "summary": row,
        "source_best_val_mcd": source_result.best_val_mcd,
        "folds": [{
            "fold": f.fold_index,
            "mean_pcc": f.eval_result.mean_pcc,
            "mean_mcd": f.eval_result.mean_mcd,
            "macro_f1": f.eval_result.macro_f1,
        } for f in cv.folds],
    })
    table_path = out / "transfer_summary.txt"
    table_path.write_text(summary_table([row]) + "\n")
    history_path = out / "source_history.csv"
    history_path.write_text(history_to_csv(source_result.history))
    resolved = {"paths": {"source_corpus": str(source_path),
                          "target_corpus": str(target_path)},
                "train": dataclasses.asdict(tcfg)}
    return resolved, [summary_json, table_path, history_path]


def cmd_saliency(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    from .plots import plot_saliency_features, plot_saliency_grid

    corpus_path = resolve_path(cfg, "corpus")
    ckpt_dir = resolve_path(cfg, "checkpoint")
    corpus = load_corpus(corpus_path)
    section = dict(cfg.get("saliency", {}))
    unknown = set(section) - {"n_samples", "sigma", "trial_id"}
    if unknown:
        raise ConfigError(f"unknown keys in [saliency]: {sorted(unknown)}")
    n_samples = int(section.get("n_samples", 50))
    sigma = float(section.get("sigma", 0.15))
    seed = args.seed if args.seed is not None else 0

    ckpt_file = ckpt_dir / "checkpoint.json"
    if not ckpt_file.exists():
        raise DataError(f"missing checkpoint: {ckpt_file}; run `train` first")
    model = SpeechDecoder.load_checkpoint(ckpt_file)
    stats, norm = _load_norms(ckpt_dir)
    prepared = _load_prepared(cfg, corpus)
    trial_id = section.get("trial_id", prepared[0].trial_id)
    match = [t for t in prepared if t.trial_id == trial_id]
    if not match:
        raise DataError(f"trial {trial_id!r} not in corpus")
    trial = match[0]

    e = apply_zscore(trial.features, stats)
    target = norm.apply(trial.target).T  # (T, 29)
    loss_fn = make_saliency_loss(model, target)
    s_map = smoothgrad(loss_fn, e, n=n_samples, sigma=sigma, seed=seed)
    grid_vals = aggregate_saliency(s_map, "electrode",
                                   (corpus.grid.n_x, corpus.grid.n_y))
    feat_vals = aggregate_saliency(s_map, "feature")
    grid_csv = _write_csv(out / "saliency_grid.csv",
                          [f"col{j}" for j in range(grid_vals.shape[1])],
                          [[f"{v:.8g}" for v in row] for row in grid_vals])
    feat_csv = _write_csv(out / "saliency_features.csv", ["feature", "value"],
                          [[i, f"{v:.8g}"] for i, v in enumerate(feat_vals)])
    grid_png = plot_saliency_grid(grid_vals, out / "saliency_grid.png")
    feat_png = plot_saliency_features(feat_vals, out / "saliency_features.png")
    resolved = {"paths": {"corpus": str(corpus_path), "checkpoint": str(ckpt_dir)},
                "saliency": {"n_samples": n_samples, "sigma": sigma,
                             "trial_id": trial_id}, "seed": seed}
    return resolved, [grid_csv, feat_csv, grid_png, feat_png]


def make_saliency_loss(model: SpeechDecoder, target: np.ndarray):
    """Loss-of-input closure mapping a (E, 21, T) feature Tensor to the
    decoding MSE, for gradient-based saliency."""
    mask = np.ones(target.shape[0], dtype=bool)

    def loss_fn(x):
        e_dim, n_f, t_len = x.shape
        if model.variant == "vit":
            h = ad.reshape(ad.transpose(x, (2, 0, 1)), (1, t_len, e_dim * n_f))
        else:
            g = model.grid
            h = ad.reshape(x, (g.n_x, g.n_y, n_f, t_len))
            h = ad.reshape(ad.transpose(h, (3, 2, 0, 1)),
                           (1, t_len, n_f, g.n_x, g.n_y))
        pred = model.forward(h, train=False)
        return ad.masked_mse(pred, target[None], mask[None])

    return loss_fn


def cmd_baseline(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    corpus_path = resolve_path(cfg, "corpus")
    corpus = load_corpus(corpus_path)
    tcfg = train_config(cfg, args.seed)
    section = dict(cfg.get("baseline", {}))
    unknown = set(section) - {"n_runs"}
    if unknown:
        raise ConfigError(f"unknown keys in [baseline]: {sorted(unknown)}")
    n_runs = int(section.get("n_runs", 10))
    prepared = _load_prepared(cfg, corpus)
    scores = shuffled_target_baseline(tcfg, corpus, n_runs=n_runs,
                                      prepared=prepared)
    payload = _write_json(out / "baseline.json",
                          {"n_runs": n_runs, "shuffled_f1": scores})
    scores_csv = _write_csv(out / "baseline.csv", ["run", "macro_f1"],
                            [[i, f"{s:.6f}"] for i, s in enumerate(scores)])
    resolved = {"paths": {"corpus": str(corpus_path)},
                "train": dataclasses.asdict(tcfg),
                "baseline": {"n_runs": n_runs}}
    return resolved, [payload, scores_csv]


def cmd_plot(args, cfg: dict, out: Path) -> tuple[dict, list[Path]]:
    from .plots import (plot_confusion, plot_history, plot_saliency_features,
                        plot_saliency_grid)
    from .evaluation import ConfusionMatrix

    section = dict(cfg.get("plot", {}))
    known = {"history_csv", "confusion_csv", "saliency_grid_csv",
             "saliency_features_csv"}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in [plot]: {sorted(unknown)}")
    if not section:
        raise ConfigError("plot needs at least one input in [plot]")
    produced = []
    if "history_csv" in section:
        path = Path(section["history_csv"])
        if not path.exists():
            raise DataError(f"missing history file: {path}; run `train` first")
        history = []
        with open(path) as f:
            for row in csv.DictReader(f):
                history.append(EpochRecord(
                    epoch=int(row["epoch"]),
                    train_mse=float(row["train_mse"]),
                    train_clip=float(row["train_clip"]),
                    val_mcd=float(row["val_mcd"])))
        produced.append(plot_history(history, out / "history.png"))
    if "confusion_csv" in section:
        path = Path(section["confusion_csv"])
        if not path.exists():
            raise DataError(f"missing confusion file: {path}; run `evaluate` or `cv` first")
        with open(path) as f:
            rows = list(csv.reader(f))
        classes = tuple(rows[0][1:])
        counts = np.array([[int(v) for v in r[1:]] for r in rows[1:]])
        produced.append(plot_confusion(ConfusionMatrix(classes, counts),
                                       out / "confusion.png"))
    if "saliency_grid_csv" in section:
        path = Path(section["saliency_grid_csv"])
        if not path.exists():
            raise DataError(f"missing saliency file: {path}; run `saliency` first")
        values = np.genfromtxt(path, delimiter=",", skip_header=1)
        produced.append(plot_saliency_grid(values, out / "saliency_grid.png"))
    if "saliency_features_csv" in section:
        path = Path(section["saliency_features_csv"])
        if not path.exists():
            raise DataError(f"missing saliency file: {path}; run `saliency` first")
        values = np.genfromtxt(path, delimiter=",", skip_header=1)[:, 1]
        produced.append(plot_saliency_features(values, out / "saliency_features.png"))
    return {"plot": section}, produced


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "contam": cmd_contam,
    "augment": cmd_augment,
    "train": cmd_train,
    "cv": cmd_cv,
    "transfer": cmd_transfer,
    "evaluate": cmd_evaluate,
    "saliency": cmd_saliency,
    "baseline": cmd_baseline,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurodecode",
        description="Offline speech-decoding pipeline for grid-electrode "
                    "neural recordings.")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=fn.__doc__)
        p.add_argument("--config", default=None, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None,
                       help="override the configured seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--fold", type=int, default=0,
                       help="fold index for train/evaluate")
    return parser


def apply_thread_cap() -> None:
    cap = os.environ.get("NEURODECODE_THREADS")
    if cap is None:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        raise ConfigError(f"NEURODECODE_THREADS={cap!r} is not an integer")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_thread_cap()
        cfg = load_run_config(args.config)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with OutputLock(out):
            resolved, produced = COMMANDS[args.subcommand](args, cfg, out)
            resolved = dict(resolved)
            resolved.setdefault("seed", args.seed)
            resolved["subcommand"] = args.subcommand
            finish_run(out, args.subcommand, resolved, produced)
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CorpusError, TensorFileError, SigprocError,
            ContaminationError, AugmentError, EvaluationError, ModelError,
            FileNotFoundError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as e:
        if "non-finite" in str(e) or "NaN" in str(e):
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (AutodiffError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
