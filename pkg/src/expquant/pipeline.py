"""End-to-end workflows over a JSON run configuration and model directories."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import analysis, entropy, evaluation, expansion, quantizer, training
from .datagen import FeatureBatch, as_matrix, read_features, write_features
from .errors import ConfigError, DataError, InvalidInputError, NumericalFailure
from .quantizer import Codebooks, QuantizerConfig

log = logging.getLogger(__name__)

HEAD_FILE = "head.pqeh"
CODEBOOK_FILE = "codebooks.pqcb"
LOSS_FILE = "loss.csv"
CONFIG_FILE = "config.json"


@dataclass(frozen=True)
class RunConfig:
    d_F: int = 384
    d_E: int = 1024
    M: int = 64
    K: int = 256
    lambda_codebook: float = 1.0
    lambda_commit: float = 0.25
    lr: float = 3e-4
    probe_lr: float = 3e-3
    probe_epochs: int = 500
    epochs: int = 10
    batch_size: int = 16
    kmeans_restarts: int = 4
    seed: int = 0
    features: str | None = None
    out_dir: str = "out"

    def __post_init__(self):
        for name in ("d_F", "d_E", "M", "K", "epochs", "batch_size", "probe_epochs", "kmeans_restarts"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("lr", "probe_lr"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ConfigError(f"{name} must be a positive number, got {value!r}")
        for name in ("lambda_codebook", "lambda_commit"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value >= 0:
                raise ConfigError(f"{name} must be a nonnegative number, got {value!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        if self.d_E % self.M != 0:
            raise ConfigError(f"d_E={self.d_E} is not divisible by M={self.M}")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def quantizer(self) -> QuantizerConfig:
        return QuantizerConfig(self.M, self.K, self.d_E)

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(
            input_dim=self.d_F,
            quantizer=self.quantizer,
            learning_rate=float(self.lr),
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            weights=training.LossWeights(float(self.lambda_codebook), float(self.lambda_commit)),
        )


@dataclass
class Model:
    head: expansion.ExpansionHead
    codebooks: Codebooks

    def encode(self, features) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(codes, quantized)`` for backbone features."""
        data = as_matrix(features)
        if data.ndim != 2 or data.shape[1] != self.head.d_f:
            raise DataError(f"features have dim {data.shape[-1]}, model expects d_F={self.head.d_f}")
        x, _ = expansion.forward(self.head, data)
        codes = quantizer.assign_codes(x, self.codebooks)
        return codes, quantizer.reconstruct(codes, self.codebooks)


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_model(model: Model, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    expansion.write_head(model.head, out / HEAD_FILE)
    quantizer.write_codebooks(model.codebooks, out / CODEBOOK_FILE)


def load_model(model_dir) -> Model:
    d = Path(model_dir)
    head = expansion.read_head(d / HEAD_FILE)
    books = quantizer.read_codebooks(d / CODEBOOK_FILE)
    if books.config.expanded_dim != head.d_e:
        raise DataError(f"head d_E={head.d_e} does not match codebooks d_E={books.config.expanded_dim}")
    return Model(head, books)


def round_to_f32(model: Model) -> Model:
    """The model exactly as it will read back from disk."""
    head = expansion.ExpansionHead(
        model.head.d_f, model.head.d_e,
        {k: v.astype(np.float32).astype(np.float64) for k, v in model.head.params.items()},
    )
    books = Codebooks(model.codebooks.entries.astype(np.float32).astype(np.float64), model.codebooks.config)
    return Model(head, books)


def require_labels(batch: FeatureBatch) -> np.ndarray:
    if batch.labels is None:
        raise DataError("labels required")
    return batch.labels


@dataclass
class TrainOutcome:
    model: Model
    history: list[training.StepLosses]

    @property
    def initial_loss(self) -> float:
        return self.history[0].total_loss

    @property
    def final_loss(self) -> float:
        return self.history[-1].total_loss


def train_model(cfg: RunConfig, batch: FeatureBatch, out_dir=None, task=None) -> TrainOutcome:
    """Train and (optionally) write head, codebooks, loss history and config.

    On a non-finite loss the last finite model is written before re-raising.
    """
    if batch.dim != cfg.d_F:
        raise DataError(f"config d_F={cfg.d_F} does not match feature file D={batch.dim}")
    try:
        result = training.train(batch, cfg.train_config(), task=task)
    except NumericalFailure as exc:
        if out_dir is not None and exc.last_good is not None:
            good = exc.last_good
            save_model(Model(good.head, good.codebooks), out_dir)
            training.write_loss_csv(good.history, Path(out_dir) / LOSS_FILE)
        raise
    model = round_to_f32(Model(result.head, result.codebooks))
    if out_dir is not None:
        out = Path(out_dir)
        save_model(model, out)
        training.write_loss_csv(result.history, out / LOSS_FILE)
        dump_json(cfg.to_dict(), out / CONFIG_FILE)
    return TrainOutcome(model, result.history)


def entropy_report(model: Model | None, batch: FeatureBatch, per_class: bool = False,
                   continuous: bool = False, delta_fraction: float = 0.001) -> dict:
    """Bits needed by a feature population: code entropy, or histogram entropy of raw features."""
    labels = require_labels(batch) if per_class else None
    if continuous:
        spec = entropy.fit_histogram_spec(batch, delta_fraction)
        dims = entropy.histogram_dim_entropies(batch, spec)
        report = {
            "mode": "continuous",
            "total_bits": float(np.sum(dims)),
            "per_codebook_bits": [float(b) for b in dims],
            "per_class_bits": {},
            "sample_count": len(batch),
            "bins_per_dimension": list(spec.bin_counts),
        }
        if labels is not None:
            for c in np.unique(labels):
                members = batch.data[labels == c]
                report["per_class_bits"][str(int(c))] = entropy.histogram_entropy(
                    members, entropy.fit_histogram_spec(members, delta_fraction))
        return report
    if model is None:
        raise DataError("a model is required for code entropy")
    codes, _ = model.encode(batch)
    cfg = model.codebooks.config
    report = entropy.entropy_report(codes, cfg, labels)
    report["mode"] = "quantized"
    report["max_bits"] = quantizer.code_bits(cfg)[1]
    report["bit_accounting"] = quantizer.bit_accounting(cfg)
    return report


def eval_report(model: Model, batch: FeatureBatch, clusters: int | None = None, probe: bool = False,
                seed: int = 0, probe_lr: float = 3e-3, probe_epochs: int = 500,
                kmeans_restarts: int = 4) -> tuple[dict, evaluation.ConfusionMatrix]:
    """Unsupervised clustering metrics of the quantized features, plus an optional probe."""
    labels = require_labels(batch)
    _, q = model.encode(batch)
    k = clusters if clusters is not None else int(np.unique(labels).size)
    km = evaluation.kmeans(q, k, seed=seed, n_init=kmeans_restarts)
    mapping, cm = evaluation.match_clusters(km.assignments, labels)
    rep = evaluation.metrics(cm)
    report = {
        "unsupervised": evaluation.EvalReport(rep.accuracy, rep.miou, rep.mean_class_accuracy,
                                              rep.per_class_accuracy, rep.per_class_iou, mapping).to_dict(),
        "clusters": k,
        "sample_count": len(batch),
    }
    if probe:
        pr = evaluation.linear_probe(q, labels, lr=probe_lr, epochs=probe_epochs, seed=seed)
        prep = evaluation.metrics(evaluation.confusion_from_predictions(pr.predict(q), labels))
        report["probe"] = prep.to_dict()
    return report, cm


def analyze(model: Model, batch: FeatureBatch, out_dir, samples_per_class: int = 10000, seed: int = 0,
            kmeans_restarts: int = 4) -> dict:
    """Write distance matrices, frequency tables and entropy/accuracy pairs."""
    labels = require_labels(batch)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    codes, q = model.encode(batch)
    cfg = model.codebooks.config
    ham = analysis.class_distance_matrix(codes, labels, analysis.COMBINATION_HAMMING, samples_per_class, seed)
    euc = analysis.class_distance_matrix(q, labels, analysis.QUANTIZED_EUCLIDEAN, samples_per_class, seed)
    analysis.write_matrix_csv(ham, out / "distance_hamming.csv")
    analysis.write_matrix_csv(euc, out / "distance_euclidean.csv")
    analysis.write_frequency_csv(analysis.codeword_frequencies(codes, codebook_size=cfg.codebook_size),
                                 out / "frequency_all.csv")
    for c in ham.classes:
        table = analysis.codeword_frequencies(codes, labels, c, codebook_size=cfg.codebook_size)
        analysis.write_frequency_csv(table, out / f"frequency_class{c}.csv")
    bits = entropy.per_class_entropy(codes, labels, cfg)
    km = evaluation.kmeans(q, len(ham.classes), seed=seed, n_init=kmeans_restarts)
    _, cm = evaluation.match_clusters(km.assignments, labels)
    acc = evaluation.metrics(cm).per_class_accuracy
    pairs = analysis.entropy_accuracy_pairs(bits, acc)
    analysis.write_entropy_accuracy(pairs, out / "entropy_accuracy.csv", out / "entropy_accuracy.json")
    return {"hamming": ham, "euclidean": euc, "pairs": pairs}


SWEEP_COLUMNS = ("M", "K", "accuracy", "miou", "macc", "bits")


def sweep(cfg: RunConfig, batch: FeatureBatch, m_list, k_list, out_dir=None) -> list[dict]:
    """Train and evaluate every (M, K) pair at fixed d_E; non-divisor M values are skipped."""
    labels = require_labels(batch)
    rows = []
    for m in m_list:
        if cfg.d_E % m != 0:
            log.warning("skipping M=%d: does not divide d_E=%d", m, cfg.d_E)
            continue
        for k in k_list:
            run_cfg = replace(cfg, M=int(m), K=int(k))
            sub = None if out_dir is None else Path(out_dir) / f"M{m}_K{k}"
            outcome = train_model(run_cfg, batch, sub)
            report, _ = eval_report(outcome.model, batch, seed=cfg.seed, kmeans_restarts=cfg.kmeans_restarts)
            u = report["unsupervised"]
            rows.append({
                "M": int(m), "K": int(k),
                "accuracy": u["accuracy"], "miou": u["miou"], "macc": u["mean_class_accuracy"],
                "bits": quantizer.code_bits(run_cfg.quantizer)[1],
            })
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([r["M"], r["K"], repr(r["accuracy"]), repr(r["miou"]), repr(r["macc"]), repr(r["bits"])])
