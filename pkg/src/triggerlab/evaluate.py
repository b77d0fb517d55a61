"""Metrics and reports: benign accuracy, attack success rate, class-wise
matrices, a paired t-test, and JSON/CSV report emission.

ASR default policy is a uniform-random attachment position per sample,
since position independence is exactly the property under test; a fixed
position (tau = 0) reproduces static-trigger baselines.  Test triggers
are scaled to the experiment SNR unless `snr=None`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .attack import Trigger
from .data import LabeledDataset
from .dsp import Waveform, add_trigger, scale_for_snr
from .features import batch_features
from .model import NetworkModel, predict_batch


# ---------------------------------------------------------------------------
# accuracy metrics
# ---------------------------------------------------------------------------

def benign_accuracy(model: NetworkModel, test: LabeledDataset,
                    feature_cache=None) -> float:
    """Fraction of samples whose argmax prediction equals the label."""
    if len(test) == 0:
        raise ValueError("empty evaluation set")
    feats = batch_features([w for w, _ in test.samples], model.feature_config,
                           cache=feature_cache)
    labels = np.array([y for _, y in test.samples])
    preds = predict_batch(model, feats).argmax(axis=1)
    return float((preds == labels).mean())


def poison_test_set(test: LabeledDataset, trigger: Trigger, snr: float | None,
                    position: str, seed: int) -> LabeledDataset:
    """Attach the trigger to every non-target-class sample.

    `position`: 'random' draws a fresh uniform tau per sample, 'fixed'
    always uses tau = 0.  `snr=None` applies the trigger unscaled."""
    if position not in ("random", "fixed"):
        raise ValueError(f"unknown position policy {position!r}")
    y_idx = test.vocabulary.index(trigger.target_label)
    keep = [sid for (w, y), sid in zip(test.samples, test.ids) if y != y_idx]
    if not keep:
        raise ValueError("evaluation set holds only target-class samples")
    subset = test.subset(keep)
    n, l = subset.duration, len(trigger.delta)
    rng = np.random.default_rng([seed])
    replaced = {}
    for (w, y), sid in zip(subset.samples, subset.ids):
        tau = int(rng.integers(0, n - l + 1)) if position == "random" else 0
        s = 1.0 if snr is None else scale_for_snr(w, trigger.delta, snr)
        replaced[sid] = add_trigger(w, trigger.delta, tau, s)
    return subset.replace_waveforms(replaced)


def attack_success_rate(model: NetworkModel, test: LabeledDataset, trigger: Trigger,
                        snr: float | None = 30.0, position: str = "random",
                        seed: int = 0, transform=None, feature_cache=None) -> float:
    """Fraction of triggered non-target-class samples predicted as the
    target label.  `transform` optionally post-processes each poisoned
    waveform (e.g. a simulated channel or a filter defense)."""
    if trigger.target_label not in test.vocabulary:
        raise ValueError(f"target label {trigger.target_label!r} not in vocabulary")
    poisoned = poison_test_set(test, trigger, snr, position, seed)
    waves = [w for w, _ in poisoned.samples]
    if transform is not None:
        waves = [transform(w) for w in waves]
    feats = batch_features(waves, model.feature_config, cache=feature_cache)
    preds = predict_batch(model, feats).argmax(axis=1)
    return float((preds == test.vocabulary.index(trigger.target_label)).mean())


def class_wise_asr(model: NetworkModel, victim: LabeledDataset, triggers: dict,
                   snr: float | None = 30.0, seed: int = 0) -> list:
    """K x K matrix: rows are actual classes, columns target classes; cell
    (a, t) is the ASR of class-a samples against target t.  Diagonal cells
    are None (undefined when actual == target)."""
    vocab = victim.vocabulary
    missing = [c for c in vocab if c not in triggers]
    if missing:
        raise ValueError(f"missing triggers for classes: {missing}")
    matrix = [[None] * len(vocab) for _ in vocab]
    for t, target in enumerate(vocab):
        for a, actual in enumerate(vocab):
            if a == t:
                continue
            rows = victim.class_subset([actual, target])
            only_a = rows.subset([sid for (w, y), sid in zip(rows.samples, rows.ids)
                                  if rows.vocabulary[y] == actual])
            # rebuild under the full vocabulary so predictions line up
            sub = victim.subset(only_a.ids)
            matrix[a][t] = attack_success_rate(model, sub, triggers[target],
                                               snr=snr, seed=seed)
    return matrix


# ---------------------------------------------------------------------------
# paired t-test with an in-house Student-t tail integral
# ---------------------------------------------------------------------------

def _student_t_pdf(x: np.ndarray, dof: int) -> np.ndarray:
    c = math.exp(math.lgamma((dof + 1) / 2.0) - math.lgamma(dof / 2.0)) \
        / math.sqrt(dof * math.pi)
    return c * (1.0 + x * x / dof) ** (-(dof + 1) / 2.0)


def _student_t_two_tail(t_abs: float, dof: int) -> float:
    """p = P(|T| >= t_abs) via composite Gauss-Legendre quadrature of the
    density over [0, t_abs]."""
    if t_abs == 0.0:
        return 1.0
    if math.isinf(t_abs):
        return 0.0
    nodes, weights = np.polynomial.legendre.leggauss(24)
    panels = max(16, int(math.ceil(t_abs)) * 4)
    edges = np.linspace(0.0, t_abs, panels + 1)
    half = (edges[1:] - edges[:-1]) / 2.0
    mid = (edges[1:] + edges[:-1]) / 2.0
    xs = mid[:, None] + half[:, None] * nodes[None, :]
    integral = float(np.sum(half[:, None] * weights[None, :] * _student_t_pdf(xs, dof)))
    return max(0.0, 1.0 - 2.0 * integral)


def paired_t_test(a, b) -> float:
    """Two-tailed paired t-test p-value.  Zero-variance differences give
    p = 1 when the mean difference is zero, else p = 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired observations must be equal-length vectors, "
                         f"got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("need at least two paired observations")
    d = a - b
    sd = float(d.std(ddof=1))
    mean = float(d.mean())
    if sd == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / (sd / math.sqrt(n))
    return _student_t_two_tail(abs(t), n - 1)


# ---------------------------------------------------------------------------
# designated-trigger baseline
# ---------------------------------------------------------------------------

def designated_trigger(y_t: str, duration_s: float, sample_rate: int = 16000,
                       seed: int = 0, band=(1200.0, 3800.0)) -> Trigger:
    """Seeded band-limited chirp used as the designated-trigger baseline
    (a stand-in for a whistle-style trigger asset)."""
    rng = np.random.default_rng([seed])
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = band[0] * (1.0 + 0.05 * rng.uniform(-1, 1))
    f1 = band[1] * (1.0 + 0.05 * rng.uniform(-1, 1))
    phase = 2.0 * np.pi * (f0 * t + (f1 - f0) / (2.0 * duration_s) * t * t)
    env = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))
    x = 0.5 * env * np.sin(phase + rng.uniform(0, 2 * np.pi))
    delta = Waveform(np.clip(x, -1, 1).astype(np.float32), sample_rate)
    eps = float(np.abs(delta.samples).max())
    return Trigger(delta, eps, y_t, {"kind": "designated-chirp", "seed": seed,
                                     "band": list(band)})


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalReport:
    ba: float
    asr: float | None
    benign_count: int
    attack_count: int
    config_digest: str
    class_matrix: list | None = None       # rows actual, cols target, None diagonal
    class_names: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.ba <= 1.0:
            raise ValueError("BA outside [0, 1]")
        if self.asr is not None and not 0.0 <= self.asr <= 1.0:
            raise ValueError("ASR outside [0, 1]")
        if self.class_matrix is not None:
            for i, row in enumerate(self.class_matrix):
                if row[i] is not None:
                    raise ValueError("class-wise matrix diagonal must be unavailable")


def write_report(report: EvalReport, path) -> None:
    """JSON report (schema-versioned); the class-wise matrix additionally
    goes to a CSV companion with a target-class header row.  Unavailable
    diagonal cells serialize as null / empty, never 0."""
    blob = {"schema_version": REPORT_SCHEMA_VERSION, "ba": report.ba,
            "asr": report.asr, "benign_count": report.benign_count,
            "attack_count": report.attack_count,
            "config_digest": report.config_digest,
            "class_matrix": report.class_matrix,
            "class_names": list(report.class_names), "extra": report.extra}
    path = str(path)
    with open(path, "w") as fh:
        json.dump(blob, fh, indent=2)
    if report.class_matrix is not None:
        csv_path = path[:-5] + ".csv" if path.endswith(".json") else path + ".csv"
        with open(csv_path, "w") as fh:
            fh.write("actual\\target," + ",".join(report.class_names) + "\n")
            for name, row in zip(report.class_names, report.class_matrix):
                cells = ["" if v is None else f"{v:.6f}" for v in row]
                fh.write(name + "," + ",".join(cells) + "\n")


def read_report(path) -> EvalReport:
    with open(path) as fh:
        blob = json.load(fh)
    if blob.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema version {blob.get('schema_version')}")
    return EvalReport(ba=blob["ba"], asr=blob["asr"],
                      benign_count=blob["benign_count"],
                      attack_count=blob["attack_count"],
                      config_digest=blob["config_digest"],
                      class_matrix=blob["class_matrix"],
                      class_names=blob["class_names"], extra=blob.get("extra", {}))
