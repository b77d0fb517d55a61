"""Four defenses: sample-dropping filter, fine-pruning, STRIP, and a
Gram-matrix anomaly index.

All defenses are read-only over models and datasets; fine_prune returns a
new model and never mutates its input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledDataset
from .dsp import Waveform
from .features import batch_features
from .model import (NetworkModel, activations, last_conv_layer, predict_batch)


# ---------------------------------------------------------------------------
# filter defense
# ---------------------------------------------------------------------------

def filter_defense(x: Waveform, f: float, mode: str = "spaced",
                   seed: int = 0) -> Waveform:
    """Remove a fraction f of sample points, keeping round((1-f)*n) samples
    concatenated in order (the waveform gets shorter).

    'spaced' removes evenly spaced indices deterministically; 'random'
    removes a seeded uniform choice instead."""
    if not 0.0 <= f < 1.0:
        raise ValueError(f"filter ratio {f} outside [0, 1)")
    n = len(x)
    keep = round((1.0 - f) * n)
    if mode == "spaced":
        idx = np.floor(np.arange(keep) * (n / keep)).astype(np.int64)
    elif mode == "random":
        rng = np.random.default_rng([seed])
        idx = np.sort(rng.choice(n, size=keep, replace=False))
    else:
        raise ValueError(f"unknown filter mode {mode!r}")
    return Waveform(x.samples[idx], x.sample_rate)


def pad_to_length(x: Waveform, n: int) -> Waveform:
    """Zero-pad at the tail (models expect the nominal duration)."""
    if len(x) >= n:
        return Waveform(x.samples[:n], x.sample_rate)
    out = np.zeros(n, dtype=x.samples.dtype)
    out[:len(x)] = x.samples
    return Waveform(out, x.sample_rate)


# ---------------------------------------------------------------------------
# fine-pruning
# ---------------------------------------------------------------------------

@dataclass
class PruneReport:
    """Ascending activation ranking of the last-conv channels plus an
    optional (ratio -> BA, ASR) curve filled in by `fine_prune_curve`."""

    ranking: list
    curve: list = field(default_factory=list)   # entries {ratio, ba, asr}


def _channel_activation_means(model: NetworkModel, benign_set: LabeledDataset) -> np.ndarray:
    feats = batch_features([w for w, _ in benign_set.samples], model.feature_config)
    acts = activations(model, feats, last_conv_layer(model))
    return np.abs(acts).mean(axis=(0, 2, 3))


def fine_prune(model: NetworkModel, benign_set: LabeledDataset, ratio: float):
    """Rank last-conv channels ascending by mean absolute activation over
    the benign set and permanently zero-mask the first floor(ratio*C).

    Returns (pruned model, PruneReport)."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"pruning ratio {ratio} outside [0, 1]")
    if len(benign_set) == 0:
        raise ValueError("benign set is empty")
    means = _channel_activation_means(model, benign_set)
    ranking = np.argsort(means, kind="stable")
    k = int(math.floor(ratio * means.size))
    pruned = model.copy()
    layer = f"conv{len(model.arch.blocks) - 1}"
    for ch in ranking[:k]:
        pruned.params[f"{layer}.w"][ch] = 0.0
        pruned.params[f"{layer}.b"][ch] = 0.0
    return pruned, PruneReport(ranking=[int(c) for c in ranking])


def fine_prune_curve(model: NetworkModel, benign_set: LabeledDataset, ratios,
                     test: LabeledDataset, trigger, snr: float | None,
                     seed: int = 0) -> PruneReport:
    """Evaluate (BA, ASR) across pruning ratios; the poisoned test set is
    built once so every ratio sees identical triggered samples."""
    from .evaluate import benign_accuracy, poison_test_set

    poisoned = poison_test_set(test, trigger, snr, "random", seed)
    pfeats = batch_features([w for w, _ in poisoned.samples], model.feature_config)
    y_idx = test.vocabulary.index(trigger.target_label)
    report = None
    cache: dict = {}
    for ratio in ratios:
        pruned, rep = fine_prune(model, benign_set, ratio)
        if report is None:
            report = rep
        ba = benign_accuracy(pruned, test, feature_cache=cache)
        asr = float((predict_batch(pruned, pfeats).argmax(axis=1) == y_idx).mean())
        report.curve.append({"ratio": float(ratio), "ba": ba, "asr": asr})
    return report


# ---------------------------------------------------------------------------
# STRIP
# ---------------------------------------------------------------------------

@dataclass
class StripVerdict:
    entropy: float          # bits
    threshold: float        # bits
    flagged: bool


def strip_entropy(model: NetworkModel, x: Waveform, overlays,
                  threshold: float = -math.inf) -> StripVerdict:
    """Superimpose each overlay (scaled to equal power with x, clamped),
    average the model's probability vectors over the blends, and report the
    entropy of the averaged vector.  Low entropy signals a backdoored
    input; flagged when entropy < threshold."""
    overlays = list(overlays)
    if not overlays:
        raise ValueError("need at least one overlay")
    px = float(np.dot(x.samples.astype(np.float64), x.samples.astype(np.float64)))
    blends = []
    for o in overlays:
        po = float(np.dot(o.samples.astype(np.float64), o.samples.astype(np.float64)))
        if po <= 0.0:
            raise ValueError("overlay with zero power")
        scale = math.sqrt(px / po) if px > 0 else 1.0
        mixed = np.clip(x.samples.astype(np.float64)
                        + scale * o.samples.astype(np.float64), -1.0, 1.0)
        blends.append(Waveform(mixed.astype(np.float32), x.sample_rate))
    feats = batch_features(blends, model.feature_config)
    mean_probs = predict_batch(model, feats).mean(axis=0)
    nz = mean_probs[mean_probs > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    return StripVerdict(entropy=entropy, threshold=threshold,
                        flagged=entropy < threshold)


def strip_threshold(benign_entropies, false_positive_rate: float) -> float:
    """Entropy threshold flagging the requested fraction of benign inputs."""
    if not 0.0 <= false_positive_rate <= 1.0:
        raise ValueError("false positive rate outside [0, 1]")
    return float(np.quantile(np.asarray(benign_entropies, dtype=np.float64),
                             false_positive_rate))


# ---------------------------------------------------------------------------
# Gram-matrix anomaly index
# ---------------------------------------------------------------------------

ANOMALY_THRESHOLD = math.e ** 2


@dataclass
class AnomalyReport:
    deviations: dict        # class name -> d_c
    anomaly_index: dict     # class name -> R*_c
    threshold: float
    flagged: list


def _gram_features(acts: np.ndarray) -> np.ndarray:
    """Per-sample elementwise-power Gram statistics (orders 1 and 2):
    the upper triangle of outer(a^p, a^p) for each row a."""
    feats = []
    for p in (1, 2):
        v = acts ** p
        outer = np.einsum("bi,bj->bij", v, v)
        iu = np.triu_indices(acts.shape[1])
        feats.append(outer[:, iu[0], iu[1]])
    return np.concatenate(feats, axis=1)


def _deviation(feats: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Mean normalized exceedance of the [lo, hi] bounds per sample."""
    denom_lo = np.maximum(np.abs(lo), 1e-12)
    denom_hi = np.maximum(np.abs(hi), 1e-12)
    below = np.maximum(lo - feats, 0.0) / denom_lo
    above = np.maximum(feats - hi, 0.0) / denom_hi
    return (below + above).mean(axis=1)


def anomaly_indices(d: np.ndarray) -> np.ndarray:
    """Median/MAD-normalized deviation scores:
    R*_c = |d_c - median(d)| / (1.4826 * max(MAD(d), 1e-9))."""
    d = np.asarray(d, dtype=np.float64)
    med = np.median(d)
    mad = np.median(np.abs(d - med))
    return np.abs(d - med) / (1.4826 * max(mad, 1e-9))


def beatrix_index(model: NetworkModel, benign_by_class: dict, suspects,
                  threshold: float = ANOMALY_THRESHOLD) -> AnomalyReport:
    """Per-class anomaly indices from penultimate-layer Gram statistics.

    Benign samples of each class establish min/max bounds per Gram feature;
    each suspect's deviation is measured against the bounds of the class it
    is *predicted* as; d_c is the median deviation per predicted class, and
    classes whose normalized score exceeds the threshold are flagged."""
    vocab = model.vocabulary
    for name in vocab:
        if len(benign_by_class.get(name, ())) < 2:
            raise ValueError(f"class {name!r} needs at least 2 benign samples")

    def embed(waves):
        feats = batch_features(list(waves), model.feature_config)
        return activations(model, feats, "dense0"), feats

    bounds = {}
    for name in vocab:
        acts, _ = embed(benign_by_class[name])
        g = _gram_features(acts)
        bounds[name] = (g.min(axis=0), g.max(axis=0))

    suspects = list(suspects)
    if not suspects:
        raise ValueError("no suspect samples")
    acts, feats = embed(suspects)
    preds = predict_batch(model, feats).argmax(axis=1)
    g = _gram_features(acts)

    devs = {}
    for k, name in enumerate(vocab):
        rows = g[preds == k]
        if rows.size == 0:
            devs[name] = 0.0
            continue
        lo, hi = bounds[name]
        devs[name] = float(np.median(_deviation(rows, lo, hi)))

    d = np.array([devs[name] for name in vocab])
    r = anomaly_indices(d)
    index = {name: float(r[k]) for k, name in enumerate(vocab)}
    flagged = [name for name in vocab if index[name] > threshold]
    return AnomalyReport(deviations=devs, anomaly_index=index,
                         threshold=threshold, flagged=flagged)
