"""The attack core: surrogate dataset assembly, optimization-based dynamic
trigger generation, and SNR-adaptive clean-label poisoning.

Trigger generation solves, by projected Adam steps against a surrogate
model, for a short amplitude-bounded perturbation that drives the model's
prediction toward the target label from *every* attachment position: each
visit draws a fresh uniform position, attaches the trigger, clamps the
sample to [-1, 1], optionally mixes ambient noise, and backpropagates the
cross-entropy toward the target label through the MFCC front-end down to the
trigger, which is then projected back onto [-eps, eps]^l.

Poisoning is clean-label: only target-class samples are modified, each at
its own random position and with its own scale chosen so the host-to-trigger
power ratio matches the requested SNR.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .data import LabeledDataset
from .dsp import (NoiseBank, Waveform, add_trigger, fit_noise, load_wav,
                  save_wav, scale_for_snr, snr_db)
from .features import get_basis, mfcc_node
from .model import NetworkModel, forward


@dataclass(frozen=True)
class Trigger:
    """An optimized (or designated) perturbation with its provenance."""

    delta: Waveform
    epsilon: float
    target_label: str
    record: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.delta) == 0:
            raise ValueError("trigger must be non-empty")
        if float(np.abs(self.delta.samples).max()) > self.epsilon + 1e-12:
            raise ValueError("trigger amplitude exceeds its epsilon bound")


@dataclass(frozen=True)
class TriggerGenConfig:
    epsilon: float = 0.05
    duration_s: float | None = None      # None -> half the host duration
    epochs: int = 20
    lr: float = 1e-3
    seed: int = 0
    noise_aware: bool = False
    noise_snr_range: tuple = (10.0, 30.0)
    batch_size: int = 1                  # 1 = per-sample updates

    def __post_init__(self):
        if not 0 < self.epsilon <= 1:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class PoisonRecord:
    sample_id: str
    tau: int
    scale: float
    snr_db: float


@dataclass
class PoisonManifest:
    """Which samples were poisoned, where, and at which scale."""

    records: list
    rate: float
    target_label: str
    requested_snr_db: float
    noise_augmented: bool
    seed: int
    trigger_epsilon: float
    trigger_duration: int

    def poisoned_ids(self):
        return [r.sample_id for r in self.records]

    def to_json(self) -> dict:
        return {"records": [asdict(r) for r in self.records],
                "rate": self.rate, "target_label": self.target_label,
                "requested_snr_db": self.requested_snr_db,
                "noise_augmented": self.noise_augmented, "seed": self.seed,
                "trigger_epsilon": self.trigger_epsilon,
                "trigger_duration": self.trigger_duration}

    @classmethod
    def from_json(cls, blob: dict) -> "PoisonManifest":
        return cls(records=[PoisonRecord(**r) for r in blob["records"]],
                   rate=blob["rate"], target_label=blob["target_label"],
                   requested_snr_db=blob["requested_snr_db"],
                   noise_augmented=blob["noise_augmented"], seed=blob["seed"],
                   trigger_epsilon=blob["trigger_epsilon"],
                   trigger_duration=blob["trigger_duration"])


def _project_amplitude(arr: np.ndarray, eps: float) -> np.ndarray:
    """Clamp to [-eps, eps] in float32.  The float32 bound is rounded toward
    zero so the projected values never exceed the float64 epsilon."""
    b = np.float32(eps)
    if float(b) > eps:
        b = np.nextafter(b, np.float32(0.0))
    return np.clip(np.asarray(arr, dtype=np.float32), -b, b)


def save_manifest(manifest: PoisonManifest, path) -> None:
    with open(path, "w") as fh:
        json.dump(manifest.to_json(), fh, indent=2)


def load_manifest(path) -> PoisonManifest:
    with open(path) as fh:
        return PoisonManifest.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# surrogate dataset
# ---------------------------------------------------------------------------

def build_surrogate_dataset(target_class: LabeledDataset,
                            auxiliary: LabeledDataset) -> LabeledDataset:
    """Union of the target-class samples and the auxiliary corpus under a
    combined vocabulary (lexicographic).  The target label's index is
    recoverable as result.vocabulary.index(label)."""
    target_labels = {target_class.vocabulary[y] for _, y in target_class.samples}
    if len(target_labels) != 1:
        raise ValueError(f"target dataset must hold exactly one label, got {sorted(target_labels)}")
    target_label = target_labels.pop()
    aux_labels = set(auxiliary.vocabulary)
    if target_label in aux_labels:
        raise ValueError(f"label {target_label!r} appears in both datasets")
    if len(target_class) == 0 or len(auxiliary) == 0:
        raise ValueError("both datasets must be non-empty")
    if target_class.duration != auxiliary.duration:
        raise ValueError("datasets disagree on nominal duration")
    if target_class.sample_rate != auxiliary.sample_rate:
        raise ValueError("datasets disagree on sample rate")
    vocab = tuple(sorted(aux_labels | {target_label}))
    remap_aux = {k: vocab.index(name) for k, name in enumerate(auxiliary.vocabulary)}
    t_idx = vocab.index(target_label)
    samples = [(w, t_idx) for w, _ in target_class.samples]
    samples += [(w, remap_aux[y]) for w, y in auxiliary.samples]
    ids = tuple(target_class.ids) + tuple(auxiliary.ids)
    return LabeledDataset(tuple(samples), vocab, target_class.duration, ids)


# ---------------------------------------------------------------------------
# trigger generation
# ---------------------------------------------------------------------------

def _poisoned_sample_node(delta: ag.Tensor, x: np.ndarray, tau: int,
                          noise_seg: np.ndarray | None) -> ag.Tensor:
    n, l = x.size, delta.data.size
    dt = delta.data.dtype
    parts = []
    if tau > 0:
        parts.append(ag.constant(np.zeros(tau, dtype=dt)))
    parts.append(delta)
    if tau + l < n:
        parts.append(ag.constant(np.zeros(n - tau - l, dtype=dt)))
    placed = ag.concat(parts) if len(parts) > 1 else delta
    out = ag.clamp(ag.add(ag.constant(x.astype(dt)), placed), -1.0, 1.0)
    if noise_seg is not None:
        out = ag.clamp(ag.add(out, ag.constant(noise_seg.astype(dt))), -1.0, 1.0)
    return out


def _scaled_noise(x_now: np.ndarray, bank: NoiseBank, rng, snr_range) -> np.ndarray:
    """Pick a bank member, cut it to length, scale to a drawn SNR."""
    idx = int(rng.integers(0, len(bank)))
    snr = float(rng.uniform(*snr_range))
    seg = fit_noise(bank.noises[idx], x_now.size, seed=int(rng.integers(0, 2 ** 31)))
    px = float(np.dot(x_now.astype(np.float64), x_now.astype(np.float64)))
    pseg = float(np.dot(seg, seg))
    if px <= 0 or pseg <= 0:
        return np.zeros_like(seg)
    return 10.0 ** (-snr / 20.0) * math.sqrt(px / pseg) * seg


def generate_trigger(surrogate: NetworkModel, d_sur: LabeledDataset, y_t: str,
                     cfg: TriggerGenConfig = TriggerGenConfig(),
                     bank: NoiseBank | None = None) -> Trigger:
    """Optimize a dynamic trigger against the surrogate model.

    Deterministic given the surrogate parameters, the dataset order and the
    config seed.  Returns the trigger plus a per-epoch mean-loss curve in
    its generation record."""
    if y_t not in surrogate.vocabulary:
        raise ValueError(f"target label {y_t!r} not in surrogate vocabulary")
    if d_sur.vocabulary != surrogate.vocabulary:
        raise ValueError("surrogate model and dataset vocabularies differ")
    if cfg.noise_aware and (bank is None or len(bank) == 0):
        raise ValueError("noise-aware generation needs a non-empty noise bank")
    n = d_sur.duration
    sr = d_sur.sample_rate
    l = n // 2 if cfg.duration_s is None else int(round(cfg.duration_s * sr))
    if not 0 < l < n:
        raise ValueError(f"trigger length {l} must lie in (0, host length {n})")
    y_idx = surrogate.vocabulary.index(y_t)
    rng = np.random.default_rng([cfg.seed])
    delta = _project_amplitude(rng.uniform(-cfg.epsilon, cfg.epsilon, size=l), cfg.epsilon)

    basis = get_basis(surrogate.feature_config, n, np.float32)
    const_params = {k: ag.constant(v) for k, v in surrogate.params.items()}
    state = ag.AdamState()
    loss_curve = []
    grad_acc = np.zeros_like(delta)
    acc_count = 0

    for _epoch in range(cfg.epochs):
        epoch_losses = []
        for (w, _y), _sid in zip(d_sur.samples, d_sur.ids):
            x = w.samples
            tau = int(rng.integers(0, n - l + 1))
            noise_seg = None
            if cfg.noise_aware:
                # noise level is set against the triggered sample
                x_trig = np.array(x)
                x_trig[tau:tau + l] = np.clip(
                    x_trig[tau:tau + l].astype(np.float64) + delta, -1, 1).astype(np.float32)
                noise_seg = _scaled_noise(x_trig, bank, rng, cfg.noise_snr_range)
            leaf = ag.tensor(delta, requires_grad=True)
            sample = _poisoned_sample_node(leaf, x, tau, noise_seg)
            feats = mfcc_node(sample, basis)
            logits = forward(surrogate, ag.reshape(feats, (1,) + feats.data.shape),
                             params=const_params)
            loss = ag.nll_loss(ag.log_softmax(logits), [y_idx])
            ag.backward(loss)
            epoch_losses.append(float(loss.data))
            grad_acc += leaf.grad
            acc_count += 1
            if acc_count >= cfg.batch_size:
                upd, state = ag.adam_step({"delta": delta},
                                          {"delta": grad_acc / acc_count}, state, cfg.lr)
                delta = _project_amplitude(upd["delta"], cfg.epsilon)
                grad_acc = np.zeros_like(delta)
                acc_count = 0
        if acc_count:
            upd, state = ag.adam_step({"delta": delta},
                                      {"delta": grad_acc / acc_count}, state, cfg.lr)
            delta = _project_amplitude(upd["delta"], cfg.epsilon)
            grad_acc = np.zeros_like(delta)
            acc_count = 0
        loss_curve.append(float(np.mean(epoch_losses)))

    record = {"epochs": cfg.epochs, "lr": cfg.lr, "seed": cfg.seed,
              "noise_aware": cfg.noise_aware, "batch_size": cfg.batch_size,
              "surrogate_digest": surrogate.arch.digest(),
              "loss_curve": loss_curve,
              "update_mode": "per-sample" if cfg.batch_size == 1 else "mini-batch mean"}
    return Trigger(Waveform(delta, sr), cfg.epsilon, y_t, record)


def mean_target_loss(surrogate: NetworkModel, dataset: LabeledDataset, delta,
                     y_t: str, seed: int = 0) -> float:
    """Evaluation pass for a candidate trigger: mean cross-entropy toward the
    target label with seed-drawn positions.  Used to compare trigger
    iterates on equal footing."""
    d = delta.delta if isinstance(delta, Trigger) else delta
    y_idx = surrogate.vocabulary.index(y_t)
    n, l = dataset.duration, len(d)
    rng = np.random.default_rng([seed])
    basis = get_basis(surrogate.feature_config, n, np.float32)
    const_params = {k: ag.constant(v) for k, v in surrogate.params.items()}
    losses = []
    for w, _y in dataset.samples:
        tau = int(rng.integers(0, n - l + 1))
        x = add_trigger(w, d, tau)
        feats = mfcc_node(ag.constant(x.samples), basis)
        logits = forward(surrogate, ag.reshape(feats, (1,) + feats.data.shape),
                         params=const_params)
        losses.append(float(ag.nll_loss(ag.log_softmax(logits), [y_idx]).data))
    return float(np.mean(losses))


# ---------------------------------------------------------------------------
# poisoning
# ---------------------------------------------------------------------------

def uniform_positions(rng, n: int, l: int, count: int) -> np.ndarray:
    """Draw `count` attachment positions uniformly on [0, n - l]."""
    if l > n:
        raise ValueError("trigger longer than host")
    return rng.integers(0, n - l + 1, size=count)


def poison_dataset(victim: LabeledDataset, y_t: str, rate: float, trigger: Trigger,
                   snr: float, noise: NoiseBank | None = None, seed: int = 0,
                   noise_snr_range=(10.0, 30.0)):
    """Clean-label poisoning of the target class.

    floor(rate * |D_t|) target-class samples are chosen without replacement
    by seed; each gets its own uniform position and its own scale matching
    the requested SNR; labels never change.  Returns the poisoned dataset
    and a manifest recording every placement."""
    if y_t not in victim.vocabulary:
        raise ValueError(f"target label {y_t!r} not in vocabulary")
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"poisoning rate {rate} outside [0, 1]")
    y_idx = victim.vocabulary.index(y_t)
    n, l = victim.duration, len(trigger.delta)
    if l > n:
        raise ValueError("trigger longer than host samples")
    target_ids = [sid for (w, y), sid in zip(victim.samples, victim.ids) if y == y_idx]
    count = int(math.floor(rate * len(target_ids)))
    rng = np.random.default_rng([seed])
    chosen = set(rng.choice(len(target_ids), size=count, replace=False).tolist())
    chosen_ids = {target_ids[i] for i in chosen}

    by_id = {sid: w for (w, _y), sid in zip(victim.samples, victim.ids)}
    replacements, records = {}, []
    for sid in target_ids:                    # dataset order, deterministic
        if sid not in chosen_ids:
            continue
        x = by_id[sid]
        tau = int(uniform_positions(rng, n, l, 1)[0])
        s = scale_for_snr(x, trigger.delta, snr)
        measured = snr_db(x, Waveform(
            np.clip(s * trigger.delta.samples.astype(np.float64), -1, 1).astype(np.float32),
            x.sample_rate))
        poisoned = add_trigger(x, trigger.delta, tau, s)
        if noise is not None:
            idx = int(rng.integers(0, len(noise)))
            w_snr = float(rng.uniform(*noise_snr_range))
            from .dsp import mix_noise
            poisoned = mix_noise(poisoned, noise.noises[idx], w_snr,
                                 seed=int(rng.integers(0, 2 ** 31)))
        replacements[sid] = poisoned
        records.append(PoisonRecord(sample_id=sid, tau=tau, scale=float(s),
                                    snr_db=float(measured)))

    manifest = PoisonManifest(records=records, rate=rate, target_label=y_t,
                              requested_snr_db=snr, noise_augmented=noise is not None,
                              seed=seed, trigger_epsilon=trigger.epsilon,
                              trigger_duration=l)
    return victim.replace_waveforms(replacements), manifest


# ---------------------------------------------------------------------------
# trigger persistence: WAV plus JSON sidecar
# ---------------------------------------------------------------------------

def save_trigger(trigger: Trigger, wav_path) -> None:
    wav_path = Path(wav_path)
    save_wav(trigger.delta, wav_path)
    sidecar = {"epsilon": trigger.epsilon, "target_label": trigger.target_label,
               "sample_rate": trigger.delta.sample_rate, "record": trigger.record}
    with open(wav_path.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2)


def load_trigger(wav_path) -> Trigger:
    """Load a persisted trigger.  PCM quantization can push samples a hair
    past epsilon, so the amplitude projection is re-applied on load."""
    wav_path = Path(wav_path)
    with open(wav_path.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    wav = load_wav(wav_path, expected_rate=sidecar["sample_rate"])
    eps = sidecar["epsilon"]
    delta = Waveform(_project_amplitude(wav.samples, eps), wav.sample_rate)
    return Trigger(delta, eps, sidecar["target_label"], sidecar.get("record", {}))
