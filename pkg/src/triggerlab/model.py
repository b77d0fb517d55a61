"""Classifier architectures, the cross-entropy training loop, prediction,
and activation taps used by the defenses.

Two conventional keyword-spotting CNNs are shipped.  Their exact layouts are
pinned in ArchSpec so results are reproducible:

  small-cnn: conv(32,3x3)+relu+pool2 -> conv(64,3x3)+relu+pool2
             -> dense(128)+relu -> dense(K)
  large-cnn: conv(64,3x3)+relu -> conv(128,3x3)+relu+pool2
             -> conv(128,3x3)+relu+pool2 -> dense(256)+relu -> dense(K)

Training is deterministic for a fixed seed: samples are put in canonical
id order first, and each epoch's shuffle is a pure function of
(seed, epoch), so the final parameters do not depend on the incoming
sample order.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autograd as ag
from .data import LabeledDataset
from .features import FeatureTensor, MfccConfig, batch_features


@dataclass(frozen=True)
class ConvBlock:
    channels: int
    kernel: int = 3
    pool: bool = True


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple          # (n_mfcc, n_frames)
    n_classes: int
    blocks: tuple               # of ConvBlock
    dense_units: int

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError("n_classes must be >= 1")
        if len(self.input_shape) != 2 or min(self.input_shape) < 1:
            raise ValueError(f"bad input shape {self.input_shape}")
        self.conv_output_shape()  # raises if layers do not fit

    def conv_output_shape(self) -> tuple:
        """(channels, H, W) after the conv stack; validates the layer math."""
        h, w = self.input_shape
        c = 1
        for b in self.blocks:
            h, w = h - b.kernel + 1, w - b.kernel + 1
            if b.pool:
                h, w = h // 2, w // 2
            if h < 1 or w < 1:
                raise ValueError(f"{self.name}: input {self.input_shape} too small "
                                 f"for the conv stack")
            c = b.channels
        return c, h, w

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def small_cnn(input_shape, n_classes) -> ArchSpec:
    return ArchSpec("small-cnn", tuple(input_shape), n_classes,
                    (ConvBlock(32), ConvBlock(64)), 128)


def large_cnn(input_shape, n_classes) -> ArchSpec:
    return ArchSpec("large-cnn", tuple(input_shape), n_classes,
                    (ConvBlock(64, pool=False), ConvBlock(128), ConvBlock(128)), 256)


ARCH_FACTORIES = {"small-cnn": small_cnn, "large-cnn": large_cnn}


@dataclass
class NetworkModel:
    arch: ArchSpec
    params: dict
    vocabulary: tuple
    feature_config: MfccConfig

    def __post_init__(self):
        if len(self.vocabulary) != self.arch.n_classes:
            raise ValueError("vocabulary size must equal the class count")

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self) -> "NetworkModel":
        return NetworkModel(self.arch, {k: v.copy() for k, v in self.params.items()},
                            self.vocabulary, self.feature_config)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    patience: int | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def build_model(arch: ArchSpec, seed: int, vocabulary=None,
                feature_config: MfccConfig | None = None) -> NetworkModel:
    """Initialize parameters with a seeded uniform fan-in scheme:
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    if vocabulary is None:
        vocabulary = tuple(f"class{k}" for k in range(arch.n_classes))
    rng = np.random.default_rng(seed)
    params = {}

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    c_in = 1
    for i, b in enumerate(arch.blocks):
        fan = c_in * b.kernel * b.kernel
        params[f"conv{i}.w"] = uniform((b.channels, c_in, b.kernel, b.kernel), fan)
        params[f"conv{i}.b"] = uniform((b.channels,), fan)
        c_in = b.channels
    c, h, w = arch.conv_output_shape()
    flat = c * h * w
    params["dense0.w"] = uniform((flat, arch.dense_units), flat)
    params["dense0.b"] = uniform((arch.dense_units,), flat)
    params["out.w"] = uniform((arch.dense_units, arch.n_classes), arch.dense_units)
    params["out.b"] = uniform((arch.n_classes,), arch.dense_units)
    return NetworkModel(arch, params, tuple(vocabulary),
                        feature_config or MfccConfig())


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def forward(model: NetworkModel, feats, params=None, taps: dict | None = None) -> ag.Tensor:
    """Logits for a feature batch.

    `feats` is (B, n_mfcc, n_frames) (array or Tensor).  When `taps` is
    given, post-nonlinearity activations of every block are stored in it
    under 'conv{i}' (after ReLU and pooling) and 'dense0'."""
    x = feats if isinstance(feats, ag.Tensor) else ag.constant(np.asarray(feats))
    if x.data.ndim != 3 or x.data.shape[1:] != tuple(model.arch.input_shape):
        raise ValueError(f"feature batch shape {x.data.shape} does not match "
                         f"arch input {model.arch.input_shape}")
    p = params if params is not None else {k: ag.constant(v) for k, v in model.params.items()}
    B = x.data.shape[0]
    h = ag.reshape(x, (B, 1) + tuple(model.arch.input_shape))
    for i, b in enumerate(model.arch.blocks):
        h = ag.relu(ag.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"]))
        if b.pool:
            h = ag.maxpool2d(h)
        if taps is not None:
            taps[f"conv{i}"] = h
    h = ag.reshape(h, (B, -1))
    h = ag.relu(ag.add(ag.matmul(h, p["dense0.w"]), p["dense0.b"]))
    if taps is not None:
        taps["dense0"] = h
    logits = ag.add(ag.matmul(h, p["out.w"]), p["out.b"])
    if taps is not None:
        taps["out"] = logits
    return logits


def _as_feature_batch(features) -> np.ndarray:
    if isinstance(features, FeatureTensor):
        arr = features.values
    else:
        arr = np.asarray(features)
    if arr.ndim == 2:
        arr = arr[None]
    return arr.astype(np.float32, copy=False)


def predict(model: NetworkModel, features) -> np.ndarray:
    """Softmax class probabilities for one feature tensor.  Argmax ties
    break toward the lowest class index (numpy argmax convention)."""
    probs = predict_batch(model, _as_feature_batch(features))
    return probs[0]


def predict_batch(model: NetworkModel, feats) -> np.ndarray:
    logits = forward(model, _as_feature_batch(feats)).data
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_label(model: NetworkModel, features) -> int:
    return int(np.argmax(predict(model, features)))


def activations(model: NetworkModel, features, layer: str) -> np.ndarray:
    """Post-nonlinearity activations of a named layer for one input or a
    batch.  Layer ids: conv0..convN, dense0, out."""
    taps: dict = {}
    forward(model, _as_feature_batch(features), taps=taps)
    if layer not in taps:
        raise ValueError(f"unknown layer {layer!r}; have {sorted(taps)}")
    return taps[layer].data


def last_conv_layer(model: NetworkModel) -> str:
    return f"conv{len(model.arch.blocks) - 1}"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _dataset_features(dataset: LabeledDataset, cfg: MfccConfig, cache=None):
    feats = batch_features([w for w, _ in dataset.samples], cfg, cache=cache)
    labels = np.array([y for _, y in dataset.samples], dtype=np.int64)
    return feats, labels


def _eval_pass(model, params, feats, labels, batch_size=256):
    losses, correct = [], 0
    for i in range(0, len(labels), batch_size):
        fb, lb = feats[i:i + batch_size], labels[i:i + batch_size]
        logp = ag.log_softmax(forward(model, fb, params=params)).data
        losses.append(-logp[np.arange(len(lb)), lb])
        correct += int((logp.argmax(axis=1) == lb).sum())
    loss = float(np.concatenate(losses).mean())
    return loss, correct / len(labels)


def train(model: NetworkModel, dataset: LabeledDataset, cfg: TrainConfig,
          val: LabeledDataset | None = None, feature_cache=None):
    """Minimize cross-entropy with Adam over shuffled mini-batches.

    Returns (trained model, history).  History entry 0 is the pre-training
    evaluation on the training set; each later entry is the post-epoch
    evaluation, so the final accuracy matches a fresh `predict` pass."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.vocabulary != model.vocabulary:
        raise ValueError(f"dataset vocabulary {dataset.vocabulary} does not match "
                         f"model vocabulary {model.vocabulary}")

    order = np.argsort(np.array(dataset.ids, dtype=object), kind="stable")
    feats, labels = _dataset_features(dataset, model.feature_config, cache=feature_cache)
    feats, labels = feats[order], labels[order]
    val_data = None
    if val is not None and len(val):
        vf, vl = _dataset_features(val, model.feature_config, cache=feature_cache)
        val_data = (vf, vl)

    params = {k: v.copy() for k, v in model.params.items()}
    state = ag.AdamState()
    history = {"loss": [], "accuracy": [], "val_loss": [], "val_accuracy": []}

    def record():
        loss, acc = _eval_pass(model, {k: ag.constant(v) for k, v in params.items()},
                               feats, labels)
        history["loss"].append(loss)
        history["accuracy"].append(acc)
        if val_data is not None:
            vloss, vacc = _eval_pass(model, {k: ag.constant(v) for k, v in params.items()},
                                     *val_data)
            history["val_loss"].append(vloss)
            history["val_accuracy"].append(vacc)

    record()
    best_val, since_best = np.inf, 0
    n = len(labels)
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            pt = {k: ag.tensor(v, requires_grad=True) for k, v in params.items()}
            logits = forward(model, feats[idx], params=pt)
            loss = ag.nll_loss(ag.log_softmax(logits), labels[idx])
            ag.backward(loss)
            grads = {k: t.grad for k, t in pt.items()}
            params, state = ag.adam_step(params, grads, state, cfg.lr)
        record()
        if val_data is not None and cfg.patience is not None:
            if history["val_loss"][-1] < best_val - 1e-9:
                best_val, since_best = history["val_loss"][-1], 0
            else:
                since_best += 1
                if since_best > cfg.patience:
                    break
    trained = NetworkModel(model.arch, params, model.vocabulary, model.feature_config)
    return trained, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_model(model: NetworkModel, path) -> None:
    meta = {
        "version": CHECKPOINT_VERSION,
        "arch": asdict(model.arch),
        "arch_digest": model.arch.digest(),
        "vocabulary": list(model.vocabulary),
        "feature_config": asdict(model.feature_config),
    }
    arrays = dict(model.params)
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(str(path), **arrays)


def load_model(path) -> NetworkModel:
    with np.load(str(path)) as blob:
        meta = json.loads(bytes(blob["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        a = meta["arch"]
        arch = ArchSpec(a["name"], tuple(a["input_shape"]), a["n_classes"],
                        tuple(ConvBlock(**b) for b in a["blocks"]), a["dense_units"])
        if arch.digest() != meta["arch_digest"]:
            raise ValueError("checkpoint architecture digest mismatch")
        params = {k: blob[k] for k in blob.files if k != "__meta__"}
    return NetworkModel(arch, params, tuple(meta["vocabulary"]),
                        MfccConfig(**meta["feature_config"]))
