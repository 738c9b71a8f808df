"""End-to-end optimization and checkpointing.

The training unit is a dialog turn; every epoch shuffles all turns with the
seeded generator, batches them, and applies Adam with the halving learning
rate schedule. Validation metrics are computed each epoch; the best set of
parameters (by the monitored metric) is what ends up in the checkpoint.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import Graph, backward
from .data import Vocabulary
from .model import DialogModel, ModelConfig
from .ranking import compute_metrics

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class TrainingError(Exception):
    """Divergence or invalid optimizer state (reports epoch/batch/parameter)."""


class TrainConfig:
    FIELDS = ("batch_size", "max_epochs", "lr", "lr_halving_period", "dropout",
              "steps", "factors", "seed", "patience", "monitor", "stop_at",
              "clip_norm")

    def __init__(self, batch_size, max_epochs=20, lr=4e-4, lr_halving_period=10,
                 dropout=0.2, steps=2, factors=2, seed=0, patience=5,
                 monitor="auto", stop_at=None, clip_norm=5.0):
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lr = lr
        self.lr_halving_period = lr_halving_period
        self.dropout = dropout
        self.steps = steps
        self.factors = factors
        self.seed = seed
        self.patience = patience
        self.monitor = monitor
        self.stop_at = stop_at
        self.clip_norm = clip_norm
        if min(batch_size, max_epochs, lr_halving_period) < 1 or lr <= 0:
            raise ValueError("batch size, epochs, halving period, and lr must be positive")

    @classmethod
    def desk(cls, **overrides):
        cfg = {"batch_size": 4, "steps": 2, "factors": 2}
        cfg.update(overrides)
        return cls(**cfg)

    @classmethod
    def paper(cls, **overrides):
        cfg = {"batch_size": 100, "steps": 3, "factors": 5}
        cfg.update(overrides)
        return cls(**cfg)

    def to_dict(self):
        return {f: getattr(self, f) for f in self.FIELDS}


def learning_rate(base, epoch, period):
    """Halved at epochs period, 2*period, ... (1-based epochs)."""
    return base / (2 ** (epoch // period))


class AdamState:
    def __init__(self):
        self.step = 0
        self.m = {}
        self.v = {}


def adam_step(params, state, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Standard Adam with bias correction over a name -> Tensor mapping."""
    state.step += 1
    t = state.step
    for name, tensor in params.items():
        g = tensor.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter '{name}'")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        tensor.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def clip_gradients(params, max_norm):
    """Global-norm clipping; returns the pre-clip norm."""
    total = 0.0
    for tensor in params.values():
        if tensor.grad is not None:
            total += float((tensor.grad * tensor.grad).sum())
    norm = total ** 0.5
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for tensor in params.values():
            if tensor.grad is not None:
                tensor.grad = tensor.grad * scale
    return norm


def resolve_monitor(monitor, metrics):
    if monitor == "auto":
        return "ndcg" if "ndcg" in metrics else "mrr"
    key = monitor if monitor in metrics else None
    if key is None:
        raise ValueError(f"monitored metric '{monitor}' not available in {sorted(metrics)}")
    return key


def train(model, train_examples, config, decoder_kind, val_examples=None):
    """Optimize `model` in place; returns (checkpoint, history).

    The checkpoint holds the best-validation parameters, which are also
    restored into the model before returning. History carries one dict per
    epoch: loss, lr, validation metrics, monitored value.
    """
    if len(train_examples) == 0:
        raise ValueError("empty training set")
    if decoder_kind not in ("dis", "gen"):
        raise ValueError(f"unknown decoder kind '{decoder_kind}'")
    val = val_examples if val_examples is not None else train_examples

    samples = [(i, t) for i, ex in enumerate(train_examples)
               for t in range(len(ex.turns))]
    rng = np.random.default_rng(config.seed)
    trainable = model.trainable_params()
    state = AdamState()

    best_value = -np.inf
    best_params = None
    best_epoch = 0
    bad_epochs = 0
    monitor_key = None
    history = []

    for epoch in range(1, config.max_epochs + 1):
        lr = learning_rate(config.lr, epoch, config.lr_halving_period)
        order = rng.permutation(len(samples))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            graph = Graph(check_finite=False)
            total = None
            for idx in batch:
                ex_i, turn_i = samples[idx]
                loss = model.turn_loss(graph, train_examples[ex_i], turn_i,
                                       decoder_kind, dropout_rng=rng)
                total = loss if total is None else graph.add(total, loss)
            total = graph.scale(total, 1.0 / len(batch))
            value = total.data.item()
            if not np.isfinite(value):
                raise TrainingError(f"loss diverged at epoch {epoch}, batch {n_batches}")
            backward(graph, total)
            clip_gradients(trainable, config.clip_norm)
            adam_step(trainable, state, lr)
            epoch_loss += value
            n_batches += 1

        table = model.evaluate(val, decoder_kind)
        metrics = compute_metrics(table)
        if monitor_key is None:
            monitor_key = resolve_monitor(config.monitor, metrics)
        value = metrics[monitor_key]

        improved = value > best_value
        if improved:
            best_value = value
            best_epoch = epoch
            best_params = {k: t.data.copy() for k, t in model.params().items()}
            bad_epochs = 0
        else:
            bad_epochs += 1

        history.append({"epoch": epoch, "lr": lr, "train_loss": epoch_loss / n_batches,
                        "val": metrics, "monitor": monitor_key,
                        "monitor_value": value, "improved": improved})

        if config.stop_at is not None and value >= config.stop_at:
            break
        if bad_epochs > config.patience:
            break

    if best_params is not None:
        for k, t in model.params().items():
            t.data = best_params[k].copy()

    ckpt = Checkpoint.build(model, decoder_kind, best_epoch, best_value,
                            monitor_key, config)
    return ckpt, history


class Checkpoint:
    """Manifest (config, vocab, epoch, metric, parameter shapes) + f64 blob.

    On disk: u32 little-endian manifest length, manifest JSON (utf-8), then
    every parameter array as raw little-endian float64 in manifest order.
    """

    def __init__(self, manifest, arrays):
        self.manifest = manifest
        self.arrays = arrays

    @classmethod
    def build(cls, model, decoder_kind, epoch, val_metric, monitor, train_config=None):
        params = model.params()
        manifest = {
            "version": 1,
            "decoder": decoder_kind,
            "epoch": int(epoch),
            "val_metric": float(val_metric),
            "monitor": monitor,
            "config": model.config.to_dict(),
            "vocab": list(model.vocab.words),
            "train_config": train_config.to_dict() if train_config else None,
            "params": [[name, list(t.shape)] for name, t in params.items()],
        }
        arrays = {name: t.data.copy() for name, t in params.items()}
        return cls(manifest, arrays)

    def save(self, path):
        manifest_bytes = json.dumps(self.manifest).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<I", len(manifest_bytes)))
            fh.write(manifest_bytes)
            for name, shape in self.manifest["params"]:
                arr = self.arrays[name]
                if list(arr.shape) != shape:
                    raise ValueError(f"array '{name}' shape drifted from manifest")
                fh.write(arr.astype("<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            head = fh.read(4)
            if len(head) < 4:
                raise ValueError(f"{path}: not a checkpoint file")
            (mlen,) = struct.unpack("<I", head)
            manifest = json.loads(fh.read(mlen).decode("utf-8"))
            arrays = {}
            for name, shape in manifest["params"]:
                count = int(np.prod(shape))
                payload = fh.read(8 * count)
                if len(payload) < 8 * count:
                    raise ValueError(f"{path}: truncated parameter '{name}'")
                arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        return cls(manifest, arrays)

    def build_model(self):
        """Reconstruct the model with these exact parameter values."""
        config = ModelConfig.from_dict(self.manifest["config"])
        vocab = Vocabulary(self.manifest["vocab"])
        pretrained = self.arrays.get("embedding.pretrained")
        model = DialogModel(config, vocab, seed=0, pretrained=pretrained)
        for name, tensor in model.params().items():
            arr = self.arrays[name]
            if arr.shape != tensor.shape:
                raise ValueError(f"checkpoint parameter '{name}' has shape {arr.shape}, "
                                 f"expected {tensor.shape}")
            tensor.data = arr.copy()
        return model
