"""Weighted kNN and linear evaluation of frozen encoders."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import ChannelStats, LabeledDataset, standardize
from .model import EncoderState, encode
from .optim import Adam, AdamConfig


class EmptyBankError(RuntimeError):
    pass


@dataclass
class FeatureBank:
    features: np.ndarray  # (m, d) unit-norm rows
    labels: np.ndarray  # (m,)
    num_classes: int
    temperature: float = 0.1

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ValueError("one label per bank row required")
        if len(self.features):
            dev = np.abs(np.linalg.norm(self.features, axis=1) - 1.0).max()
            if dev > 1e-5:
                raise ValueError(f"bank rows must be unit-norm (max deviation {dev:.2e})")

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class EvalResult:
    top1_accuracy: float
    per_class_accuracy: list[float]
    num_evaluated: int
    protocol: str = "knn"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def encode_dataset(state: EncoderState, images: np.ndarray, stats: ChannelStats,
                   batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic transform (standardize only). Returns (penultimate, embedding)."""
    frozen = state.frozen()
    dtype = next(iter(state.params.values())).dtype
    pen, emb = [], []
    for start in range(0, len(images), batch_size):
        x = T.Tensor(standardize(images[start:start + batch_size], stats, dtype))
        p, e = encode(frozen, x)
        pen.append(p.data)
        emb.append(e.data)
    if not pen:
        d = state.config.embed_dim
        return np.zeros((0, state.config.penultimate_dim)), np.zeros((0, d))
    return np.concatenate(pen), np.concatenate(emb)


def build_feature_bank(state: EncoderState, train: LabeledDataset, stats: ChannelStats,
                       temperature: float = 0.1) -> FeatureBank:
    _, emb = encode_dataset(state, train.images, stats)
    emb = emb.astype(np.float64)
    # re-normalize after the float32 -> float64 cast so the bank invariant is tight
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return FeatureBank(emb, train.labels, train.num_classes, temperature)


def knn_scores(bank: FeatureBank, queries: np.ndarray, k: int) -> np.ndarray:
    """Class scores ``sum exp(s / tau)`` over each query's top-k neighbours."""
    if len(bank) == 0:
        raise EmptyBankError("feature bank is empty")
    if not 1 <= k:
        raise ValueError(f"k must be >= 1, got {k}")
    k = min(k, len(bank))
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    sims = queries @ bank.features.T
    # stable sort on -sim keeps bank order among exact ties
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    top_sims = np.take_along_axis(sims, top, axis=1)
    weights = np.exp((top_sims - 1.0) / bank.temperature)  # shift by the max possible sim
    scores = np.zeros((len(queries), bank.num_classes))
    rows = np.repeat(np.arange(len(queries)), k)
    np.add.at(scores, (rows, bank.labels[top].ravel()), weights.ravel())
    return scores


def knn_predict(bank: FeatureBank, query: np.ndarray, k: int = 200) -> int:
    """Weighted vote of the k most cosine-similar bank rows; ties go to the smaller class."""
    return int(np.argmax(knn_scores(bank, query, k)[0]))


def _per_class(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> list[float]:
    out = []
    for c in range(num_classes):
        sel = labels == c
        out.append(float((pred[sel] == c).mean()) if sel.any() else 0.0)
    return out


def knn_evaluate(state: EncoderState, train: LabeledDataset, test: LabeledDataset, stats: ChannelStats,
                 k: int = 200, temperature: float = 0.1) -> EvalResult:
    bank = build_feature_bank(state, train, stats, temperature)
    _, emb = encode_dataset(state, test.images, stats)
    emb = emb.astype(np.float64)
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    pred = np.argmax(knn_scores(bank, emb, k), axis=1)
    return EvalResult(float((pred == test.labels).mean()), _per_class(pred, test.labels, test.num_classes),
                      len(test), "knn")


def train_linear_classifier(feats: np.ndarray, labels: np.ndarray, num_classes: int,
                            adam: AdamConfig | None = None, epochs: int = 50, batch_size: int = 128,
                            seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression trained with Adam under a per-step cosine schedule."""
    adam = adam or AdamConfig()
    feats = np.asarray(feats, dtype=np.float32)
    weight = T.Tensor(np.zeros((feats.shape[1], num_classes), dtype=np.float32), requires_grad=True)
    bias = T.Tensor(np.zeros(num_classes, dtype=np.float32), requires_grad=True)
    opt = Adam([weight, bias], adam)
    rng = np.random.default_rng(seed)
    steps_per_epoch = max(1, math.ceil(len(feats) / batch_size))
    total_steps = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(feats))
        for start in range(0, len(feats), batch_size):
            idx = order[start:start + batch_size]
            lr = adam.lr * 0.5 * (1 + math.cos(math.pi * step / total_steps))
            opt.zero_grad()
            loss = T.softmax_cross_entropy(T.affine(T.Tensor(feats[idx]), weight, bias), labels[idx])
            loss.backward()
            opt.step(lr)
            step += 1
    return weight.data, bias.data


def linear_evaluate_features(train_feats: np.ndarray, train_labels: np.ndarray, test_feats: np.ndarray,
                             test_labels: np.ndarray, num_classes: int, adam: AdamConfig | None = None,
                             epochs: int = 50, batch_size: int = 128, seed: int = 0) -> EvalResult:
    w, b = train_linear_classifier(train_feats, train_labels, num_classes, adam, epochs, batch_size, seed)
    pred = np.argmax(np.asarray(test_feats, dtype=np.float32) @ w + b, axis=1)
    return EvalResult(float((pred == test_labels).mean()), _per_class(pred, test_labels, num_classes),
                      len(test_labels), "linear")


def linear_evaluate(state: EncoderState, train: LabeledDataset, test: LabeledDataset, stats: ChannelStats,
                    adam: AdamConfig | None = None, epochs: int = 50, batch_size: int = 128,
                    seed: int = 0) -> EvalResult:
    """Fit one affine layer on frozen penultimate features; the encoder is never updated."""
    train_feats, _ = encode_dataset(state, train.images, stats)
    test_feats, _ = encode_dataset(state, test.images, stats)
    return linear_evaluate_features(train_feats, train.labels, test_feats, test.labels, train.num_classes,
                                    adam, epochs, batch_size, seed)
