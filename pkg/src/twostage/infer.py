"""Category-level selective inference and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DomainError, StateError
from .tensor import no_grad

PROTOCOLS = ("base-to-novel", "all-to-all")
METRIC_COLUMNS = ("protocol", "seed", "peft", "alpha", "M", "k", "base_acc", "novel_acc", "hm",
                  "text_encoder_calls")


def cosine_scores(img: np.ndarray, vectors: np.ndarray, tau: float) -> np.ndarray:
    """tau * cosine between unit image embeddings (N, d) and class vectors (C, d).

    Each score is an independent elementwise product + sum, so a column's value
    never depends on which other columns share the matrix.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    norms = np.sqrt((vectors * vectors).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        raise DomainError("zero-norm class vector")
    unit = vectors / norms
    return tau * (img[:, None, :] * unit[None, :, :]).sum(axis=-1)


def _argmax_lowest(scores: np.ndarray, cats: np.ndarray) -> np.ndarray:
    return cats[np.argmax(scores, axis=1)]


def class_vectors(categories, model, classifier=None, cache: dict | None = None) -> np.ndarray:
    """Rows for ``categories``: classifier rows for base ids, text embeddings otherwise.

    Text embeddings are computed once per category per ``cache``.
    """
    rows = []
    missing = []
    cache = {} if cache is None else cache
    for c in categories:
        if classifier is not None and classifier.has(c):
            continue
        if c not in cache:
            if not 0 <= c < model.config.n_classes:
                raise ArgumentError(f"category {c} is neither a base class nor in the vocabulary")
            missing.append(c)
    if missing:
        with no_grad():
            emb = model.encode_texts(missing).data
        cache.update({c: emb[i] for i, c in enumerate(missing)})
    for c in categories:
        if classifier is not None and classifier.has(c):
            rows.append(classifier.row(c))
        else:
            rows.append(cache[c])
    return np.stack(rows)


def selective_predict_many(images, categories, model, classifier=None,
                           cache: dict | None = None) -> np.ndarray:
    """Predict over ``categories``: base ids via classifier rows, novel ids via the text encoder."""
    cats = np.asarray(sorted(int(c) for c in categories))
    if cats.size == 0:
        raise ArgumentError("empty category set")
    vecs = class_vectors(cats.tolist(), model, classifier, cache)
    with no_grad():
        img = model.encode_images(images).data
    return _argmax_lowest(cosine_scores(img, vecs, model.tau), cats)


def selective_predict(x, categories, model, classifier=None) -> int:
    return int(selective_predict_many(np.asarray(x)[None], categories, model, classifier)[0])


def harmonic_mean(base: float, novel: float) -> float:
    if base < 0 or novel < 0:
        raise DomainError("accuracies must be non-negative")
    if base == 0 and novel == 0:
        raise DomainError("harmonic mean undefined when both accuracies are zero")
    return 2.0 * base * novel / (base + novel)


@dataclass
class Metrics:
    protocol: str
    base_acc: float
    novel_acc: float | None
    hm: float | None
    text_encoder_calls: int

    def as_row(self, **extra) -> dict:
        row = {"protocol": self.protocol, "base_acc": self.base_acc, "novel_acc": self.novel_acc,
               "hm": self.hm, "text_encoder_calls": self.text_encoder_calls}
        row.update(extra)
        return row


def accuracy(pred, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise StateError("empty evaluation set")
    return 100.0 * float(np.mean(np.asarray(pred) == labels))


def evaluate(protocol: str, model, classifier, task) -> Metrics:
    """Held-out accuracy under ``protocol``.

    base-to-novel scores base samples against B and novel samples against N
    (two separate problems) and reports their harmonic mean; all-to-all scores
    base samples against B only.  Pass ``classifier=None`` to score base
    classes through the text encoder (plain zero-shot path).
    """
    if protocol not in PROTOCOLS:
        raise ArgumentError(f"unknown protocol {protocol!r}")
    if len(task.eval_base_labels) == 0:
        raise StateError("task has no base evaluation set")
    calls_before = model.text_calls
    cache: dict = {}
    base_pred = selective_predict_many(task.eval_base_images, task.base, model, classifier, cache)
    base_acc = accuracy(base_pred, task.eval_base_labels)
    if protocol == "all-to-all":
        return Metrics(protocol, base_acc, None, None, model.text_calls - calls_before)
    if not task.novel or len(task.eval_novel_labels) == 0:
        raise StateError("base-to-novel evaluation needs novel classes and a novel evaluation set")
    novel_pred = selective_predict_many(task.eval_novel_images, task.novel, model, classifier, cache)
    novel_acc = accuracy(novel_pred, task.eval_novel_labels)
    hm = harmonic_mean(base_acc, novel_acc) if (base_acc or novel_acc) else 0.0
    return Metrics(protocol, base_acc, novel_acc, hm, model.text_calls - calls_before)


def metrics_csv(rows: list[dict], config_hash: str = "") -> str:
    """One line per row in METRIC_COLUMNS order; ``None`` becomes an empty cell."""
    import csv
    import io

    buf = io.StringIO()
    if config_hash:
        buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for row in rows:
        out = []
        for col in METRIC_COLUMNS:
            v = row.get(col)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(f"{v:.6f}")
            else:
                out.append(str(v))
        w.writerow(out)
    return buf.getvalue()
