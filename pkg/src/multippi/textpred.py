"""Bag-of-words cause-of-death predictors and external prediction ingestion.

Tokenization lowercases and splits on whitespace/punctuation, keeping
decimal numbers intact. Vectors are sparse token counts or tf-idf with
the smoothed weight ``tf * (ln((1+D)/(1+df)) + 1)``. The three bundled
classifiers (multinomial Naive Bayes, cosine KNN, linear one-vs-rest
SVM) are deterministic given their training data, hyperparameters, and
seed; ties always break by the CodClass enumeration order.
"""

from __future__ import annotations

import csv
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse

from .errors import (AlignmentError, DegenerateModelError, ParameterError,
                     PredictionFormatError)
from .ingest import CAUSE_CLASSES, CodClass, VaRecord

_TOKEN_RE = re.compile(r"\d+\.\d+|[^\W_]+", re.UNICODE)

UNCLASSIFIED_POLICIES = ("drop", "impute-majority", "keep-as-error")


def tokenize(text: str) -> list[str]:
    """Lowercased tokens; punctuation-only fragments never survive."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Dense token index in first-occurrence order, with document frequencies."""

    index: dict[str, int]
    doc_freq: np.ndarray
    n_docs: int
    total_tokens_raw: int
    total_tokens_kept: int

    @property
    def size(self) -> int:
        return len(self.index)

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "doc_freq": [int(v) for v in self.doc_freq],
            "n_docs": self.n_docs,
            "total_tokens_raw": self.total_tokens_raw,
            "total_tokens_kept": self.total_tokens_kept,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Vocabulary":
        return cls(index=dict(data["index"]),
                   doc_freq=np.asarray(data["doc_freq"], dtype=np.int64),
                   n_docs=int(data["n_docs"]),
                   total_tokens_raw=int(data["total_tokens_raw"]),
                   total_tokens_kept=int(data["total_tokens_kept"]))


def build_vocabulary(corpus: list[list[str]], min_count: int = 1) -> Vocabulary:
    """Index tokens with corpus frequency >= min_count, first occurrence first."""
    if not corpus:
        raise ParameterError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    order: dict[str, None] = {}
    total_raw = 0
    for tokens in corpus:
        total_raw += len(tokens)
        counts.update(tokens)
        for tok in tokens:
            order.setdefault(tok, None)
    index = {}
    kept_total = 0
    for tok in order:
        if counts[tok] >= min_count:
            index[tok] = len(index)
            kept_total += counts[tok]
    if not index:
        raise ParameterError(
            f"vocabulary is empty after filtering at min_count={min_count}")
    doc_freq = np.zeros(len(index), dtype=np.int64)
    for tokens in corpus:
        for tok in set(tokens):
            col = index.get(tok)
            if col is not None:
                doc_freq[col] += 1
    return Vocabulary(index=index, doc_freq=doc_freq, n_docs=len(corpus),
                      total_tokens_raw=total_raw, total_tokens_kept=kept_total)


@dataclass(frozen=True)
class SparseVector:
    """(index, weight) pairs with strictly increasing indices."""

    indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float))
        if self.indices.shape != self.weights.shape:
            raise ParameterError("indices and weights must align")
        if self.indices.size and np.any(np.diff(self.indices) <= 0):
            raise ParameterError("indices must be strictly increasing")
        if not np.all(np.isfinite(self.weights)):
            raise ParameterError("weights must be finite")

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.weights ** 2)))

    def dot(self, other: "SparseVector") -> float:
        """Sparse dot over shared indices (ascending order)."""
        if self.nnz == 0 or other.nnz == 0:
            return 0.0
        pos = np.searchsorted(self.indices, other.indices)
        match = pos < self.nnz
        match[match] = self.indices[pos[match]] == other.indices[match]
        return float(np.sum(self.weights[pos[match]] * other.weights[match]))


def vectorize(tokens: list[str], vocab: Vocabulary, weighting: str = "count") -> SparseVector:
    """Sparse counts (or smoothed tf-idf) of in-vocabulary tokens.

    Out-of-vocabulary tokens are ignored. The tf-idf weight is
    ``tf * (ln((1 + D) / (1 + df)) + 1)``: a token present in every
    document contributes ln(1) = 0 through the log part.
    """
    if weighting not in ("count", "tfidf"):
        raise ParameterError(f"unknown weighting {weighting!r}")
    ids = [vocab.index[t] for t in tokens if t in vocab.index]
    if not ids:
        return SparseVector(np.empty(0, dtype=np.int64), np.empty(0))
    indices, counts = np.unique(np.asarray(ids, dtype=np.int64), return_counts=True)
    weights = counts.astype(float)
    if weighting == "tfidf":
        idf = np.log((1.0 + vocab.n_docs) / (1.0 + vocab.doc_freq[indices])) + 1.0
        weights = weights * idf
    return SparseVector(indices, weights)


def vectorize_corpus(corpus: list[list[str]], vocab: Vocabulary,
                     weighting: str = "count") -> list[SparseVector]:
    return [vectorize(tokens, vocab, weighting) for tokens in corpus]


def _to_csr(vectors: list[SparseVector], n_cols: int) -> scipy.sparse.csr_matrix:
    indptr = np.zeros(len(vectors) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([v.nnz for v in vectors])
    if len(vectors):
        indices = np.concatenate([v.indices for v in vectors])
        data = np.concatenate([v.weights for v in vectors])
    else:
        indices, data = np.empty(0, dtype=np.int64), np.empty(0)
    return scipy.sparse.csr_matrix((data, indices, indptr), shape=(len(vectors), n_cols))


def _class_ids(labels: list[CodClass]) -> np.ndarray:
    lookup = {c: i for i, c in enumerate(CAUSE_CLASSES)}
    try:
        return np.asarray([lookup[lab] for lab in labels], dtype=np.int64)
    except KeyError as exc:
        raise ParameterError(f"labels must be concrete cause classes, got {exc}") from exc


# ---------------------------------------------------------------------------
# Naive Bayes


@dataclass(frozen=True)
class NbModel:
    """Multinomial Naive Bayes in log space with Laplace-alpha smoothing."""

    classes: tuple[CodClass, ...]
    log_priors: np.ndarray                 # (C,)
    log_likelihoods: np.ndarray            # (C, V)
    alpha: float
    vocabulary: Vocabulary
    weighting: str = "count"
    kind: str = "nb"

    def decision_scores(self, vectors: list[SparseVector]) -> np.ndarray:
        x = _to_csr(vectors, self.vocabulary.size)
        return x @ self.log_likelihoods.T + self.log_priors

    def predict_many(self, vectors: list[SparseVector]) -> list[CodClass]:
        scores = self.decision_scores(vectors)
        return [self.classes[j] for j in np.argmax(scores, axis=1)]

    def predict(self, vector: SparseVector) -> CodClass:
        return self.predict_many([vector])[0]


def train_nb(vectors: list[SparseVector], labels: list[CodClass],
             alpha: float = 1.0, vocabulary: Vocabulary | None = None,
             weighting: str = "count") -> NbModel:
    """Fit multinomial NB; class-conditional token distributions each sum to 1."""
    if alpha <= 0:
        raise ParameterError(f"smoothing alpha must be positive, got {alpha}")
    if len(vectors) != len(labels) or not vectors:
        raise ParameterError("need equally many vectors and labels, at least one")
    if vocabulary is None:
        raise ParameterError("train_nb requires the vocabulary for model metadata")
    v = vocabulary.size
    present = [c for c in CAUSE_CLASSES if c in set(labels)]
    counts = np.zeros((len(present), v))
    class_sizes = np.zeros(len(present))
    row_of = {c: i for i, c in enumerate(present)}
    for vec, lab in zip(vectors, labels):
        row = row_of[lab]
        class_sizes[row] += 1
        counts[row, vec.indices] += vec.weights
    log_priors = np.log(class_sizes / class_sizes.sum())
    smoothed = counts + alpha
    log_lik = np.log(smoothed) - np.log(smoothed.sum(axis=1))[:, None]
    return NbModel(classes=tuple(present), log_priors=log_priors,
                   log_likelihoods=log_lik, alpha=alpha,
                   vocabulary=vocabulary, weighting=weighting)


# ---------------------------------------------------------------------------
# K nearest neighbors


def _cosine_sims(queries: list[SparseVector], train: list[SparseVector],
                 n_cols: int) -> np.ndarray:
    """Pairwise cosine similarity; zero-norm vectors score 0 everywhere."""
    q = _to_csr(queries, n_cols)
    t = _to_csr(train, n_cols)
    dots = np.asarray((q @ t.T).todense())
    qn = np.asarray([v.norm() for v in queries])
    tn = np.asarray([v.norm() for v in train])
    denom = np.outer(qn, tn)
    sims = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return sims


def _knn_vote(sims: np.ndarray, label_ids: np.ndarray, k: int) -> int:
    # stable sort: equal similarities resolve to the lower training index
    order = np.argsort(-sims, kind="stable")[:k]
    votes = np.bincount(label_ids[order], minlength=len(CAUSE_CLASSES))
    return int(np.argmax(votes))


@dataclass(frozen=True)
class KnnModel:
    """Memorized training vectors queried by cosine similarity."""

    vectors: tuple[SparseVector, ...]
    labels: tuple[CodClass, ...]
    k: int
    vocabulary: Vocabulary
    weighting: str = "tfidf"
    kind: str = "knn"

    def predict_many(self, queries: list[SparseVector]) -> list[CodClass]:
        label_ids = _class_ids(list(self.labels))
        sims = _cosine_sims(queries, list(self.vectors), self.vocabulary.size)
        return [CAUSE_CLASSES[_knn_vote(row, label_ids, self.k)] for row in sims]

    def predict(self, query: SparseVector) -> CodClass:
        return self.predict_many([query])[0]


def predict_knn(train: list[tuple[SparseVector, CodClass]], query: SparseVector,
                k: int = 9, n_cols: int | None = None) -> CodClass:
    """Majority label among the k cosine-nearest training vectors.

    Similarity ties resolve to the lower training index; vote ties to the
    earlier class in enumeration order.
    """
    if not train:
        raise ParameterError("KNN needs a non-empty training set")
    if not 1 <= k <= len(train):
        raise ParameterError(f"k must lie in [1, {len(train)}], got {k}")
    vectors = [v for v, _ in train]
    label_ids = _class_ids([lab for _, lab in train])
    if n_cols is None:
        highest = [v.indices[-1] for v in vectors + [query] if v.nnz]
        n_cols = int(max(highest)) + 1 if highest else 1
    sims = _cosine_sims([query], vectors, n_cols)[0]
    return CAUSE_CLASSES[_knn_vote(sims, label_ids, k)]


def train_knn(vectors: list[SparseVector], labels: list[CodClass], k: int = 9,
              vocabulary: Vocabulary | None = None, weighting: str = "tfidf") -> KnnModel:
    if not vectors or len(vectors) != len(labels):
        raise ParameterError("need equally many vectors and labels, at least one")
    if not 1 <= k <= len(vectors):
        raise ParameterError(f"k must lie in [1, {len(vectors)}], got {k}")
    if vocabulary is None:
        raise ParameterError("train_knn requires the vocabulary for model metadata")
    return KnnModel(vectors=tuple(vectors), labels=tuple(labels), k=k,
                    vocabulary=vocabulary, weighting=weighting)


# ---------------------------------------------------------------------------
# Linear one-vs-rest SVM


@dataclass(frozen=True)
class SvmModel:
    """One weight vector and bias per class; prediction is argmax decision."""

    classes: tuple[CodClass, ...]
    weights: np.ndarray                    # (C, V)
    biases: np.ndarray                     # (C,)
    c: float
    epochs: int
    seed: int
    vocabulary: Vocabulary
    weighting: str = "tfidf"
    kind: str = "svm"

    def decision_scores(self, vectors: list[SparseVector]) -> np.ndarray:
        x = _to_csr(vectors, self.vocabulary.size)
        return x @ self.weights.T + self.biases

    def predict_many(self, vectors: list[SparseVector]) -> list[CodClass]:
        scores = self.decision_scores(vectors)
        return [self.classes[j] for j in np.argmax(scores, axis=1)]

    def predict(self, vector: SparseVector) -> CodClass:
        return self.predict_many([vector])[0]


def train_svm_ovr(vectors: list[SparseVector], labels: list[CodClass],
                  c: float = 1.0, *, epochs: int = 60, seed: int = 0,
                  vocabulary: Vocabulary | None = None,
                  weighting: str = "tfidf") -> SvmModel:
    """Hinge-loss one-vs-rest classifiers by deterministic subgradient descent.

    Per sample and class: shrink the weights by the L2 factor, and on a
    margin violation step along C * y * x (bias unpenalized). The step
    size decays harmonically; the returned weights average the epoch-end
    iterates of the second half of training for stability.
    """
    if c <= 0:
        raise ParameterError(f"C must be positive, got {c}")
    if not vectors or len(vectors) != len(labels):
        raise ParameterError("need equally many vectors and labels, at least one")
    if vocabulary is None:
        raise ParameterError("train_svm_ovr requires the vocabulary for model metadata")
    present = [cl for cl in CAUSE_CLASSES if cl in set(labels)]
    if len(present) < 2:
        raise DegenerateModelError(
            f"SVM training needs at least 2 classes, got {len(present)}")
    m = len(vectors)
    v = vocabulary.size
    n_classes = len(present)
    signs = np.empty((m, n_classes))
    for i, lab in enumerate(labels):
        signs[i] = -1.0
        signs[i, present.index(lab)] = 1.0
    lam = 1.0 / (c * m)                    # L2 strength of the mean objective
    w = np.zeros((n_classes, v))
    scale = 1.0
    b = np.zeros(n_classes)
    w_avg = np.zeros((n_classes, v))
    b_avg = np.zeros(n_classes)
    n_avg = 0
    avg_from = epochs // 2
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(m)
        for i in order:
            step += 1
            eta = 1.0 / (lam * (step + m))
            vec = vectors[i]
            margins = signs[i] * (scale * (w[:, vec.indices] @ vec.weights) + b)
            scale *= max(1.0 - eta * lam, 1e-12)
            violated = margins < 1.0
            if violated.any():
                coef = (eta / m) * signs[i, violated] / scale
                w[np.ix_(np.nonzero(violated)[0], vec.indices)] += \
                    coef[:, None] * vec.weights[None, :]
                b[violated] += (eta / m) * signs[i, violated]
            if scale < 1e-9:
                w *= scale
                scale = 1.0
        if epoch >= avg_from:
            w_avg += scale * w
            b_avg += b
            n_avg += 1
    w_final = (w_avg / n_avg) if n_avg else scale * w
    b_final = (b_avg / n_avg) if n_avg else b
    return SvmModel(classes=tuple(present), weights=w_final, biases=b_final,
                    c=c, epochs=epochs, seed=seed, vocabulary=vocabulary,
                    weighting=weighting)


def predict_svm(model: SvmModel, vector: SparseVector) -> CodClass:
    return model.predict(vector)


# ---------------------------------------------------------------------------
# Prediction sets


@dataclass(frozen=True)
class PredictionSet:
    """Record-id aligned predictions with the unclassified policy applied."""

    predictions: dict[str, CodClass]
    provenance: str
    policy: str
    dropped: tuple[str, ...] = ()
    imputed: tuple[str, ...] = ()
    unclassified_count: int = 0

    def __post_init__(self):
        bad = [rid for rid, c in self.predictions.items() if c is CodClass.UNCLASSIFIED]
        if bad:
            raise PredictionFormatError(
                f"UNCLASSIFIED predictions survived policy resolution: {bad[:5]}")

    def class_counts(self) -> dict[str, int]:
        counts = {c.value: 0 for c in CAUSE_CLASSES}
        for cause in self.predictions.values():
            counts[cause.value] += 1
        counts["unclassified"] = self.unclassified_count
        return counts

    def require_complete(self, record_ids: list[str]) -> None:
        missing = [rid for rid in record_ids if rid not in self.predictions]
        if missing:
            raise AlignmentError(
                f"{len(missing)} record(s) lack predictions, e.g. {missing[:5]}")

    def to_rows(self) -> list[dict]:
        return [{"record_id": rid, "predicted_label": cause.value}
                for rid, cause in self.predictions.items()]


_LABEL_BY_VALUE = {c.value: c for c in CodClass}


def load_external_predictions(path: str | Path, policy: str,
                              known_ids: set[str] | list[str],
                              majority_class: CodClass | None = None,
                              name: str = "external") -> PredictionSet:
    """Read (record_id, predicted_label) CSV and resolve unclassified rows.

    drop removes them (and enumerates the ids); impute-majority replaces
    them with the labeled subset's majority class; keep-as-error fails if
    any are present.
    """
    if policy not in UNCLASSIFIED_POLICIES:
        raise ParameterError(f"unknown unclassified policy {policy!r}")
    if policy == "impute-majority" and majority_class is None:
        raise ParameterError("impute-majority requires the labeled majority class")
    known = set(known_ids)
    path = Path(path)
    raw: dict[str, CodClass] = {}
    with path.open(newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        if "record_id" not in header or "predicted_label" not in header:
            raise PredictionFormatError(
                f"{path}: header must contain record_id and predicted_label")
        for row_number, row in enumerate(reader, start=2):
            rid = (row.get("record_id") or "").strip()
            label = (row.get("predicted_label") or "").strip().lower()
            if rid not in known:
                raise AlignmentError(
                    f"{path}:{row_number}: record id {rid!r} not in the loaded dataset")
            if rid in raw:
                raise AlignmentError(f"{path}:{row_number}: duplicate record id {rid!r}")
            if label not in _LABEL_BY_VALUE:
                raise PredictionFormatError(
                    f"{path}:{row_number}: unknown predicted label {label!r}")
            raw[rid] = _LABEL_BY_VALUE[label]
    unclassified = [rid for rid, c in raw.items() if c is CodClass.UNCLASSIFIED]
    dropped: tuple[str, ...] = ()
    imputed: tuple[str, ...] = ()
    if policy == "keep-as-error" and unclassified:
        raise PredictionFormatError(
            f"{path}: {len(unclassified)} unclassified prediction(s) under "
            f"keep-as-error policy: {sorted(unclassified)}")
    if policy == "drop":
        for rid in unclassified:
            del raw[rid]
        dropped = tuple(sorted(unclassified))
    elif policy == "impute-majority":
        for rid in unclassified:
            raw[rid] = majority_class
        imputed = tuple(sorted(unclassified))
    return PredictionSet(predictions=raw, provenance=f"external:{name}",
                         policy=policy, dropped=dropped, imputed=imputed,
                         unclassified_count=len(unclassified))


def predict_all(model, records: list[VaRecord]) -> PredictionSet:
    """One prediction per record from a trained bag-of-words model."""
    vectors = [vectorize(tokenize(r.narrative), model.vocabulary, model.weighting)
               for r in records]
    predicted = model.predict_many(vectors)
    return PredictionSet(
        predictions={r.record_id: cause for r, cause in zip(records, predicted)},
        provenance=model.kind, policy="drop")


# ---------------------------------------------------------------------------
# Model serialization (versioned, text-only)

_MODEL_FORMAT = "multippi-text-model"


def model_to_dict(model) -> dict:
    data = {"format": _MODEL_FORMAT, "version": 1, "kind": model.kind,
            "weighting": model.weighting, "vocabulary": model.vocabulary.to_dict(),
            "classes": [c.value for c in model.classes] if hasattr(model, "classes") else None}
    if model.kind == "nb":
        data.update(alpha=model.alpha,
                    log_priors=model.log_priors.tolist(),
                    log_likelihoods=model.log_likelihoods.tolist())
    elif model.kind == "knn":
        data.update(k=model.k,
                    labels=[c.value for c in model.labels],
                    vectors=[{"indices": v.indices.tolist(),
                              "weights": v.weights.tolist()} for v in model.vectors])
        data["classes"] = None
    elif model.kind == "svm":
        data.update(c=model.c, epochs=model.epochs, seed=model.seed,
                    weights=model.weights.tolist(), biases=model.biases.tolist())
    else:
        raise ParameterError(f"cannot serialize model kind {model.kind!r}")
    return data


def model_to_json(model) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True) + "\n"


def model_from_dict(data: dict):
    if data.get("format") != _MODEL_FORMAT:
        raise PredictionFormatError(f"not a {_MODEL_FORMAT} document")
    if data.get("version") != 1:
        raise PredictionFormatError(f"unsupported model version {data.get('version')!r}")
    vocab = Vocabulary.from_dict(data["vocabulary"])
    kind = data["kind"]
    if kind == "nb":
        return NbModel(classes=tuple(_LABEL_BY_VALUE[v] for v in data["classes"]),
                       log_priors=np.asarray(data["log_priors"]),
                       log_likelihoods=np.asarray(data["log_likelihoods"]),
                       alpha=float(data["alpha"]), vocabulary=vocab,
                       weighting=data["weighting"])
    if kind == "knn":
        vectors = tuple(SparseVector(np.asarray(v["indices"], dtype=np.int64),
                                     np.asarray(v["weights"]))
                        for v in data["vectors"])
        return KnnModel(vectors=vectors,
                        labels=tuple(_LABEL_BY_VALUE[v] for v in data["labels"]),
                        k=int(data["k"]), vocabulary=vocab, weighting=data["weighting"])
    if kind == "svm":
        return SvmModel(classes=tuple(_LABEL_BY_VALUE[v] for v in data["classes"]),
                        weights=np.asarray(data["weights"]),
                        biases=np.asarray(data["biases"]), c=float(data["c"]),
                        epochs=int(data["epochs"]), seed=int(data["seed"]),
                        vocabulary=vocab, weighting=data["weighting"])
    raise PredictionFormatError(f"unknown model kind {kind!r}")


def model_from_json(text: str):
    return model_from_dict(json.loads(text))
