"""Tokenizer, vocabulary, the three classifiers, and prediction ingestion."""

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from multippi import textpred as tp
from multippi.errors import (AlignmentError, DegenerateModelError,
                             ParameterError, PredictionFormatError)
from multippi.ingest import CAUSE_CLASSES, CodClass, VaRecord

NC, COM, EXT, MAT, ATB = CAUSE_CLASSES


def vocab_of(corpus, min_count=1):
    return tp.build_vocabulary([tp.tokenize(t) for t in corpus], min_count)


def make_vocab(tokens):
    """Vocabulary stub over explicit feature names."""
    return tp.Vocabulary(index={t: i for i, t in enumerate(tokens)},
                         doc_freq=np.ones(len(tokens), dtype=np.int64),
                         n_docs=1, total_tokens_raw=len(tokens),
                         total_tokens_kept=len(tokens))


def sv(pairs):
    if not pairs:
        return tp.SparseVector(np.empty(0, dtype=np.int64), np.empty(0))
    idx, w = zip(*pairs)
    return tp.SparseVector(np.asarray(idx, dtype=np.int64), np.asarray(w, dtype=float))


# -- tokenize ----------------------------------------------------------------

def test_tokenize_whitespace():
    assert tp.tokenize("the deceased had been burnt") == \
        ["the", "deceased", "had", "been", "burnt"]


def test_tokenize_punctuation_and_decimals():
    assert tp.tokenize("died within 1.5 hours!") == ["died", "within", "1.5", "hours"]


def test_tokenize_empty():
    assert tp.tokenize("") == []


@given(st.text(max_size=200))
@settings(max_examples=60)
def test_tokenize_properties(text):
    tokens = tp.tokenize(text)
    for tok in tokens:
        assert tok == tok.lower()
        assert tok.strip()
        assert not all(not ch.isalnum() and ch != "." for ch in tok)


# -- vocabulary / vectorize ----------------------------------------------------

def test_build_vocabulary_first_occurrence_order():
    vocab = tp.build_vocabulary([["a", "b"], ["b", "c"]], 1)
    assert vocab.index == {"a": 0, "b": 1, "c": 2}
    assert vocab.total_tokens_raw == 4 and vocab.total_tokens_kept == 4


def test_build_vocabulary_min_count():
    vocab = tp.build_vocabulary([["a", "b"], ["b", "c"]], 2)
    assert vocab.index == {"b": 0}
    assert vocab.total_tokens_kept == 2


def test_build_vocabulary_reports_totals():
    vocab = tp.build_vocabulary([["x", "x", "y"], ["y", "z"]], 2)
    assert vocab.total_tokens_raw == 5
    assert vocab.total_tokens_kept == 4          # x twice + y twice


def test_build_vocabulary_errors():
    with pytest.raises(ParameterError):
        tp.build_vocabulary([], 1)
    with pytest.raises(ParameterError):
        tp.build_vocabulary([["a"], ["b"]], 5)


def test_vectorize_counts():
    vocab = tp.build_vocabulary([["a", "b"], ["b", "c"]], 1)
    vec = tp.vectorize(["b", "b", "c"], vocab, "count")
    assert vec.indices.tolist() == [1, 2]
    assert vec.weights.tolist() == [2.0, 1.0]


def test_vectorize_out_of_vocabulary_empty():
    vocab = tp.build_vocabulary([["a"]], 1)
    vec = tp.vectorize(["q", "r"], vocab, "count")
    assert vec.nnz == 0


def test_vectorize_tfidf_hand_computed():
    # three documents: a appears in all, b in one, c in one
    corpus = [["a", "b"], ["a", "c"], ["a"]]
    vocab = tp.build_vocabulary(corpus, 1)
    vec = tp.vectorize(["a", "a", "b"], vocab, "tfidf")
    # token in every document: log((1+3)/(1+3)) = 0, weight = tf * 1
    idf_a = np.log(4.0 / 4.0) + 1.0
    idf_b = np.log(4.0 / 2.0) + 1.0
    assert vec.weights[0] == pytest.approx(2.0 * idf_a, abs=1e-12)
    assert vec.weights[1] == pytest.approx(1.0 * idf_b, abs=1e-12)


def test_sparse_vector_validation():
    with pytest.raises(ParameterError):
        tp.SparseVector(np.array([2, 1]), np.array([1.0, 1.0]))
    with pytest.raises(ParameterError):
        tp.SparseVector(np.array([0]), np.array([np.inf]))


def test_sparse_vector_dot():
    a = sv([(0, 1.0), (3, 2.0), (7, 1.5)])
    b = sv([(3, 4.0), (5, 1.0), (7, 2.0)])
    assert a.dot(b) == pytest.approx(2.0 * 4.0 + 1.5 * 2.0)
    assert sv([]).dot(a) == 0.0


# -- naive bayes ----------------------------------------------------------------

def test_nb_single_class_always_predicted():
    vocab = vocab_of(["fever cough", "fever chills"])
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in ["fever cough", "fever chills"]], vocab)
    model = tp.train_nb(vectors, [COM, COM], vocabulary=vocab)
    assert model.predict(tp.vectorize(["anything"], vocab)) is COM


def test_nb_hand_computed_two_class():
    corpus = ["cough fever", "crash road cough"]
    vocab = vocab_of(corpus)          # cough:0 fever:1 crash:2 road:3
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in corpus], vocab)
    model = tp.train_nb(vectors, [COM, EXT], alpha=1.0, vocabulary=vocab)
    # class COM: counts (1,1,0,0), total 2, V=4 -> smoothed (2,2,1,1)/6
    # class EXT: counts (1,0,1,1), total 3, V=4 -> smoothed (2,1,2,2)/7
    com_row = model.log_likelihoods[model.classes.index(COM)]
    ext_row = model.log_likelihoods[model.classes.index(EXT)]
    assert np.allclose(np.exp(com_row), np.array([2, 2, 1, 1]) / 6.0, atol=1e-12)
    assert np.allclose(np.exp(ext_row), np.array([2, 1, 2, 2]) / 7.0, atol=1e-12)
    assert np.allclose(np.exp(model.log_priors), [0.5, 0.5], atol=1e-12)


def test_nb_rows_normalize():
    rng = np.random.default_rng(0)
    corpus = [" ".join(rng.choice(list("abcdefg"), size=6)) for _ in range(20)]
    vocab = vocab_of(corpus)
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in corpus], vocab)
    labels = [CAUSE_CLASSES[i % 3] for i in range(20)]
    model = tp.train_nb(vectors, labels, alpha=0.7, vocabulary=vocab)
    sums = np.exp(model.log_likelihoods).sum(axis=1)
    assert np.all(np.abs(sums - 1.0) <= 1e-12)
    assert np.exp(model.log_priors).sum() == pytest.approx(1.0, abs=1e-12)


def test_nb_duplicated_corpus_same_priors_and_predictions():
    corpus = ["cough fever", "crash road", "fever chills", "road fall"]
    labels = [COM, EXT, COM, EXT]
    vocab = vocab_of(corpus)
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in corpus], vocab)
    model_once = tp.train_nb(vectors, labels, vocabulary=vocab)
    model_twice = tp.train_nb(vectors * 2, labels * 2, vocabulary=vocab)
    assert np.array_equal(model_once.log_priors, model_twice.log_priors)
    queries = [tp.vectorize(tp.tokenize(t), vocab) for t in corpus + ["fever road"]]
    assert model_once.predict_many(queries) == model_twice.predict_many(queries)
    # with negligible smoothing the observed-token distributions match too
    # (zero-count cells keep a total-count dependence through the smoothing)
    tiny_once = tp.train_nb(vectors, labels, alpha=1e-9, vocabulary=vocab)
    tiny_twice = tp.train_nb(vectors * 2, labels * 2, alpha=1e-9, vocabulary=vocab)
    observed = np.exp(tiny_once.log_likelihoods) > 1e-6
    assert np.allclose(tiny_once.log_likelihoods[observed],
                       tiny_twice.log_likelihoods[observed], atol=1e-6)


def test_nb_alpha_validation():
    vocab = make_vocab(["t"])
    with pytest.raises(ParameterError):
        tp.train_nb([sv([(0, 1.0)])], [COM], alpha=0.0, vocabulary=vocab)


# -- knn ----------------------------------------------------------------------

def test_knn_identical_vector_k1():
    train = [(sv([(0, 1.0)]), COM), (sv([(1, 1.0)]), EXT), (sv([(2, 1.0)]), MAT)]
    assert tp.predict_knn(train, sv([(1, 1.0)]), k=1) is EXT


def test_knn_k_equals_train_size_majority():
    train = [(sv([(0, 1.0)]), COM), (sv([(1, 1.0)]), EXT),
             (sv([(0, 1.0), (1, 1.0)]), EXT)]
    assert tp.predict_knn(train, sv([(0, 2.0)]), k=3) is EXT


def test_knn_matches_brute_force_oracle():
    rng = np.random.default_rng(5)
    dim = 4
    train_dense = rng.uniform(0, 1, (5, dim))
    labels = [0, 1, 2, 1, 0]
    train = [(sv([(j, train_dense[i, j]) for j in range(dim)]), CAUSE_CLASSES[labels[i]])
             for i in range(5)]
    for _ in range(20):
        q = rng.uniform(0, 1, dim)
        got = tp.predict_knn(train, sv([(j, q[j]) for j in range(dim)]), k=3)
        want = oracles.brute_knn(train_dense, labels, q, 3, 5)
        assert got is CAUSE_CLASSES[want]


def test_knn_zero_norm_query_similarity_zero():
    train = [(sv([(0, 1.0)]), EXT), (sv([(1, 1.0)]), COM)]
    # all similarities 0: the k=1 nearest is the lowest training index
    assert tp.predict_knn(train, sv([]), k=1) is EXT


def test_knn_similarity_tie_lower_index_wins():
    train = [(sv([(0, 1.0)]), MAT), (sv([(0, 2.0)]), COM)]
    # identical direction: both cosines are exactly 1; index 0 wins
    assert tp.predict_knn(train, sv([(0, 3.0)]), k=1) is MAT


def test_knn_vote_tie_class_order_wins():
    train = [(sv([(0, 1.0)]), EXT), (sv([(0, 1.0), (1, 0.1)]), COM)]
    # one vote each at k=2: enumeration order puts COM before EXT
    assert tp.predict_knn(train, sv([(0, 1.0)]), k=2) is COM


def test_knn_parameter_validation():
    with pytest.raises(ParameterError):
        tp.predict_knn([], sv([]), k=1)
    train = [(sv([(0, 1.0)]), COM)]
    with pytest.raises(ParameterError):
        tp.predict_knn(train, sv([]), k=2)


def test_knn_model_bulk_matches_single():
    rng = np.random.default_rng(6)
    corpus = [" ".join(rng.choice(list("abcdefgh"), size=5)) for _ in range(15)]
    vocab = vocab_of(corpus)
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in corpus], vocab, "tfidf")
    labels = [CAUSE_CLASSES[i % 4] for i in range(15)]
    model = tp.train_knn(vectors, labels, k=5, vocabulary=vocab)
    queries = vectors[:6]
    assert model.predict_many(queries) == [model.predict(q) for q in queries]


# -- svm ----------------------------------------------------------------------

def test_svm_separable_toy_perfect_training_accuracy():
    vocab = make_vocab(["f0", "f1"])
    vectors = [sv([(0, 2.0), (1, 0.1)]), sv([(0, 1.8)]),
               sv([(1, 2.2)]), sv([(0, 0.1), (1, 1.9)]),
               sv([(0, 2.4), (1, 0.2)]), sv([(0, 0.2), (1, 2.0)])]
    labels = [COM, COM, EXT, EXT, COM, EXT]
    model = tp.train_svm_ovr(vectors, labels, c=1.0, vocabulary=vocab)
    assert model.predict_many(vectors) == labels


def test_svm_constant_features_majority_fallback():
    vocab = make_vocab(["f0"])
    vectors = [sv([(0, 1.0)])] * 5
    labels = [EXT, EXT, EXT, COM, COM]
    model = tp.train_svm_ovr(vectors, labels, c=1.0, vocabulary=vocab)
    # closed-form hinge minimum on constant features: decision +1 for the
    # majority class, -1 for the minority, reached through the biases
    assert model.predict(sv([(0, 1.0)])) is EXT
    scores = model.decision_scores([sv([(0, 1.0)])])[0]
    assert scores[model.classes.index(EXT)] > scores[model.classes.index(COM)]


def test_svm_feature_scaling_with_rescaled_c():
    rng = np.random.default_rng(7)
    vocab = make_vocab(["f0", "f1", "f2"])
    vectors, labels = [], []
    for i in range(30):
        center = np.array([2.0, 0.2, 1.0]) if i % 2 else np.array([0.2, 2.0, 1.0])
        dense = np.maximum(center + rng.normal(0, 0.3, 3), 0.0)
        vectors.append(sv([(j, dense[j]) for j in range(3) if dense[j] > 0]))
        labels.append(COM if i % 2 else EXT)
    model = tp.train_svm_ovr(vectors, labels, c=1.0, vocabulary=vocab)
    scaled = [tp.SparseVector(v.indices, v.weights * 2.0) for v in vectors]
    model_scaled = tp.train_svm_ovr(scaled, labels, c=0.25, vocabulary=vocab)
    assert model.predict_many(vectors) == model_scaled.predict_many(scaled)


def test_svm_single_class_error():
    vocab = make_vocab(["f0"])
    with pytest.raises(DegenerateModelError):
        tp.train_svm_ovr([sv([(0, 1.0)])] * 3, [COM] * 3, vocabulary=vocab)


def test_svm_c_validation():
    vocab = make_vocab(["f0"])
    with pytest.raises(ParameterError):
        tp.train_svm_ovr([sv([(0, 1.0)])] * 2, [COM, EXT], c=0.0, vocabulary=vocab)


def test_svm_deterministic():
    rng = np.random.default_rng(8)
    vocab = make_vocab(list("abcd"))
    vectors = [sv([(j, float(rng.integers(1, 4))) for j in range(4)]) for _ in range(12)]
    labels = [CAUSE_CLASSES[i % 3] for i in range(12)]
    m1 = tp.train_svm_ovr(vectors, labels, vocabulary=vocab, seed=3)
    m2 = tp.train_svm_ovr(vectors, labels, vocabulary=vocab, seed=3)
    assert np.array_equal(m1.weights, m2.weights)
    assert np.array_equal(m1.biases, m2.biases)


# -- external predictions / prediction sets ------------------------------------

def write_predictions(path, rows):
    path.write_text("record_id,predicted_label\n" + "\n".join(rows) + "\n",
                    encoding="utf-8")
    return path


def test_load_external_drop_policy(tmp_path):
    rows = [f"r{i},communicable" for i in range(8)] + \
        ["r8,unclassified", "r9,unclassified"]
    path = write_predictions(tmp_path / "p.csv", rows)
    known = {f"r{i}" for i in range(10)}
    ps = tp.load_external_predictions(path, "drop", known)
    assert len(ps.predictions) == 8
    assert ps.dropped == ("r8", "r9")
    assert ps.unclassified_count == 2


def test_load_external_keep_as_error(tmp_path):
    rows = ["r0,external", "r1,unclassified", "r2,unclassified"]
    path = write_predictions(tmp_path / "p.csv", rows)
    with pytest.raises(PredictionFormatError) as err:
        tp.load_external_predictions(path, "keep-as-error", {"r0", "r1", "r2"})
    assert "r1" in str(err.value) and "r2" in str(err.value)


def test_load_external_impute_majority(tmp_path):
    rows = ["r0,external", "r1,unclassified", "r2,unclassified"]
    path = write_predictions(tmp_path / "p.csv", rows)
    ps = tp.load_external_predictions(path, "impute-majority", {"r0", "r1", "r2"},
                                      majority_class=CodClass.NON_COMMUNICABLE)
    assert ps.predictions["r1"] is CodClass.NON_COMMUNICABLE
    assert ps.predictions["r2"] is CodClass.NON_COMMUNICABLE
    assert ps.imputed == ("r1", "r2")


def test_load_external_unknown_id(tmp_path):
    path = write_predictions(tmp_path / "p.csv", ["zz,external"])
    with pytest.raises(AlignmentError, match="zz"):
        tp.load_external_predictions(path, "drop", {"r0"})


def test_load_external_unknown_label(tmp_path):
    path = write_predictions(tmp_path / "p.csv", ["r0,banana"])
    with pytest.raises(PredictionFormatError, match="banana"):
        tp.load_external_predictions(path, "drop", {"r0"})


def test_load_external_requires_majority_for_impute(tmp_path):
    path = write_predictions(tmp_path / "p.csv", ["r0,external"])
    with pytest.raises(ParameterError):
        tp.load_external_predictions(path, "impute-majority", {"r0"})


def test_prediction_set_rejects_surviving_unclassified():
    with pytest.raises(PredictionFormatError):
        tp.PredictionSet(predictions={"r0": CodClass.UNCLASSIFIED},
                         provenance="external:x", policy="drop")


def make_records(texts, causes=None, site="a"):
    causes = causes or [None] * len(texts)
    return [VaRecord(record_id=f"r{i}", site=site, age=40.0, narrative=t,
                     true_cause=c) for i, (t, c) in enumerate(zip(texts, causes))]


def test_predict_all_one_per_record_and_deterministic():
    texts = ["fever cough days", "crash on the road", "burnt by fire"]
    train_texts = ["fever cough", "road crash", "fire burnt", "cough chills"]
    train_labels = [COM, EXT, EXT, COM]
    vocab = vocab_of(train_texts)
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in train_texts], vocab)
    model = tp.train_nb(vectors, train_labels, vocabulary=vocab)
    records = make_records(texts)
    ps1 = tp.predict_all(model, records)
    ps2 = tp.predict_all(model, records)
    assert len(ps1.predictions) == 3
    assert ps1.provenance == "nb"
    assert ps1.predictions == ps2.predictions


def test_predict_all_confusion_marginals_match_hand_tally():
    from multippi import experiment
    texts = ["fever cough", "cough fever chills", "crash road", "road accident crash",
             "burnt fire", "fever days", "fell tree", "cough blood", "fire house",
             "crash bus"]
    truth = [COM, COM, EXT, EXT, EXT, COM, EXT, COM, EXT, EXT]
    vocab = vocab_of(texts)
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in texts], vocab)
    model = tp.train_nb(vectors, truth, vocabulary=vocab)
    records = make_records(texts, causes=truth)
    ps = tp.predict_all(model, records)
    cm = experiment.confusion_matrix(truth, [ps.predictions[r.record_id] for r in records])
    # independent tally of marginals
    pred_list = [ps.predictions[r.record_id] for r in records]
    for i, cause in enumerate(CAUSE_CLASSES):
        assert cm.counts[i].sum() == sum(1 for t in truth if t is cause)
        assert cm.counts[:, i].sum() == sum(1 for p in pred_list if p is cause)


# -- serialization --------------------------------------------------------------

@pytest.mark.parametrize("kind", ["nb", "knn", "svm"])
def test_model_serialization_round_trip(kind):
    rng = np.random.default_rng(9)
    corpus = [" ".join(rng.choice(list("abcdef"), size=6)) for _ in range(12)]
    labels = [CAUSE_CLASSES[i % 3] for i in range(12)]
    vocab = vocab_of(corpus)
    weighting = "count" if kind == "nb" else "tfidf"
    vectors = tp.vectorize_corpus([tp.tokenize(t) for t in corpus], vocab, weighting)
    if kind == "nb":
        model = tp.train_nb(vectors, labels, vocabulary=vocab, weighting=weighting)
    elif kind == "knn":
        model = tp.train_knn(vectors, labels, k=3, vocabulary=vocab)
    else:
        model = tp.train_svm_ovr(vectors, labels, vocabulary=vocab)
    text = tp.model_to_json(model)
    loaded = tp.model_from_json(text)
    queries = vectors[:5]
    assert loaded.predict_many(queries) == model.predict_many(queries)
    doc = json.loads(text)
    assert doc["format"] == "multippi-text-model" and doc["version"] == 1


def test_model_from_json_rejects_foreign_documents():
    with pytest.raises(PredictionFormatError):
        tp.model_from_dict({"format": "something-else"})
