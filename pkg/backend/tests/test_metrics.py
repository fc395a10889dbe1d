import json

import numpy as np
import pandas as pd
import pytest

from app.errors import MetricInputError
from app.metrics import (
    AVG_COLUMN,
    CRITERIA,
    ChrfConfig,
    CriterionTable,
    aggregate_criteria,
    check_scale_value,
    chrf_corpus,
    chrf_pp,
    chrf_statistics,
    lcs_length,
    merge_scores,
    percent_to_rating,
    rating_to_percent,
    rouge_l,
    score_predictions,
    summarize_scores,
    weighted_kappa,
)

SENTENCES = [
    ("Wuha means water. You can say: I want water.", "Wuha means water; for example, I want some water."),
    ("The word is used every day.", "People use this word every day, at home and at the market."),
    ("Selam! It means peace, and hello.", "Selam means 'peace' and is also a greeting."),
    ("", "Anything at all."),
    ("Completely unrelated text", "zzz"),
    ("ሰላም ማለት peace ነው።", "ሰላም peace ማለት ነው።"),
]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
    return str(path)


# ===========================================================================
# chrF++
# ===========================================================================


def test_identical_strings_score_100():
    assert chrf_pp("Wuha means water.", "Wuha means water.") == pytest.approx(100.0)


def test_disjoint_strings_score_0():
    assert chrf_pp("xyz", "abc") == 0.0
    assert chrf_pp("", "abc") == 0.0


def test_hand_computed_value():
    assert chrf_pp("cat sat", "the cat sat") == pytest.approx(57.76, abs=0.01)


def test_statistics_shape_and_word_tokens():
    stats = chrf_statistics("hello, world", "hello world")
    assert stats.shape == (8, 3)
    # words: [hello , world] vs [hello world]
    assert tuple(stats[6]) == (3, 2, 2)


def test_scores_stay_in_range():
    for hyp, ref in SENTENCES:
        assert 0.0 <= chrf_pp(hyp, ref) <= 100.0


def test_recall_weighted_more_than_precision():
    short = chrf_pp("water", "water is good")
    long = chrf_pp("water is good", "water")
    assert short < long


def test_per_order_averaging_differs():
    cfg = ChrfConfig(f_averaging="per_order_f")
    hyp, ref = SENTENCES[1]
    assert chrf_pp(hyp, ref, cfg) != pytest.approx(chrf_pp(hyp, ref))


def test_lowercase_option():
    assert chrf_pp("WATER", "water") == 0.0
    assert chrf_pp("WATER", "water", ChrfConfig(lowercase=True)) == pytest.approx(100.0)


def test_corpus_length_mismatch():
    with pytest.raises(ValueError):
        chrf_corpus(["a"], ["a", "b"])


def test_sacrebleu_agreement():
    sacrebleu = pytest.importorskip("sacrebleu")
    metric = sacrebleu.metrics.CHRF(word_order=2)
    for hyp, ref in SENTENCES:
        assert chrf_pp(hyp, ref) == pytest.approx(metric.sentence_score(hyp, [ref]).score, abs=0.01)
    hyps, refs = zip(*SENTENCES)
    assert chrf_corpus(hyps, refs) == pytest.approx(metric.corpus_score(list(hyps), [list(refs)]).score, abs=0.01)


def test_sacrebleu_agreement_on_fifty_pairs():
    sacrebleu = pytest.importorskip("sacrebleu")
    metric = sacrebleu.metrics.CHRF(word_order=2)
    words = ["wuha", "water,", "bet", "house.", "lij", "child!", "gebeya", "(market)", "means", "I", "want", "some", "ọ̀rẹ́", "ሰላም", "amanzi?"]
    rng = np.random.default_rng(7)
    for _ in range(50):
        hyp = " ".join(rng.choice(words, size=int(rng.integers(2, 12))))
        ref = " ".join(rng.choice(words, size=int(rng.integers(2, 12))))
        assert chrf_pp(hyp, ref) == pytest.approx(metric.sentence_score(hyp, [ref]).score, abs=0.1), (hyp, ref)


# ===========================================================================
# ROUGE-L
# ===========================================================================


def test_lcs_length():
    assert lcs_length("abcd", "acde") == 3
    assert lcs_length([], ["a"]) == 0


def test_rouge_l_small_case():
    score = rouge_l("a b c d", "a c d e")
    assert score.precision == pytest.approx(0.75)
    assert score.recall == pytest.approx(0.75)
    assert score.f1 == pytest.approx(0.75)


def test_rouge_l_longer_reference():
    score = rouge_l("the cat was under the bed", "the tiny little cat was found under the big funny bed")
    assert score.precision == pytest.approx(1.0)
    assert score.recall == pytest.approx(6 / 11)
    assert score.f1 == pytest.approx(12 / 17)


def test_rouge_l_ignores_case_and_punctuation():
    assert rouge_l("Water, please!", "water please").f1 == pytest.approx(1.0)


def test_rouge_l_empty_inputs():
    assert rouge_l("", "something").f1 == 0.0
    assert rouge_l("something", "").f1 == 0.0


# ===========================================================================
# rating scale
# ===========================================================================


@pytest.mark.parametrize("rating,percent", [(1, 25.0), (3, 50.0), (5, 75.0), (7, 100.0), (5.2, 77.5)])
def test_rating_to_percent(rating, percent):
    assert rating_to_percent(rating) == pytest.approx(percent)
    assert percent_to_rating(percent) == pytest.approx(rating)


def test_rating_to_percent_on_arrays_and_frames():
    assert rating_to_percent(np.array([1, 7])).tolist() == [25.0, 100.0]
    frame = pd.DataFrame({"a": [1.0, 3.0]}, index=["x", "y"])
    out = rating_to_percent(frame)
    assert isinstance(out, pd.DataFrame)
    assert out.loc["y", "a"] == 50.0


@pytest.mark.parametrize("bad", [0, 8, -1, float("nan")])
def test_rating_to_percent_rejects_out_of_range(bad):
    with pytest.raises(ValueError):
        rating_to_percent(bad)


def test_percent_to_rating_range():
    with pytest.raises(ValueError):
        percent_to_rating(20.0)


@pytest.mark.parametrize("value,expected", [(5, 5), ("7", 7), (3.0, 3)])
def test_check_scale_value(value, expected):
    assert check_scale_value(value) == expected


@pytest.mark.parametrize("value", [2, 4.5, "high", None, 9, True])
def test_check_scale_value_rejects(value):
    with pytest.raises(ValueError):
        check_scale_value(value)


# ===========================================================================
# weighted kappa
# ===========================================================================

A = [1, 1, 3, 5, 7, 7]
B = [1, 3, 3, 5, 5, 7]


def test_kappa_hand_computed():
    assert weighted_kappa(A, B, "quadratic") == pytest.approx(13 / 15)
    assert weighted_kappa(A, B, "linear") == pytest.approx(17 / 23)


def two_by_two(yes_yes, yes_no, no_yes, no_no):
    a = [7] * (yes_yes + yes_no) + [1] * (no_yes + no_no)
    b = [7] * yes_yes + [1] * yes_no + [7] * no_yes + [1] * no_no
    return a, b


@pytest.mark.parametrize(
    "cells, expected",
    [
        ((20, 5, 10, 15), 0.4),
        ((45, 15, 25, 15), 3 / 23),
        ((25, 35, 5, 35), 7 / 27),
    ],
)
@pytest.mark.parametrize("weighting", ["linear", "quadratic"])
def test_kappa_textbook_two_by_two(cells, expected, weighting):
    # with two categories both weightings reduce to Cohen's kappa
    a, b = two_by_two(*cells)
    assert weighted_kappa(a, b, weighting) == pytest.approx(expected, abs=1e-6)


def test_kappa_perfect_and_symmetric():
    assert weighted_kappa(A, A) == pytest.approx(1.0)
    assert weighted_kappa(A, B) == pytest.approx(weighted_kappa(B, A))


def test_kappa_constant_raters():
    assert weighted_kappa([1] * 5, [7] * 5) == pytest.approx(0.0)
    assert weighted_kappa([5] * 5, [5] * 5) == 1.0


def test_kappa_independent_raters_near_zero():
    rng = np.random.default_rng(0)
    a = rng.choice([1, 3, 5, 7], size=10_000).tolist()
    b = rng.choice([1, 3, 5, 7], size=10_000).tolist()
    assert abs(weighted_kappa(a, b)) < 0.05


def test_kappa_input_errors():
    with pytest.raises(ValueError):
        weighted_kappa([1, 3], [1])
    with pytest.raises(ValueError):
        weighted_kappa([], [])
    with pytest.raises(ValueError):
        weighted_kappa([1, 2], [1, 3])
    with pytest.raises(ValueError):
        weighted_kappa([1], [1], weighting="cubic")


@pytest.mark.parametrize("weighting", ["linear", "quadratic"])
def test_kappa_matches_sklearn(weighting):
    metrics = pytest.importorskip("sklearn.metrics")
    rng = np.random.default_rng(1)
    a = rng.choice([1, 3, 5, 7], size=300)
    b = np.clip(a + rng.choice([-2, 0, 0, 2], size=300), 1, 7)
    expected = metrics.cohen_kappa_score(a, b, weights=weighting, labels=[1, 3, 5, 7])
    assert weighted_kappa(a.tolist(), b.tolist(), weighting) == pytest.approx(expected)


# ===========================================================================
# criterion tables
# ===========================================================================


def table(rows):
    return CriterionTable(pd.DataFrame(rows, columns=CRITERIA, index=[f"g{i}" for i in range(len(rows))]))


def test_aggregate_is_mean_of_four():
    t = table([[57.6, 38.7, 28.1, 54.4], [100, 100, 25, 25]])
    averages = aggregate_criteria(t)
    assert averages.per_group["g0"] == pytest.approx(44.7)
    assert averages.per_group["g1"] == pytest.approx(62.5)
    assert averages.overall == pytest.approx((44.7 + 62.5) / 2)
    assert averages.to_series()[AVG_COLUMN] == pytest.approx(averages.overall)


def test_missing_criterion_is_named():
    frame = pd.DataFrame([[50.0, 50.0, 50.0, np.nan]], columns=CRITERIA, index=["amh"])
    with pytest.raises(MetricInputError, match="coherence_naturalness.*amh"):
        aggregate_criteria(CriterionTable(frame))
    with pytest.raises(MetricInputError, match="coherence_naturalness"):
        aggregate_criteria(CriterionTable(frame[CRITERIA[:3]]))


def test_table_range_checks():
    with pytest.raises(MetricInputError):
        table([[101, 50, 50, 50]])
    with pytest.raises(ValueError):
        CriterionTable.from_ratings(pd.DataFrame([[0.5, 3, 3, 3]], columns=CRITERIA))


def test_from_ratings_converts():
    t = CriterionTable.from_ratings(pd.DataFrame([[1, 3, 5, 7]], columns=CRITERIA, index=["amh"]))
    assert t.percentages.loc["amh"].tolist() == [25.0, 50.0, 75.0, 100.0]
    assert aggregate_criteria(t).overall == pytest.approx(62.5)


def test_to_frame_adds_average_row_and_column():
    frame = table([[50, 50, 50, 50], [100, 100, 100, 100]]).to_frame()
    assert list(frame.columns) == CRITERIA + [AVG_COLUMN]
    assert frame.index[-1] == AVG_COLUMN
    assert frame.loc[AVG_COLUMN, AVG_COLUMN] == pytest.approx(75.0)
    assert frame.loc["g1", AVG_COLUMN] == pytest.approx(100.0)


def test_dict_round_trip():
    t = CriterionTable.from_ratings(
        pd.DataFrame([[5.0, 3.0, 3.0, 5.0]], columns=CRITERIA, index=["amh"]),
        counts=pd.Series({"amh": 12}),
    )
    data = t.to_dict()
    assert data["averages"] == {"amh": 62.5}
    back = CriterionTable.from_dict(data)
    assert back.groups == ["amh"]
    assert back.counts["amh"] == 12
    assert aggregate_criteria(back).overall == pytest.approx(62.5)


def test_from_long():
    rows = [{"language": lang, "criterion": c, "percent": 50.0 + i} for lang in ("amh", "zul") for i, c in enumerate(CRITERIA)]
    t = CriterionTable.from_long(pd.DataFrame(rows))
    assert t.groups == ["amh", "zul"]
    assert list(t.percentages.columns) == CRITERIA
    assert aggregate_criteria(t).per_group["zul"] == pytest.approx(51.5)


def test_render_uses_labels():
    text = table([[50, 50, 50, 50]]).render()
    assert "Instruction Alignment" in text
    assert "50.0" in text


def test_from_dict_rejects_garbage():
    with pytest.raises(MetricInputError):
        CriterionTable.from_dict({"rows": []})


# ===========================================================================
# score files
# ===========================================================================


def test_score_predictions_and_summary(tmp_path):
    refs = write_jsonl(tmp_path / "refs.jsonl", [
        {"id": "a", "language": "amh", "kind": "DirectQA", "question": "q", "reference": "wuha means water"},
        {"id": "b", "language": "amh", "kind": "RolePlay", "question": "q", "reference": "selam means peace"},
        {"id": "c", "language": "zul", "kind": "DirectQA", "question": "q", "reference": "amanzi means water"},
    ])
    preds = write_jsonl(tmp_path / "preds.jsonl", [
        {"id": "a", "prediction": "wuha means water"},
        {"id": "b", "prediction": "something else"},
        {"id": "c", "prediction": "amanzi is water"},
    ])
    frame = score_predictions(preds, refs)
    assert list(frame["id"]) == ["a", "b", "c"]
    assert frame.loc[0, "chrf_pp"] == pytest.approx(100.0)
    assert frame.loc[0, "rouge_l_f1"] == pytest.approx(1.0)

    extra = write_jsonl(tmp_path / "bertscore.jsonl", [{"id": "a", "bertscore": 0.9}, {"id": "c", "bertscore": 0.7}])
    frame = merge_scores(frame, [extra])
    assert np.isnan(frame.loc[1, "bertscore"])

    summary = summarize_scores(frame)
    assert list(summary.index) == ["amh", "zul", AVG_COLUMN]
    assert summary.loc["amh", "bertscore"] == pytest.approx(0.9)
    assert summary.loc[AVG_COLUMN, "bertscore"] == pytest.approx(0.8)
    assert summary.loc[AVG_COLUMN, "chrf_pp"] == pytest.approx(summary.loc[["amh", "zul"], "chrf_pp"].mean())


def test_prediction_without_reference(tmp_path):
    refs = write_jsonl(tmp_path / "refs.jsonl", [{"id": "a", "reference": "x"}])
    preds = write_jsonl(tmp_path / "preds.jsonl", [{"id": "zz", "prediction": "x"}])
    with pytest.raises(MetricInputError, match="zz"):
        score_predictions(preds, refs)


def test_metric_column_clash(tmp_path):
    refs = write_jsonl(tmp_path / "refs.jsonl", [{"id": "a", "language": "amh", "reference": "x"}])
    preds = write_jsonl(tmp_path / "preds.jsonl", [{"id": "a", "prediction": "x"}])
    extra = write_jsonl(tmp_path / "extra.jsonl", [{"id": "a", "chrf_pp": 1.0}])
    with pytest.raises(MetricInputError, match="chrf_pp"):
        merge_scores(score_predictions(preds, refs), [extra])
