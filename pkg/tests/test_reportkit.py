import csv
import json
import math

import pytest
from conftest import MOCK, QUESTIONS
from hypothesis import assume, given
from hypothesis import strategies as st

from ragkit.errors import (
    DegenerateSeries,
    MismatchedGrids,
    MissingFile,
    PreconditionError,
)
from ragkit.ragas import MetricsRow, read_metrics_csv
from ragkit.reportkit import (
    MetricSummary,
    SweepConfig,
    correlate_against,
    pearson,
    read_questions,
    read_summary_csv,
    run_chunk_sweep,
    summarize_runs,
    write_summary_csv,
)

# pearson ------------------------------------------------------------------------

def test_pearson_closed_form():
    # means 2 and 11/3; Sxy = 3, Sxx = 2, Syy = 14/3 -> r = 3 / sqrt(28/3)
    r = pearson([1, 2, 3], [2, 4, 5])
    assert r == pytest.approx(3 / math.sqrt(28 / 3), abs=1e-12)
    assert r == pytest.approx(0.9820, abs=1e-4)


def test_pearson_perfect_and_negative():
    assert pearson([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)


def test_pearson_degenerate():
    with pytest.raises(DegenerateSeries):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateSeries):
        pearson([1], [2])
    with pytest.raises(PreconditionError):
        pearson([1, 2], [1, 2, 3])


series = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=12)


def spread(xs):
    return max(xs) - min(xs) > 1e-3


@given(series.flatmap(lambda xs: st.tuples(st.just(xs), st.lists(st.floats(-1e3, 1e3), min_size=len(xs),
                                                                   max_size=len(xs)))))
def test_pearson_symmetric_and_bounded(pair):
    x, y = pair
    assume(spread(x) and spread(y))
    r = pearson(x, y)
    assert -1.0 <= r <= 1.0
    assert r == pytest.approx(pearson(y, x), abs=1e-9)


@given(series.flatmap(lambda xs: st.tuples(st.just(xs), st.lists(st.floats(-1e3, 1e3), min_size=len(xs),
                                                                   max_size=len(xs)))),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_pearson_positive_affine_invariance(pair, a, b):
    x, y = pair
    assume(spread(x) and spread(y))
    assert pearson([a * v + b for v in x], y) == pytest.approx(pearson(x, y), abs=1e-6)


@given(series)
def test_pearson_self_is_one(x):
    assume(spread(x))
    assert pearson(x, x) == pytest.approx(1.0, abs=1e-12)


# summaries ------------------------------------------------------------------------

def test_summarize_pools_runs():
    runs = [[MetricsRow("a", 0.5, None, None, None)], [MetricsRow("a", 1.0, None, None, None)]]
    by = {s.metric: s for s in summarize_runs(runs, chunk_size=400)}
    cp = by["context_precision"]
    assert cp.mean == pytest.approx(0.75) and cp.sd == pytest.approx(math.sqrt(0.125)) and cp.n == 2
    assert by["context_recall"].mean is None and by["context_recall"].n == 0
    assert by["context_recall"].nulls == 2


def test_summary_csv_round_trip(tmp_path):
    sums = [MetricSummary(400, "faithfulness", 0.5, 0.1, 3), MetricSummary(800, "faithfulness", None, None, 0)]
    p = tmp_path / "s.csv"
    write_summary_csv(sums, p)
    assert p.read_text().splitlines()[0] == "chunk_size,metric,mean,sd,n"
    back = read_summary_csv(p)
    assert [(s.chunk_size, s.metric, s.mean, s.sd, s.n) for s in back] == [
        (400, "faithfulness", 0.5, 0.1, 3), (800, "faithfulness", None, None, 0)]


def summary_file(path, values):
    """values: {metric: [(size, mean), ...]}"""
    write_summary_csv([MetricSummary(size, m, mean, 0.0, 1) for m, pts in values.items() for size, mean in pts], path)
    return path


def test_correlate_self_is_one(tmp_path):
    a = summary_file(tmp_path / "a.csv", {"faithfulness": [(400, 0.2), (800, 0.5), (1600, 0.4)],
                                          "context_recall": [(400, 0.3), (800, 0.3), (1600, 0.3)]})
    out = tmp_path / "corr.csv"
    result = correlate_against(a, a, out)
    assert result["faithfulness"] == pytest.approx(1.0)
    assert result["context_recall"] is None  # constant series
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["metric", "correlation"]
    assert ["context_recall", ""] in rows


def test_correlate_known_value(tmp_path):
    a = summary_file(tmp_path / "a.csv", {"faithfulness": [(1, 1.0), (2, 2.0), (3, 3.0)]})
    b = summary_file(tmp_path / "b.csv", {"faithfulness": [(1, 2.0), (2, 4.0), (3, 5.0)]})
    assert correlate_against(a, b)["faithfulness"] == pytest.approx(0.9820, abs=1e-4)


def test_correlate_mismatched(tmp_path):
    a = summary_file(tmp_path / "a.csv", {"faithfulness": [(1, 1.0), (2, 2.0)]})
    b = summary_file(tmp_path / "b.csv", {"faithfulness": [(1, 1.0), (3, 2.0)]})
    with pytest.raises(MismatchedGrids):
        correlate_against(a, b)
    with pytest.raises(MissingFile):
        correlate_against(a, tmp_path / "nope.csv")


# sweep ---------------------------------------------------------------------------

def test_read_questions(tmp_path):
    p = tmp_path / "q.txt"
    p.write_text("# header\nFirst?\n\n  Second?  \n", encoding="utf-8")
    assert read_questions(p) == ["First?", "Second?"]


@pytest.mark.parametrize("kw", [{"chunk_sizes": []}, {"chunk_sizes": [800, 400]}, {"overlap_fraction": 1.0},
                                {"repeats": 0}])
def test_sweep_config_validation(kw):
    with pytest.raises(PreconditionError):
        SweepConfig(questions_path="q", **kw)


def test_overlap_rounding():
    cfg = SweepConfig(questions_path="q")
    assert [cfg.overlap_for(s) for s in cfg.chunk_sizes] == [120, 240, 480, 960]


def test_chunk_sweep_artifacts(tmp_path, corpus_file):
    qpath = tmp_path / "questions.txt"
    qpath.write_text("\n".join(QUESTIONS[:4]) + "\n", encoding="utf-8")
    cfg = SweepConfig(questions_path=str(qpath), chunk_sizes=[200, 400], repeats=2)
    out = run_chunk_sweep(cfg, [corpus_file], tmp_path / "store", MOCK, artifact_root=tmp_path / "art")
    assert out.name.startswith("sweep-")
    status = json.loads((out / "status.json").read_text())
    assert set(status) == {"200", "400"} and all(s["status"] == "ok" for s in status.values())
    assert status["200"]["chunks"] > status["400"]["chunks"]
    config = json.loads((out / "config.json").read_text())
    assert config["overlaps"] == {"200": 60, "400": 120}
    for size in (200, 400):
        d = out / f"size_{size}"
        runs = [read_metrics_csv(d / f"metrics_run{k}.csv") for k in (1, 2)]
        assert [r.qa_id for r in runs[0]] == ["q001", "q002", "q003", "q004"]
        assert (d / "metrics_run1.csv").read_bytes() == (d / "metrics_run2.csv").read_bytes()
    summary = read_summary_csv(out / "summary.csv")
    assert len(summary) == 2 * 5
    assert all(s.n <= 8 for s in summary)


def test_sweep_failed_size_recorded(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_bytes(b"\xff\xfe")
    qpath = tmp_path / "q.txt"
    qpath.write_text("Why?\n")
    out = run_chunk_sweep(SweepConfig(questions_path=str(qpath), chunk_sizes=[100], repeats=1), [bad],
                          tmp_path / "store", MOCK, artifact_root=tmp_path / "art")
    status = json.loads((out / "status.json").read_text())
    assert status["100"]["status"] == "failed"
    assert (out / "summary.csv").read_text().strip() == "chunk_size,metric,mean,sd,n"
