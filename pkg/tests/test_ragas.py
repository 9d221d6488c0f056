import itertools
import json
import math
import random

import httpx
import pytest
from conftest import MOCK
from hypothesis import given
from hypothesis import strategies as st
from test_ragflow import entry

from ragkit.errors import JudgeParseError, MalformedLog, ProviderError
from ragkit.llmgw import Gateway, ProviderConfig, mock_chat, mock_embedding
from ragkit.ragas import (
    EvalConfig,
    MetricsRow,
    ask,
    average_precision,
    compute_ragas_metrics,
    evaluate_entry,
    extract_object,
    parse_sections,
    read_metrics_csv,
    render_task,
    target_answer,
    write_metrics_csv,
)
from ragkit.ragflow import write_qa_log


def ap_oracle(verdicts):
    """Explicit precision@k at each relevant rank, then averaged."""
    precisions = []
    for k in range(1, len(verdicts) + 1):
        if verdicts[k - 1] == 1:
            precisions.append(sum(verdicts[:k]) / k)
    if not precisions:
        return 0.0
    return sum(precisions) / len(precisions)


# average precision ---------------------------------------------------------------

def test_ap_example():
    assert average_precision([1, 0, 1]) == pytest.approx(5 / 6, abs=1e-12)
    assert average_precision([]) == 0.0
    assert average_precision([0, 0]) == 0.0
    assert average_precision([1, 1, 1]) == 1.0


def test_ap_exhaustive_oracle():
    for n in range(11):
        for v in itertools.product((0, 1), repeat=n):
            assert average_precision(v) == pytest.approx(ap_oracle(v), abs=1e-12)


def test_ap_moving_relevant_item_earlier_never_lowers():
    for n in range(2, 9):
        for v in itertools.product((0, 1), repeat=n):
            for i in range(1, n):
                if v[i] == 1 and v[i - 1] == 0:
                    w = list(v)
                    w[i - 1], w[i] = 1, 0
                    assert average_precision(w) >= average_precision(v) - 1e-12


# parsing ----------------------------------------------------------------------

def test_extract_object_ignores_prose():
    assert extract_object('Sure! {"verdict": 1} hope that helps') == {"verdict": 1}


@pytest.mark.parametrize("reply", ["no braces", "{bad json}", "} backwards {", "[1, 2]"])
def test_extract_object_failures(reply):
    with pytest.raises(JudgeParseError):
        extract_object(reply)


def test_ask_reprompts_once():
    prompts = []
    replies = iter(["garbage", '{"verdict": 1}'])

    def judge(p):
        prompts.append(p)
        return next(replies)

    task = render_task("FF_VERIFY", context="c", statement="s")
    assert ask(judge, task) == 1
    assert prompts[1] == prompts[0] + "\n\nReply with only the structured object."


def test_ask_gives_up_after_reprompt():
    with pytest.raises(JudgeParseError):
        ask(lambda p: '{"verdict": 7}', render_task("FF_VERIFY", context="c", statement="s"))


def test_render_and_parse_sections_round_trip():
    task = render_task("CP_VERDICT", question="Q?\n\nmore", answer="A.", context="C1\n\nC2")
    assert task.rendered_prompt.startswith("TASK: CP_VERDICT\n\nQUESTION:\n")
    assert parse_sections(task.rendered_prompt) == {"QUESTION": "Q?\n\nmore", "ANSWER": "A.", "CONTEXT": "C1\n\nC2"}


# metric arithmetic with scripted judges -------------------------------------------

def scripted_judge(cp=(), cr=(), statements=(), ff=(), questions=()):
    queues = {"CP_VERDICT": list(cp), "CR_SENTENCE": list(cr), "FF_VERIFY": list(ff)}

    def judge(prompt):
        tag = prompt.split("\n", 1)[0].removeprefix("TASK: ")
        if tag in queues:
            return json.dumps({"verdict": queues[tag].pop(0)})
        if tag == "FF_DECOMPOSE":
            return json.dumps({"statements": list(statements)})
        return json.dumps({"questions": list(questions)})
    return judge


FIXED_VECTORS = {"Q": [1.0, 0.0], "r1": [1.0, 0.0], "r2": [0.0, 1.0], "r3": [1.0, 1.0]}


def fixed_embedder(texts):
    return [FIXED_VECTORS[t] for t in texts]


def test_hand_computed_metrics():
    e = entry("x", question="Q", answer_model="model says", answer_reference="S1. S2. S3. S4.",
              retrieved_ids=["a", "b", "c"], retrieved_texts=["c1", "c2", "c3"])
    judge = scripted_judge(cp=[1, 0, 1], cr=[1, 1, 0, 1], statements=["s1", "s2", "s3", "s4", "s5"],
                           ff=[1, 0, 0, 1, 0], questions=["r1", "r2", "r3"])
    row = evaluate_entry(e, EvalConfig(), judge, fixed_embedder)
    assert row.context_precision == pytest.approx(5 / 6, abs=1e-12)
    assert row.context_recall == pytest.approx(0.75, abs=1e-12)
    assert row.faithfulness == pytest.approx(0.4, abs=1e-12)
    ar = (1.0 + 0.0 + 1 / math.sqrt(2)) / 3
    assert row.answer_relevance == pytest.approx(ar, abs=1e-12)
    assert row.ragas_overall == pytest.approx((5 / 6 + 0.75 + 0.4 + ar) / 4, abs=1e-12)
    assert row.detail["context_precision"]["verdicts"] == [1, 0, 1]


def test_answer_relevance_floored_at_zero():
    vectors = {"Q": [1.0, 0.0], "n": [-1.0, 0.0]}
    e = entry("x", question="Q", answer_model="ans")
    judge = scripted_judge(cp=[1], cr=[1], statements=["s"], ff=[1], questions=["n", "n", "n"])
    row = evaluate_entry(e, EvalConfig(), judge, lambda ts: [vectors[t] for t in ts])
    assert row.answer_relevance == 0.0


def test_empty_answer_gives_nulls():
    e = entry("x", answer_model="", answer_reference=None)
    row = evaluate_entry(e, EvalConfig(), scripted_judge(cp=[1]), fixed_embedder)
    assert row.context_recall is None and row.faithfulness is None and row.answer_relevance is None
    assert row.context_precision == 1.0
    assert row.ragas_overall is None


def test_parse_failure_nulls_only_that_metric():
    e = entry("x", question="Q", answer_model="a.", answer_reference="a.")

    def judge(prompt):
        if prompt.startswith("TASK: FF_DECOMPOSE"):
            return "I refuse"
        return scripted_judge(cp=[1], cr=[1], questions=["r1"])(prompt)

    row = evaluate_entry(e, EvalConfig(), judge, fixed_embedder)
    assert row.faithfulness is None and row.ragas_overall is None
    assert row.context_precision == 1.0 and row.context_recall == 1.0
    assert "faithfulness" in row.detail["failures"]


def test_target_answer_policy():
    e = entry("x", answer_model="model", answer_reference="ref")
    assert target_answer(e) == "ref"
    assert target_answer(e, "model_only") == "model"
    assert target_answer(entry("y", answer_model="model", answer_reference="  ")) == "model"
    with pytest.raises(ValueError):
        EvalConfig(target_answer_policy="whatever")


# mock-provider pipeline ---------------------------------------------------------

WORDS = ["paris", "france", "capital", "river", "museum", "history", "ocean", "hills", "music", "coffee"]


def random_entry(rng, i):
    def sentence():
        return " ".join(rng.choice(WORDS) for _ in range(rng.randint(0, 6))).capitalize() + rng.choice([".", "?", "!"])

    n_ctx = rng.randint(0, 5)
    ctx = [" ".join(sentence() for _ in range(rng.randint(1, 3))) for _ in range(n_ctx)]
    answer = rng.choice(["", " ".join(sentence() for _ in range(rng.randint(1, 4)))])
    ref = rng.choice([None, "", " ".join(sentence() for _ in range(rng.randint(1, 4)))])
    return entry(f"q{i:04d}", question=sentence(), answer_model=answer, answer_reference=ref,
                 retrieved_ids=[f"c{j}" for j in range(n_ctx)], retrieved_texts=ctx)


def check_row(row):
    for m in ("context_precision", "context_recall", "faithfulness", "answer_relevance"):
        v = getattr(row, m)
        assert v is None or 0.0 <= v <= 1.0
    comps = [row.context_precision, row.context_recall, row.faithfulness, row.answer_relevance]
    if any(c is None for c in comps):
        assert row.ragas_overall is None
    else:
        assert abs(row.ragas_overall - sum(comps) / 4) <= 1e-12


def test_score_intervals_on_random_fixtures(tmp_path):
    rng = random.Random(2024)
    entries = [random_entry(rng, i) for i in range(300)]
    log = tmp_path / "qa.jsonl"
    write_qa_log(log, entries)
    rows = compute_ragas_metrics(log, EvalConfig(), MOCK)
    assert [r.qa_id for r in rows] == [e.qa_id for e in entries]
    for row in rows:
        check_row(row)


def test_mock_metrics_deterministic(tmp_path):
    rng = random.Random(9)
    log = tmp_path / "qa.jsonl"
    write_qa_log(log, [random_entry(rng, i) for i in range(40)])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(compute_ragas_metrics(log, EvalConfig(), MOCK), a)
    write_metrics_csv(compute_ragas_metrics(log, EvalConfig(workers=4), MOCK), b)
    assert a.read_bytes() == b.read_bytes()


def test_mock_answer_relevance_uses_embeddings():
    e = entry("x", question="Where is Paris located", answer_model="Paris located on the Seine.")
    row = evaluate_entry(e, EvalConfig(), mock_chat,
                         lambda ts: [mock_embedding(t) for t in ts])
    assert row.detail["answer_relevance"]["reverse_questions"][0] == "What is Paris located on the Seine?"
    assert 0.0 < row.answer_relevance <= 1.0


def test_metrics_csv_round_trip(tmp_path):
    rows = [MetricsRow("a", 0.1, 0.2, 0.3, 1 / 3, 0.23333333333333334), MetricsRow("b", None, 1.0, None, 0.0)]
    p = tmp_path / "m.csv"
    write_metrics_csv(rows, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "qa_id,context_precision,context_recall,faithfulness,answer_relevance,ragas_overall"
    assert lines[2] == "b,,1.0,,0.0,"
    assert [r.scores() for r in read_metrics_csv(p)] == [r.scores() for r in rows]


def test_malformed_log(tmp_path):
    log = tmp_path / "qa.jsonl"
    log.write_text("not json\n")
    with pytest.raises(MalformedLog):
        compute_ragas_metrics(log, EvalConfig(), MOCK)


def test_provider_errors_propagate(tmp_path, monkeypatch):
    log = tmp_path / "qa.jsonl"
    write_qa_log(log, [entry("a")])
    monkeypatch.setenv("RAGKIT_TEST_KEY", "k")
    cfg = ProviderConfig(base_url="http://x.test", api_key_env="RAGKIT_TEST_KEY", retry=False)
    gw = Gateway(cfg, transport=httpx.MockTransport(lambda r: httpx.Response(503)))
    with pytest.raises(ProviderError) as info:
        compute_ragas_metrics(log, EvalConfig(), gw)
    assert info.value.status == 503


@given(st.lists(st.integers(0, 1), max_size=12))
def test_ap_bounds(v):
    assert 0.0 <= average_precision(v) <= 1.0
