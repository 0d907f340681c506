from __future__ import annotations

import pytest

from tableval.curation import QATriplet
from tableval.gateway import ChatClient, EndpointConfig, RetryPolicy
from tableval.runners import (
    DuplicateRecord,
    GenerationRecord,
    RunStore,
    run_direct,
    run_indirect,
    run_split,
)

from mocks import FakeTimer, ScriptedEndpoint

VALID_TABULAR = r"\begin{tabular}{cc} Element & Length \\ Board & 51 \end{tabular}"


def make_client(endpoint: ScriptedEndpoint) -> ChatClient:
    timer = FakeTimer()
    return ChatClient(
        EndpointConfig(
            base_url="http://vlm.local/v1",
            retry=RetryPolicy(max_attempts=2, backoff_base_s=0.0),
        ),
        transport=endpoint.transport(),
        clock=timer.clock,
        sleep=timer.sleep,
    )


@pytest.fixture
def triplet(tmp_path) -> QATriplet:
    (tmp_path / "page_0001.png").write_bytes(b"png bytes")
    return QATriplet(
        id="t0001",
        question="What is the minimum length of fasteners for board lumber?",
        answer="51 mm",
        image_file="page_0001.png",
    )


def triplets_on_disk(tmp_path, n: int) -> list[QATriplet]:
    out = []
    for i in range(n):
        name = f"page_{i:04d}.png"
        (tmp_path / name).write_bytes(b"png")
        out.append(QATriplet(id=f"t{i:04d}", question=f"Q{i}?", answer=f"{i}", image_file=name))
    return out


def test_run_direct_ok(triplet, tmp_path):
    answerer = make_client(ScriptedEndpoint(script=["51 mm"]))
    record = run_direct(triplet, answerer, "vlm-a", images_dir=tmp_path)
    assert record.generated_answer == "51 mm"
    assert record.status == "ok"
    assert record.intermediate_latex is None
    assert record.method == "direct"


def test_run_direct_endpoint_failure(triplet, tmp_path):
    answerer = make_client(ScriptedEndpoint(script=[500, 500]))
    record = run_direct(triplet, answerer, "vlm-a", images_dir=tmp_path)
    assert record.status == "endpoint_failed"
    assert record.generated_answer == ""


def test_store_rejects_duplicates(triplet, tmp_path):
    store = RunStore(tmp_path / "run")
    answerer = make_client(ScriptedEndpoint(script=["51 mm", "51 mm"]))
    run_direct(triplet, answerer, "vlm-a", images_dir=tmp_path, store=store)
    with pytest.raises(DuplicateRecord):
        run_direct(triplet, answerer, "vlm-a", images_dir=tmp_path, store=store)


def test_run_indirect_happy_path(triplet, tmp_path):
    converter = make_client(ScriptedEndpoint(script=[VALID_TABULAR]))
    answerer_endpoint = ScriptedEndpoint(script=["51"])
    answerer = make_client(answerer_endpoint)
    store = RunStore(tmp_path / "run")
    record = run_indirect(
        triplet, converter, "conv-model", answerer, "vlm-a", images_dir=tmp_path, store=store
    )
    assert record.status == "ok"
    assert record.generated_answer == "51"
    assert record.intermediate_latex == VALID_TABULAR
    conversions = store.conversions()
    assert len(conversions) == 1 and conversions[0]["parse_ok"] is True
    # the answering step saw the LaTeX, not the image
    _, body = answerer_endpoint.requests[0]
    assert "tabular" in str(body["messages"])


def test_run_indirect_unparseable_latex_still_answers(triplet, tmp_path):
    converter = make_client(ScriptedEndpoint(script=["I could not read the table, sorry."]))
    answerer = make_client(ScriptedEndpoint(script=["guess"]))
    store = RunStore(tmp_path / "run")
    record = run_indirect(
        triplet, converter, "conv-model", answerer, "vlm-a", images_dir=tmp_path, store=store
    )
    assert record.status == "conversion_failed"
    assert record.generated_answer == "guess"
    assert record.intermediate_latex is not None
    assert store.conversions()[0]["parse_ok"] is False


def test_run_indirect_converter_down_short_circuits(triplet, tmp_path):
    converter = make_client(ScriptedEndpoint(script=[500, 500]))
    answerer_endpoint = ScriptedEndpoint()
    answerer = make_client(answerer_endpoint)
    record = run_indirect(
        triplet, converter, "conv-model", answerer, "vlm-a", images_dir=tmp_path
    )
    assert record.status == "endpoint_failed"
    assert record.intermediate_latex is None
    assert answerer_endpoint.requests == []


def test_run_indirect_answerer_down_keeps_conversion_artifact(triplet, tmp_path):
    converter = make_client(ScriptedEndpoint(script=[VALID_TABULAR]))
    answerer = make_client(ScriptedEndpoint(script=[500, 500]))
    store = RunStore(tmp_path / "run")
    record = run_indirect(
        triplet, converter, "conv-model", answerer, "vlm-a", images_dir=tmp_path, store=store
    )
    assert record.status == "endpoint_failed"
    assert record.intermediate_latex is None
    # the raw conversion survives in the side log for post-hoc audit
    assert store.conversions()[0]["latex"] == VALID_TABULAR


def test_record_invariants():
    with pytest.raises(ValueError):
        GenerationRecord("t", "direct", "m", "a", "spurious latex", "ok", 0)
    with pytest.raises(ValueError):
        GenerationRecord("t", "indirect", "m", "a", None, "ok", 0)
    with pytest.raises(ValueError):
        GenerationRecord("t", "indirect", "m", "", "x", "endpoint_failed", 0)


def test_run_split_counts_and_resume(tmp_path):
    triplets = triplets_on_disk(tmp_path, 5)
    answerers = {
        "vlm-a": make_client(ScriptedEndpoint(default="answer a")),
        "vlm-b": make_client(ScriptedEndpoint(default="answer b")),
    }
    store = RunStore(tmp_path / "run")
    manifest = run_split(triplets, "direct", answerers, store, images_dir=tmp_path, max_workers=2)
    assert manifest["executed"] == 10
    assert len(store.records()) == 10

    # resumption: a rerun leaves the store at the clean-run record count
    rerun = run_split(triplets, "direct", answerers, store, images_dir=tmp_path)
    assert rerun["executed"] == 0
    assert rerun["skipped_existing"] == 10
    assert len(store.records()) == 10
    keys = {r.key for r in store.records()}
    assert len(keys) == 10


def test_run_split_resumes_after_partial_run(tmp_path):
    triplets = triplets_on_disk(tmp_path, 4)
    store = RunStore(tmp_path / "run")
    # simulate a run killed after two records
    half = {"vlm-a": make_client(ScriptedEndpoint(default="x"))}
    run_split(triplets[:2], "direct", half, store, images_dir=tmp_path)
    assert len(store.records()) == 2

    full = {"vlm-a": make_client(ScriptedEndpoint(default="x"))}
    manifest = run_split(triplets, "direct", full, store, images_dir=tmp_path)
    assert manifest["executed"] == 2
    assert len(store.records()) == 4
    reloaded = RunStore(tmp_path / "run")
    assert len(reloaded.records()) == 4


def test_run_split_empty_subset(tmp_path):
    store = RunStore(tmp_path / "run")
    manifest = run_split([], "direct", {"vlm-a": make_client(ScriptedEndpoint())}, store, images_dir=tmp_path)
    assert manifest["executed"] == 0
    assert store.records() == []


def test_run_split_indirect_needs_converter(tmp_path):
    store = RunStore(tmp_path / "run")
    with pytest.raises(ValueError):
        run_split([], "indirect", {}, store, images_dir=tmp_path)
