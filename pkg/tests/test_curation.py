from __future__ import annotations

import json

import pytest

from tableval.curation import (
    DatasetSplit,
    EndpointError,
    InsufficientData,
    MalformedGeneration,
    MissingImage,
    QATriplet,
    TripletStore,
    check_no_leakage,
    curate_pages,
    export_chat_dataset,
    extract_json_objects,
    generate_qa_pairs,
    split_dataset,
    triplet_id,
)
from tableval.gateway import ChatClient, EndpointConfig, RetryPolicy
from tableval.ingest import PageImage

from mocks import FakeTimer, ScriptedEndpoint


def make_client(endpoint: ScriptedEndpoint, max_attempts: int = 2) -> ChatClient:
    timer = FakeTimer()
    return ChatClient(
        EndpointConfig(
            base_url="http://gen.local/v1",
            retry=RetryPolicy(max_attempts=max_attempts, backoff_base_s=0.0),
        ),
        transport=endpoint.transport(),
        clock=timer.clock,
        sleep=timer.sleep,
    )


@pytest.fixture
def page(tmp_path) -> PageImage:
    image = tmp_path / "table_page_0002.png"
    image.write_bytes(b"fake png bytes")
    return PageImage(
        doc_id="doc",
        page_number=2,
        image_path="table_page_0002.png",
        width_px=100,
        height_px=100,
        dpi=300,
        content_hash="ab" * 32,
    )


def make_triplets(n_images: int, per_image: int = 2) -> list[QATriplet]:
    triplets = []
    for i in range(n_images):
        for j in range(per_image):
            question = f"What is the value in row {i}, variant {j}?"
            triplets.append(
                QATriplet(
                    id=triplet_id(f"hash{i}", question),
                    question=question,
                    answer=f"{i}.{j} mm",
                    image_file=f"page_{i:04d}.png",
                )
            )
    return triplets


# --- generation ------------------------------------------------------------------

def test_generate_single_json_object(page, tmp_path):
    endpoint = ScriptedEndpoint(script=['{"Question": "What is the maximum span?", "Answer": "3.64 m"}'])
    triplets = generate_qa_pairs(page, make_client(endpoint), "gen-model", images_dir=tmp_path)
    assert len(triplets) == 1
    assert triplets[0].answer == "3.64 m"
    assert triplets[0].image_file == page.image_path
    assert triplets[0].provenance == "generated"
    assert triplets[0].id == triplet_id(page.content_hash, "What is the maximum span?")


def test_generate_extracts_json_from_prose(page, tmp_path):
    reply = 'Sure! Here you go:\n{"Question": "Q1?", "Answer": "45 min"}\nHope that helps.'
    endpoint = ScriptedEndpoint(script=[reply])
    triplets = generate_qa_pairs(page, make_client(endpoint), "gen-model", images_dir=tmp_path)
    assert [t.answer for t in triplets] == ["45 min"]


def test_generate_caps_at_two_pairs(page, tmp_path):
    reply = json.dumps(
        [
            {"Question": "Q1?", "Answer": "1"},
            {"Question": "Q2?", "Answer": "2"},
            {"Question": "Q3?", "Answer": "3"},
        ]
    )
    endpoint = ScriptedEndpoint(script=[reply])
    triplets = generate_qa_pairs(page, make_client(endpoint), "gen-model", images_dir=tmp_path)
    assert [t.question for t in triplets] == ["Q1?", "Q2?"]


def test_generate_retries_once_then_malformed(page, tmp_path):
    endpoint = ScriptedEndpoint(script=["no json here", "still nothing"])
    with pytest.raises(MalformedGeneration):
        generate_qa_pairs(page, make_client(endpoint), "gen-model", images_dir=tmp_path)
    assert len(endpoint.requests) == 2


def test_generate_recovers_on_retry(page, tmp_path):
    endpoint = ScriptedEndpoint(script=["oops", '{"Question": "Q?", "Answer": ["a", "b"]}'])
    triplets = generate_qa_pairs(page, make_client(endpoint), "gen-model", images_dir=tmp_path)
    assert triplets[0].answer == "a, b"


def test_generate_endpoint_error(page, tmp_path):
    endpoint = ScriptedEndpoint(script=[500, 500])
    with pytest.raises(EndpointError):
        generate_qa_pairs(page, make_client(endpoint), "gen-model", images_dir=tmp_path)


def test_generate_missing_image(page, tmp_path):
    endpoint = ScriptedEndpoint()
    with pytest.raises(MissingImage):
        generate_qa_pairs(page, make_client(endpoint), "gen-model", images_dir=tmp_path / "elsewhere")


def test_extract_json_objects_shapes():
    text = 'prefix {"a": 1} middle [{"b": 2}, {"c": 3}] {broken'
    assert extract_json_objects(text) == [{"a": 1}, {"b": 2}, {"c": 3}]


# --- store ---------------------------------------------------------------------------

def test_store_round_trip_and_field_names(tmp_path):
    store = TripletStore(tmp_path / "triplets.jsonl")
    t = make_triplets(1)[0]
    assert store.add(t)
    assert not store.add(t)  # deduped by id
    raw = (tmp_path / "triplets.jsonl").read_text().splitlines()
    record = json.loads(raw[0])
    assert set(record) == {"Question", "Answer", "image_file", "id", "provenance"}
    reloaded = TripletStore(tmp_path / "triplets.jsonl")
    assert reloaded.get(t.id).question == t.question


def test_store_edit_log_and_provenance(tmp_path):
    store = TripletStore(tmp_path / "triplets.jsonl")
    t = make_triplets(1)[0]
    store.add(t)
    updated = store.apply_edit(t.id, answer="corrected value")
    assert updated.provenance == "manually_validated"
    assert updated.answer == "corrected value"
    edits = [json.loads(l) for l in store.edits_path.read_text().splitlines()]
    assert edits[0]["old_answer"] == t.answer
    assert edits[0]["new_answer"] == "corrected value"
    reloaded = TripletStore(tmp_path / "triplets.jsonl")
    assert reloaded.get(t.id).answer == "corrected value"


def test_curate_pages_idempotent_and_records_failures(page, tmp_path):
    store = TripletStore(tmp_path / "triplets.jsonl")
    endpoint = ScriptedEndpoint(script=['{"Question": "Q?", "Answer": "51 mm"}'])
    client = make_client(endpoint)
    stats = curate_pages([page], client, "gen-model", store, images_dir=tmp_path)
    assert stats["added"] == 1
    again = curate_pages([page], client, "gen-model", store, images_dir=tmp_path)
    assert again == {"pages": 0, "added": 0, "skipped_pages": 1, "failures": 0}

    bad_page = PageImage(
        doc_id="doc",
        page_number=3,
        image_path="table_page_0003.png",
        width_px=10,
        height_px=10,
        dpi=300,
        content_hash="cd" * 32,
    )
    (tmp_path / bad_page.image_path).write_bytes(b"png")
    failing = ScriptedEndpoint(script=["nope", "nope"])
    stats = curate_pages([bad_page], make_client(failing), "gen-model", store, images_dir=tmp_path)
    assert stats["failures"] == 1
    assert bad_page.image_path in store.failed_images()
    # failed pages are not retried on the next pass
    stats = curate_pages([bad_page], make_client(ScriptedEndpoint()), "gen-model", store, images_dir=tmp_path)
    assert stats["skipped_pages"] == 1


# --- split ------------------------------------------------------------------------------

def test_split_production_sizes():
    triplets = make_triplets(250)  # 500 triplets over 250 images
    split = split_dataset(triplets, train_size=400, seed=7)
    assert len(split.train) == 400
    assert len(split.test) == 100
    assert check_no_leakage(split, triplets)


def test_split_deterministic_per_seed():
    triplets = make_triplets(40)
    a = split_dataset(triplets, 60, seed=3)
    b = split_dataset(triplets, 60, seed=3)
    c = split_dataset(triplets, 60, seed=4)
    assert a.train == b.train and a.test == b.test
    assert a.train != c.train


def test_split_full_train_leaves_empty_test():
    triplets = make_triplets(5)
    split = split_dataset(triplets, train_size=len(triplets), seed=0)
    assert split.test == []


def test_split_shared_image_stays_together_exhaustively():
    triplets = make_triplets(1, per_image=2) + [
        QATriplet(id="solo1", question="Q3?", answer="3", image_file="page_solo1.png"),
        QATriplet(id="solo2", question="Q4?", answer="4", image_file="page_solo2.png"),
    ]
    shared = {t.id for t in triplets[:2]}
    for seed in range(25):
        split = split_dataset(triplets, train_size=1, seed=seed)
        assert len(split.train) == 1
        assert split.train[0] not in shared
        assert shared <= set(split.test)
        assert check_no_leakage(split, triplets)


def test_split_insufficient_data():
    triplets = make_triplets(2)
    with pytest.raises(InsufficientData):
        split_dataset(triplets, train_size=10, seed=0)
    with pytest.raises(InsufficientData):
        # all groups are pairs; an odd split would tear one apart
        split_dataset(triplets, train_size=3, seed=0)


def test_split_overlap_rejected():
    with pytest.raises(ValueError):
        DatasetSplit(train=["a"], test=["a"], seed=0)


# --- export -----------------------------------------------------------------------------

def test_export_roles_and_bytes(tmp_path):
    store = TripletStore(tmp_path / "triplets.jsonl")
    question = "What is the minimum length of fasteners for board lumber 184 mm or less wide?"
    t = QATriplet(
        id=triplet_id("imghash", question),
        question=question,
        answer="51 mm",
        image_file="table_page_904.png",
    )
    store.add(t)
    (tmp_path / t.image_file).write_bytes(b"png")
    split = DatasetSplit(train=[t.id], test=[], seed=0)

    out = export_chat_dataset(store, split, "train", tmp_path / "train.json", images_dir=tmp_path)
    records = json.loads(out.read_text())
    assert len(records) == 1
    roles = [m["role"] for m in records[0]["messages"]]
    assert roles == ["system", "user", "assistant"]
    user_parts = records[0]["messages"][1]["content"]
    assert user_parts[0] == {"type": "image", "image": "table_page_904.png"}
    assert user_parts[1]["text"] == question
    assert records[0]["messages"][2]["content"] == "51 mm"

    first = out.read_bytes()
    export_chat_dataset(store, split, "train", tmp_path / "train.json", images_dir=tmp_path)
    assert out.read_bytes() == first


def test_export_missing_image(tmp_path):
    store = TripletStore(tmp_path / "triplets.jsonl")
    t = make_triplets(1)[0]
    store.add(t)
    split = DatasetSplit(train=[t.id], test=[], seed=0)
    with pytest.raises(MissingImage):
        export_chat_dataset(store, split, "train", tmp_path / "out.json", images_dir=tmp_path)
