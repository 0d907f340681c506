"""Curate, store, split, and export image-question-answer triplets.

Triplets come from a generator endpoint prompted to emit strict JSON
question/answer pairs for a page image (at most two per image).  The store
is newline-delimited JSON using the upstream field names ``Question`` /
``Answer`` / ``image_file``; manual corrections land in an edit log and
flip a provenance flag instead of overwriting history.  Splitting groups
triplets by page image so no image leaks across the train/test boundary.
"""

from __future__ import annotations

import hashlib
import json
import random
import threading
from dataclasses import dataclass
from pathlib import Path

from .gateway import ChatClient, ChatMessage, ChatRequest, GatewayError, ImagePart, TextPart
from .ingest import PageImage

PROVENANCES = ("generated", "manually_validated")

QA_GENERATION_PROMPT = """You are an expert at analyzing complex tabular data. Generate question-answer pairs from the table in the supplied page image, following every rule:
1. Use only the data inside the table; ignore any surrounding text.
2. Two QA pairs out of an image is sufficient.
3. Each question must be unambiguous, directly answerable from the table, and respect how rows and columns depend on each other.
4. Each answer is the exact value from the table with no added explanation; if several values match, give them as a list.
5. Respond with a valid JSON object with two keys: "Question" and "Answer". Do not include any additional text, explanations, or formatting outside this JSON structure."""

DEFAULT_SYSTEM_PROMPT = (
    "You answer questions about tables shown in document page images. "
    "Reply with the exact value from the table."
)


class EndpointError(RuntimeError):
    """The generator endpoint failed after retries."""


class MalformedGeneration(RuntimeError):
    """The generator's output held no usable JSON QA pair, even after a retry."""


class InsufficientData(ValueError):
    pass


class MissingImage(FileNotFoundError):
    pass


@dataclass
class QATriplet:
    id: str
    question: str
    answer: str
    image_file: str
    provenance: str = "generated"

    def __post_init__(self):
        if not self.question or not self.answer:
            raise ValueError("question and answer must be non-empty")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")


@dataclass
class DatasetSplit:
    train: list[str]
    test: list[str]
    seed: int

    def __post_init__(self):
        overlap = set(self.train) & set(self.test)
        if overlap:
            raise ValueError(f"train/test overlap on {len(overlap)} ids")

    def subset(self, name: str) -> list[str]:
        if name not in ("train", "test"):
            raise ValueError("subset must be 'train' or 'test'")
        return self.train if name == "train" else self.test

    def to_dict(self) -> dict:
        return {"train": self.train, "test": self.test, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSplit":
        return cls(train=data["train"], test=data["test"], seed=data["seed"])


def triplet_id(image_hash: str, question: str) -> str:
    return hashlib.sha256(f"{image_hash}:{question}".encode("utf-8")).hexdigest()[:16]


# --- generation -----------------------------------------------------------------

def extract_json_objects(text: str) -> list[dict]:
    """Pull every balanced JSON object out of free-form model text, in order."""
    decoder = json.JSONDecoder()
    found: list[dict] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch not in "[{":
            i += 1
            continue
        try:
            value, end = decoder.raw_decode(text, i)
        except ValueError:
            i += 1
            continue
        if isinstance(value, dict):
            found.append(value)
        elif isinstance(value, list):
            found.extend(v for v in value if isinstance(v, dict))
        i = end
    return found


def _coerce_answer(value) -> str | None:
    if isinstance(value, str):
        return value.strip() or None
    if isinstance(value, (int, float)):
        return str(value)
    if isinstance(value, list) and value:
        parts = [str(v).strip() for v in value if str(v).strip()]
        return ", ".join(parts) or None
    return None


def _parse_qa_reply(text: str, max_pairs: int) -> list[tuple[str, str]]:
    pairs = []
    for obj in extract_json_objects(text):
        if "Question" not in obj or "Answer" not in obj:
            continue
        question = obj["Question"].strip() if isinstance(obj["Question"], str) else ""
        answer = _coerce_answer(obj["Answer"])
        if question and answer:
            pairs.append((question, answer))
        if len(pairs) == max_pairs:
            break
    return pairs


def generate_qa_pairs(
    page: PageImage,
    client: ChatClient,
    model_id: str,
    *,
    images_dir: str | Path,
    prompt: str = QA_GENERATION_PROMPT,
    max_pairs: int = 2,
) -> list[QATriplet]:
    """Ask the generator endpoint for QA pairs over one page image.

    Malformed output is retried once, then raised as MalformedGeneration;
    nothing is silently repaired.
    """
    image_path = Path(images_dir) / page.image_path
    if not image_path.exists():
        raise MissingImage(str(image_path))
    request = ChatRequest(
        model_id=model_id,
        messages=[
            ChatMessage("user", [ImagePart(image_path.read_bytes()), TextPart(prompt)])
        ],
        temperature=0.0,
    )
    last_text = ""
    for _ in range(2):
        try:
            reply = client.complete(request)
        except GatewayError as exc:
            raise EndpointError(str(exc)) from exc
        last_text = reply.text
        pairs = _parse_qa_reply(reply.text, max_pairs)
        if pairs:
            return [
                QATriplet(
                    id=triplet_id(page.content_hash, question),
                    question=question,
                    answer=answer,
                    image_file=page.image_path,
                )
                for question, answer in pairs
            ]
    raise MalformedGeneration(f"no JSON QA pair in generator output: {last_text[:200]!r}")


# --- the triplet store ------------------------------------------------------------

class TripletStore:
    """Single-writer NDJSON store keyed by triplet id, with an edit log."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.edits_path = self.path.with_suffix(".edits.jsonl")
        self.failures_path = self.path.with_suffix(".failures.jsonl")
        self._lock = threading.Lock()
        self._records: dict[str, QATriplet] = {}
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    record = json.loads(line)
                    t = QATriplet(
                        id=record["id"],
                        question=record["Question"],
                        answer=record["Answer"],
                        image_file=record["image_file"],
                        provenance=record.get("provenance", "generated"),
                    )
                    self._records[t.id] = t

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, triplet_id_: str) -> bool:
        return triplet_id_ in self._records

    def get(self, triplet_id_: str) -> QATriplet:
        return self._records[triplet_id_]

    def all(self) -> list[QATriplet]:
        return sorted(self._records.values(), key=lambda t: t.id)

    def images_seen(self) -> set[str]:
        return {t.image_file for t in self._records.values()}

    @staticmethod
    def _encode(t: QATriplet) -> str:
        return json.dumps(
            {
                "Question": t.question,
                "Answer": t.answer,
                "image_file": t.image_file,
                "id": t.id,
                "provenance": t.provenance,
            },
            ensure_ascii=False,
            sort_keys=True,
        )

    def add(self, triplet: QATriplet) -> bool:
        """Append if unseen; returns False for an already-stored id."""
        with self._lock:
            if triplet.id in self._records:
                return False
            self._records[triplet.id] = triplet
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(self._encode(triplet) + "\n")
            return True

    def record_failure(self, image_file: str, reason: str) -> None:
        with self._lock:
            with self.failures_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"image_file": image_file, "reason": reason}, sort_keys=True) + "\n")

    def failed_images(self) -> set[str]:
        if not self.failures_path.exists():
            return set()
        return {
            json.loads(line)["image_file"]
            for line in self.failures_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        }

    def apply_edit(self, triplet_id_: str, question: str | None = None, answer: str | None = None) -> QATriplet:
        """Manual validation: log the edit, keep the old values in the log, flip provenance."""
        with self._lock:
            old = self._records[triplet_id_]
            updated = QATriplet(
                id=old.id,
                question=question if question is not None else old.question,
                answer=answer if answer is not None else old.answer,
                image_file=old.image_file,
                provenance="manually_validated",
            )
            with self.edits_path.open("a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {
                            "id": old.id,
                            "old_question": old.question,
                            "old_answer": old.answer,
                            "new_question": updated.question,
                            "new_answer": updated.answer,
                        },
                        ensure_ascii=False,
                        sort_keys=True,
                    )
                    + "\n"
                )
            self._records[triplet_id_] = updated
            self._rewrite()
            return updated

    def _rewrite(self) -> None:
        with self.path.open("w", encoding="utf-8") as fh:
            for t in sorted(self._records.values(), key=lambda t: t.id):
                fh.write(self._encode(t) + "\n")


def curate_pages(
    pages: list[PageImage],
    client: ChatClient,
    model_id: str,
    store: TripletStore,
    *,
    images_dir: str | Path,
    prompt: str = QA_GENERATION_PROMPT,
    max_pairs: int = 2,
    max_workers: int = 4,
) -> dict:
    """Generate triplets for every page not yet curated; failures are recorded, not repaired.

    Generation fans out over pages up to ``max_workers`` in flight; the
    store stays single-writer.
    """
    stats = {"pages": 0, "added": 0, "skipped_pages": 0, "failures": 0}
    done = store.images_seen() | store.failed_images()
    pending: list[PageImage] = []
    for page in pages:
        if page.image_path in done:
            stats["skipped_pages"] += 1
        else:
            pending.append(page)
    stats["pages"] = len(pending)

    def generate(page: PageImage):
        try:
            return page, generate_qa_pairs(
                page, client, model_id, images_dir=images_dir, prompt=prompt, max_pairs=max_pairs
            ), None
        except (MalformedGeneration, EndpointError) as exc:
            return page, None, exc

    if max_workers <= 1 or len(pending) <= 1:
        results = map(generate, pending)
    else:
        from concurrent.futures import ThreadPoolExecutor

        pool = ThreadPoolExecutor(max_workers=max_workers)
        results = pool.map(generate, pending)

    for page, triplets, error in results:
        if error is not None:
            store.record_failure(page.image_path, f"{type(error).__name__}: {error}")
            stats["failures"] += 1
            continue
        for triplet in triplets:
            if store.add(triplet):
                stats["added"] += 1
    if max_workers > 1 and len(pending) > 1:
        pool.shutdown()
    return stats


# --- splitting --------------------------------------------------------------------

def split_dataset(triplets: list[QATriplet], train_size: int, seed: int) -> DatasetSplit:
    """Deterministic page-grouped split: images never straddle train and test."""
    if train_size > len(triplets):
        raise InsufficientData(f"train_size {train_size} exceeds {len(triplets)} triplets")
    groups: dict[str, list[str]] = {}
    for t in sorted(triplets, key=lambda t: t.id):
        groups.setdefault(t.image_file, []).append(t.id)
    order = sorted(groups)
    random.Random(seed).shuffle(order)
    # exact-fit subset of whole image groups, chosen along the shuffled order
    reachable: dict[int, tuple[int, str] | None] = {0: None}
    for image in order:
        size = len(groups[image])
        snapshot = list(reachable.items())
        for total, _ in snapshot:
            new_total = total + size
            if new_total <= train_size and new_total not in reachable:
                reachable[new_total] = (total, image)
        if train_size in reachable:
            break
    if train_size not in reachable:
        raise InsufficientData(
            f"cannot reach train_size {train_size} exactly without splitting an image group"
        )
    chosen: set[str] = set()
    total = train_size
    while total:
        prev, image = reachable[total]  # type: ignore[misc]
        chosen.add(image)
        total = prev
    train = [tid for image in order if image in chosen for tid in groups[image]]
    train_set = set(train)
    test = [t.id for t in sorted(triplets, key=lambda t: t.id) if t.id not in train_set]
    return DatasetSplit(train=train, test=test, seed=seed)


def check_no_leakage(split: DatasetSplit, triplets: list[QATriplet]) -> bool:
    by_id = {t.id: t for t in triplets}
    train_images = {by_id[i].image_file for i in split.train}
    test_images = {by_id[i].image_file for i in split.test}
    return not (train_images & test_images)


# --- chat export -------------------------------------------------------------------

def export_chat_dataset(
    store: TripletStore,
    split: DatasetSplit,
    subset: str,
    out_path: str | Path,
    *,
    images_dir: str | Path,
    system_prompt: str = DEFAULT_SYSTEM_PROMPT,
) -> Path:
    """Write the chat-format fine-tuning dataset: one record per triplet,
    roles ordered system / user(image, question) / assistant(answer),
    byte-stable across runs (sorted by triplet id)."""
    images_dir = Path(images_dir)
    records = []
    for triplet_id_ in sorted(split.subset(subset)):
        t = store.get(triplet_id_)
        if not (images_dir / t.image_file).exists():
            raise MissingImage(str(images_dir / t.image_file))
        records.append(
            {
                "messages": [
                    {"role": "system", "content": system_prompt},
                    {
                        "role": "user",
                        "content": [
                            {"type": "image", "image": t.image_file},
                            {"type": "text", "text": t.question},
                        ],
                    },
                    {"role": "assistant", "content": t.answer},
                ]
            }
        )
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(records, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return out_path
