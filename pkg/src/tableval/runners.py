"""Execute the two table-input methods over a dataset split.

Direct: the page image plus the question go straight to the answering
model.  Indirect: a converter model turns the page image into LaTeX, the
LaTeX is validated against the table parser, and the answering model sees
the LaTeX text plus the question (no image unless asked for).  One record
is persisted per (triplet, method, model); a run can be killed and resumed
without duplicating work.
"""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

from .curation import QATriplet
from .gateway import ChatClient, ChatMessage, ChatRequest, GatewayError, ImagePart, TextPart, text_message
from .tables import MalformedTable, parse_latex_table

METHODS = ("direct", "indirect")
STATUSES = ("ok", "conversion_failed", "endpoint_failed")

CONVERSION_PROMPT = (
    "Convert the visual tabular content of this page image into LaTeX. "
    "Return only the LaTeX code for the table, with no commentary or markdown fences."
)

ANSWER_FROM_LATEX_PROMPT = (
    "The following LaTeX code describes a table. Answer the question using only this table.\n\n"
    "{latex}\n\nQuestion: {question}"
)


class DuplicateRecord(ValueError):
    """A record for this (triplet, method, model) already exists in the run."""


@dataclass
class GenerationRecord:
    triplet_id: str
    method: str
    model_id: str
    generated_answer: str
    intermediate_latex: str | None
    status: str
    latency_ms: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.status not in STATUSES:
            raise ValueError(f"status must be one of {STATUSES}")
        should_have_latex = self.method == "indirect" and self.status != "endpoint_failed"
        if (self.intermediate_latex is not None) != should_have_latex:
            raise ValueError(
                "intermediate_latex must be present exactly for indirect records "
                "whose endpoints responded"
            )

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.triplet_id, self.method, self.model_id)


def load_records(run_dir: str | Path) -> list[GenerationRecord]:
    """Read a run's records without creating or touching anything."""
    path = Path(run_dir) / "records.ndjson"
    if not path.exists():
        return []
    return [
        GenerationRecord(**json.loads(line))
        for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]


class RunStore:
    """Single-writer, append-only store for one run directory."""

    def __init__(self, run_dir: str | Path):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.records_path = self.run_dir / "records.ndjson"
        self.conversions_path = self.run_dir / "conversions.ndjson"
        self.manifest_path = self.run_dir / "manifest.json"
        self._lock = threading.Lock()
        self._keys: set[tuple[str, str, str]] = {r.key for r in self.records()}

    def records(self) -> list[GenerationRecord]:
        return load_records(self.run_dir)

    def has(self, triplet_id: str, method: str, model_id: str) -> bool:
        return (triplet_id, method, model_id) in self._keys

    def add(self, record: GenerationRecord) -> None:
        with self._lock:
            if record.key in self._keys:
                raise DuplicateRecord(f"duplicate record for {record.key}")
            self._keys.add(record.key)
            with self.records_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(asdict(record), ensure_ascii=False, sort_keys=True) + "\n")

    def add_conversion(self, triplet_id: str, model_id: str, latex: str, parse_ok: bool) -> None:
        """Keep the raw converter output even when the final record cannot carry it."""
        with self._lock:
            with self.conversions_path.open("a", encoding="utf-8") as fh:
                fh.write(
                    json.dumps(
                        {
                            "triplet_id": triplet_id,
                            "model_id": model_id,
                            "latex": latex,
                            "parse_ok": parse_ok,
                        },
                        ensure_ascii=False,
                        sort_keys=True,
                    )
                    + "\n"
                )

    def conversions(self) -> list[dict]:
        if not self.conversions_path.exists():
            return []
        return [
            json.loads(line)
            for line in self.conversions_path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]

    def write_manifest(self, manifest: dict) -> None:
        self.manifest_path.write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


def _load_image(images_dir: str | Path, triplet: QATriplet) -> bytes:
    path = Path(images_dir) / triplet.image_file
    return path.read_bytes()


def run_direct(
    triplet: QATriplet,
    answerer: ChatClient,
    model_id: str,
    *,
    images_dir: str | Path,
    system_prompt: str | None = None,
    store: RunStore | None = None,
) -> GenerationRecord:
    """One chat call: [system?, user(image, question)]."""
    messages = []
    if system_prompt:
        messages.append(text_message("system", system_prompt))
    messages.append(
        ChatMessage("user", [ImagePart(_load_image(images_dir, triplet)), TextPart(triplet.question)])
    )
    request = ChatRequest(model_id=model_id, messages=messages, temperature=0.0)
    try:
        reply = answerer.complete(request)
        record = GenerationRecord(
            triplet_id=triplet.id,
            method="direct",
            model_id=model_id,
            generated_answer=reply.text,
            intermediate_latex=None,
            status="ok",
            latency_ms=reply.latency_ms,
        )
    except GatewayError:
        record = GenerationRecord(
            triplet_id=triplet.id,
            method="direct",
            model_id=model_id,
            generated_answer="",
            intermediate_latex=None,
            status="endpoint_failed",
            latency_ms=0,
        )
    if store is not None:
        store.add(record)
    return record


def run_indirect(
    triplet: QATriplet,
    converter: ChatClient,
    converter_model_id: str,
    answerer: ChatClient,
    model_id: str,
    *,
    images_dir: str | Path,
    include_image: bool = False,
    store: RunStore | None = None,
) -> GenerationRecord:
    """Convert the page to LaTeX, validate it, then answer from the LaTeX text.

    Unparseable LaTeX marks the record conversion_failed but still flows to
    the answering step; the raw converter output is always kept in the
    conversion log when the converter responded.
    """
    image = _load_image(images_dir, triplet)
    convert_request = ChatRequest(
        model_id=converter_model_id,
        messages=[ChatMessage("user", [ImagePart(image), TextPart(CONVERSION_PROMPT)])],
        temperature=0.0,
    )
    try:
        latex = converter.complete(convert_request).text
    except GatewayError:
        record = GenerationRecord(
            triplet_id=triplet.id,
            method="indirect",
            model_id=model_id,
            generated_answer="",
            intermediate_latex=None,
            status="endpoint_failed",
            latency_ms=0,
        )
        if store is not None:
            store.add(record)
        return record

    try:
        parse_latex_table(latex)
        status = "ok"
    except MalformedTable:
        status = "conversion_failed"
    if store is not None:
        store.add_conversion(triplet.id, model_id, latex, parse_ok=status == "ok")

    parts: list = [TextPart(ANSWER_FROM_LATEX_PROMPT.format(latex=latex, question=triplet.question))]
    if include_image:
        parts.insert(0, ImagePart(image))
    answer_request = ChatRequest(model_id=model_id, messages=[ChatMessage("user", parts)], temperature=0.0)
    try:
        reply = answerer.complete(answer_request)
        record = GenerationRecord(
            triplet_id=triplet.id,
            method="indirect",
            model_id=model_id,
            generated_answer=reply.text,
            intermediate_latex=latex,
            status=status,
            latency_ms=reply.latency_ms,
        )
    except GatewayError:
        record = GenerationRecord(
            triplet_id=triplet.id,
            method="indirect",
            model_id=model_id,
            generated_answer="",
            intermediate_latex=None,
            status="endpoint_failed",
            latency_ms=0,
        )
    if store is not None:
        store.add(record)
    return record


def run_split(
    triplets: list[QATriplet],
    method: str,
    answerers: dict[str, ChatClient],
    store: RunStore,
    *,
    images_dir: str | Path,
    converter: tuple[ChatClient, str] | None = None,
    system_prompt: str | None = None,
    include_image: bool = False,
    max_workers: int = 4,
    config_hash: str = "",
) -> dict:
    """Run every (triplet, model) pair not already present in the store.

    Resumable: records already persisted are skipped, so a rerun after a
    crash converges to the same record count as a clean run.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if method == "indirect" and converter is None:
        raise ValueError("indirect runs need a converter endpoint")
    jobs = [
        (triplet, model_id)
        for model_id in sorted(answerers)
        for triplet in sorted(triplets, key=lambda t: t.id)
        if not store.has(triplet.id, method, model_id)
    ]

    def execute(job: tuple[QATriplet, str]) -> str:
        triplet, model_id = job
        if method == "direct":
            record = run_direct(
                triplet,
                answerers[model_id],
                model_id,
                images_dir=images_dir,
                system_prompt=system_prompt,
                store=store,
            )
        else:
            conv_client, conv_model = converter  # type: ignore[misc]
            record = run_indirect(
                triplet,
                conv_client,
                conv_model,
                answerers[model_id],
                model_id,
                images_dir=images_dir,
                include_image=include_image,
                store=store,
            )
        return record.status

    statuses: list[str] = []
    if max_workers <= 1 or len(jobs) <= 1:
        statuses = [execute(job) for job in jobs]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            statuses = list(pool.map(execute, jobs))

    manifest = {
        "method": method,
        "models": sorted(answerers),
        "triplets": len(triplets),
        "executed": len(jobs),
        "skipped_existing": len(triplets) * len(answerers) - len(jobs),
        "statuses": {status: statuses.count(status) for status in STATUSES},
        "config_hash": config_hash,
    }
    store.write_manifest(manifest)
    return manifest
