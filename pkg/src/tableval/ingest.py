"""Extract table pages from PDFs and render them as hashed, manifested images.

Table detection is pluggable; the default flags pages whose vector content
draws a ruled grid (several horizontal and vertical rules).  Rendering maps
a zoom factor to DPI with a fixed base of 100, so the default zoom of 3.0
produces 300 DPI images.  Every rendered page gets one manifest row; a
user-supplied manifest of pre-rendered images is accepted anywhere a
rendered one is.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

from . import minipdf
from .minipdf import Document, UnreadableDocument

BASE_DPI = 100
MANIFEST_NAME = "manifest.jsonl"


class RenderFailure(RuntimeError):
    pass


@dataclass
class PageImage:
    doc_id: str
    page_number: int  # 1-based
    image_path: str  # relative to the manifest directory
    width_px: int
    height_px: int
    dpi: int
    content_hash: str


class LineGridDetector:
    """Flags pages whose painted segments form at least a small ruled grid."""

    def __init__(self, min_horizontal: int = 3, min_vertical: int = 3, min_length_pt: float = 36.0):
        self.min_horizontal = min_horizontal
        self.min_vertical = min_vertical
        self.min_length_pt = min_length_pt

    def __call__(self, recording: minipdf.PageRecording) -> bool:
        horizontals: set[int] = set()
        verticals: set[int] = set()
        for x1, y1, x2, y2 in recording.line_segments():
            if abs(y1 - y2) < 0.5 and abs(x1 - x2) >= self.min_length_pt:
                horizontals.add(round(y1))
            elif abs(x1 - x2) < 0.5 and abs(y1 - y2) >= self.min_length_pt:
                verticals.add(round(x1))
        return len(horizontals) >= self.min_horizontal and len(verticals) >= self.min_vertical


def open_document(pdf: str | Path | Document) -> Document:
    if isinstance(pdf, Document):
        return pdf
    return minipdf.load(pdf)


def scan_for_table_pages(pdf: str | Path | Document, detector=None) -> list[int]:
    """1-based page numbers flagged by the detector; deterministic for a fixed detector."""
    doc = open_document(pdf)
    detector = detector or LineGridDetector()
    flagged = []
    for index in range(doc.page_count()):
        if detector(minipdf.interpret_page(doc, index)):
            flagged.append(index + 1)
    return flagged


def render_page(
    pdf: str | Path | Document,
    page_number: int,
    zoom: float = 3.0,
    *,
    out_dir: str | Path,
    doc_id: str | None = None,
) -> PageImage:
    """Render one page at BASE_DPI x zoom and write it as a lossless PNG."""
    if zoom <= 0:
        raise ValueError("zoom must be positive")
    doc = open_document(pdf)
    if doc_id is None:
        doc_id = Path(pdf).stem if not isinstance(pdf, Document) else "document"
    if not (1 <= page_number <= doc.page_count()):
        raise RenderFailure(f"page {page_number} outside 1..{doc.page_count()}")
    dpi = round(BASE_DPI * zoom)
    scale = dpi / 72.0
    try:
        image = minipdf.rasterize_page(doc, page_number - 1, scale)
    except Exception as exc:  # parser/raster errors surface as render failures
        raise RenderFailure(f"page {page_number}: {exc}") from exc
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    name = f"{doc_id}_page_{page_number:04d}.png"
    buffer = io.BytesIO()
    image.save(buffer, format="PNG")
    png = buffer.getvalue()
    (out_dir / name).write_bytes(png)
    return PageImage(
        doc_id=doc_id,
        page_number=page_number,
        image_path=name,
        width_px=image.width,
        height_px=image.height,
        dpi=dpi,
        content_hash=hashlib.sha256(png).hexdigest(),
    )


# --- manifest -----------------------------------------------------------------------

def manifest_path(out_dir: str | Path) -> Path:
    return Path(out_dir) / MANIFEST_NAME


def load_manifest(out_dir: str | Path) -> list[PageImage]:
    path = manifest_path(out_dir)
    if not path.exists():
        return []
    pages = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            pages.append(PageImage(**json.loads(line)))
    return pages


def write_manifest(out_dir: str | Path, pages: list[PageImage]) -> None:
    ordered = sorted(pages, key=lambda p: (p.doc_id, p.page_number))
    with manifest_path(out_dir).open("w", encoding="utf-8") as fh:
        for page in ordered:
            fh.write(json.dumps(asdict(page), sort_keys=True) + "\n")


def verify_page_image(out_dir: str | Path, page: PageImage) -> bool:
    """Check the manifest row's hash against the bytes actually on disk."""
    path = Path(out_dir) / page.image_path
    if not path.exists():
        return False
    return hashlib.sha256(path.read_bytes()).hexdigest() == page.content_hash


def ingest_pdf(
    pdf_path: str | Path,
    out_dir: str | Path,
    zoom: float = 3.0,
    pages: list[int] | None = None,
    detector=None,
    doc_id: str | None = None,
) -> list[PageImage]:
    """Detect (or accept) table pages, render any that are missing, update the manifest.

    Idempotent at page granularity: a manifest row whose image file is
    intact and was rendered at the requested DPI is kept as-is.
    """
    pdf_path = Path(pdf_path)
    doc = open_document(pdf_path)
    doc_id = doc_id or pdf_path.stem
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wanted = pages if pages is not None else scan_for_table_pages(doc, detector)
    dpi = round(BASE_DPI * zoom)

    existing = {(p.doc_id, p.page_number): p for p in load_manifest(out_dir)}
    for page_number in wanted:
        key = (doc_id, page_number)
        current = existing.get(key)
        if current and current.dpi == dpi and verify_page_image(out_dir, current):
            continue
        existing[key] = render_page(doc, page_number, zoom, out_dir=out_dir, doc_id=doc_id)
    write_manifest(out_dir, list(existing.values()))
    return [existing[(doc_id, n)] for n in wanted]
