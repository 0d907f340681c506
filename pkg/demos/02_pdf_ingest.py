"""Detect the table page in a generated PDF and render it at 300 DPI.

Needs the dev extra (reportlab) to build the sample document.
"""

import tempfile
from pathlib import Path

from reportlab.lib.pagesizes import letter
from reportlab.pdfgen import canvas

from tableval import ingest_pdf, scan_for_table_pages
from tableval.ingest import load_manifest


def build_sample(path: Path) -> Path:
    c = canvas.Canvas(str(path), pagesize=letter)
    c.setFont("Helvetica", 12)
    c.drawString(72, 700, "Front matter, prose only.")
    c.showPage()
    c.setFont("Helvetica", 9)
    c.grid([72, 200, 330, 460], [500, 540, 580, 620])
    c.drawString(76, 586, "Span")
    c.drawString(204, 586, "Grade")
    c.drawString(334, 586, "Length")
    c.showPage()
    c.save()
    return path


def main():
    workdir = Path(tempfile.mkdtemp(prefix="ingest-demo-"))
    pdf = build_sample(workdir / "sample.pdf")
    print("table pages detected:", scan_for_table_pages(pdf))

    pages = ingest_pdf(pdf, workdir / "corpus", zoom=3.0)
    for page in pages:
        print(
            f"page {page.page_number}: {page.width_px}x{page.height_px} px at {page.dpi} dpi, "
            f"sha256 {page.content_hash[:12]}..."
        )
    print("manifest rows:", len(load_manifest(workdir / "corpus")))
    print("output in", workdir / "corpus")


if __name__ == "__main__":
    main()
