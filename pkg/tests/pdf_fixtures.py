"""Reportlab-built fixture PDFs: known page sizes, known table pages."""

from __future__ import annotations

from pathlib import Path

from reportlab.lib.pagesizes import letter
from reportlab.pdfgen import canvas


def build_corpus_pdf(path: Path, compress: bool = False) -> Path:
    """Three US-Letter pages; only page 2 draws a ruled table grid."""
    c = canvas.Canvas(str(path), pagesize=letter)
    c.setPageCompression(1 if compress else 0)

    c.setFont("Helvetica", 12)
    c.drawString(72, 700, "Scope and application")
    c.drawString(72, 680, "This division covers general requirements.")
    c.showPage()

    c.setFont("Helvetica", 10)
    c.drawString(72, 700, "Table 9.23.3.4 Fastener requirements")
    xs = [72, 210, 330, 450, 540]
    ys = [480, 520, 560, 600, 640]
    c.grid(xs, ys)
    rows = [
        ("Element", "Common Nails", "Screws", "Staples"),
        ("Board lumber 184 mm or less", "51", "45", "51"),
        ("Board lumber more than 184 mm", "51", "45", "51"),
        ("Fibreboard sheathing", "n/a", "44", "28"),
    ]
    for r, row in enumerate(rows):
        for col, text in enumerate(row):
            c.drawString(xs[col] + 4, ys[len(ys) - 2 - r] + 6, text)
    c.showPage()

    c.setFont("Helvetica", 12)
    c.drawString(72, 700, "Appendix notes, prose only.")
    c.showPage()

    c.save()
    return path


def build_single_table_pdf(path: Path) -> Path:
    """One page with one 3x3 grid; used by curation-facing tests."""
    c = canvas.Canvas(str(path), pagesize=letter)
    c.setPageCompression(0)
    c.setFont("Helvetica", 10)
    xs = [100, 220, 340, 460]
    ys = [500, 540, 580, 620]
    c.grid(xs, ys)
    c.drawString(104, 586, "Span")
    c.showPage()
    c.save()
    return path


PAGELESS_PDF = b"""%PDF-1.4
1 0 obj
<< /Type /Catalog /Pages 2 0 R >>
endobj
2 0 obj
<< /Type /Pages /Kids [] /Count 0 >>
endobj
trailer
<< /Root 1 0 R /Size 3 >>
%%EOF
"""


def build_pageless_pdf(path: Path) -> Path:
    path.write_bytes(PAGELESS_PDF)
    return path
