from __future__ import annotations

import hashlib

import pytest

from tableval.ingest import (
    LineGridDetector,
    PageImage,
    RenderFailure,
    ingest_pdf,
    load_manifest,
    render_page,
    scan_for_table_pages,
    verify_page_image,
    write_manifest,
)
from tableval.minipdf import UnreadableDocument, load

from pdf_fixtures import build_corpus_pdf, build_pageless_pdf, build_single_table_pdf


@pytest.fixture(scope="module")
def corpus_pdf(tmp_path_factory):
    return build_corpus_pdf(tmp_path_factory.mktemp("pdfs") / "corpus.pdf")


@pytest.fixture(scope="module")
def compressed_pdf(tmp_path_factory):
    return build_corpus_pdf(tmp_path_factory.mktemp("pdfs") / "corpus_flate.pdf", compress=True)


def test_scan_flags_only_the_grid_page(corpus_pdf):
    assert scan_for_table_pages(corpus_pdf) == [2]


def test_scan_handles_compressed_streams(compressed_pdf):
    assert scan_for_table_pages(compressed_pdf) == [2]


def test_scan_empty_pdf(tmp_path):
    path = build_pageless_pdf(tmp_path / "empty.pdf")
    assert scan_for_table_pages(path) == []


def test_text_only_pages_excluded(corpus_pdf):
    doc = load(corpus_pdf)
    detector = LineGridDetector()
    from tableval.minipdf import interpret_page

    assert not detector(interpret_page(doc, 0))
    assert detector(interpret_page(doc, 1))
    assert not detector(interpret_page(doc, 2))


def test_render_dpi_at_default_zoom(corpus_pdf, tmp_path):
    page = render_page(corpus_pdf, 2, 3.0, out_dir=tmp_path)
    assert page.dpi == 300
    # US Letter is 8.5 x 11 inches
    assert (page.width_px, page.height_px) == (2550, 3300)
    assert page.page_number == 2
    assert verify_page_image(tmp_path, page)


def test_render_scales_linearly_with_zoom(corpus_pdf, tmp_path):
    small = render_page(corpus_pdf, 2, 1.0, out_dir=tmp_path / "z1")
    big = render_page(corpus_pdf, 2, 3.0, out_dir=tmp_path / "z3")
    assert small.dpi == 100
    assert (big.width_px, big.height_px) == (3 * small.width_px, 3 * small.height_px)


def test_render_is_deterministic(corpus_pdf, tmp_path):
    first = render_page(corpus_pdf, 2, 3.0, out_dir=tmp_path / "a")
    second = render_page(corpus_pdf, 2, 3.0, out_dir=tmp_path / "b")
    assert first.content_hash == second.content_hash


def test_render_rejects_missing_page(corpus_pdf, tmp_path):
    with pytest.raises(RenderFailure):
        render_page(corpus_pdf, 9, 3.0, out_dir=tmp_path)


def test_unreadable_document(tmp_path):
    garbage = tmp_path / "not_a_pdf.pdf"
    garbage.write_bytes(b"this is just text, no header")
    with pytest.raises(UnreadableDocument):
        scan_for_table_pages(garbage)


def test_ingest_manifest_completeness_and_idempotence(corpus_pdf, tmp_path):
    out = tmp_path / "corpus"
    pages = ingest_pdf(corpus_pdf, out, zoom=3.0)
    assert [p.page_number for p in pages] == [2]
    manifest = load_manifest(out)
    assert len(manifest) == 1

    png_files = {p.name for p in out.glob("*.png")}
    assert png_files == {p.image_path for p in manifest}
    for page in manifest:
        assert verify_page_image(out, page)

    manifest_bytes = (out / "manifest.jsonl").read_bytes()
    image_bytes = (out / manifest[0].image_path).read_bytes()
    again = ingest_pdf(corpus_pdf, out, zoom=3.0)
    assert [p.content_hash for p in again] == [p.content_hash for p in pages]
    assert (out / "manifest.jsonl").read_bytes() == manifest_bytes
    assert (out / manifest[0].image_path).read_bytes() == image_bytes


def test_ingest_with_explicit_pages_overrides_detection(corpus_pdf, tmp_path):
    out = tmp_path / "explicit"
    pages = ingest_pdf(corpus_pdf, out, zoom=1.0, pages=[1, 3])
    assert [p.page_number for p in pages] == [1, 3]
    assert len(load_manifest(out)) == 2


def test_user_supplied_manifest_round_trip(tmp_path):
    fake = tmp_path / "image.png"
    fake.write_bytes(b"not really a png")
    page = PageImage(
        doc_id="external",
        page_number=7,
        image_path="image.png",
        width_px=10,
        height_px=10,
        dpi=300,
        content_hash=hashlib.sha256(b"not really a png").hexdigest(),
    )
    write_manifest(tmp_path, [page])
    loaded = load_manifest(tmp_path)
    assert loaded == [page]
    assert verify_page_image(tmp_path, loaded[0])


def test_single_table_fixture_detected(tmp_path):
    pdf = build_single_table_pdf(tmp_path / "single.pdf")
    assert scan_for_table_pages(pdf) == [1]
