"""Minimal PDF reader and rasterizer for the page-extraction pipeline.

No PDF library is assumed: this module parses classic-xref PDFs (the kind
produced by common report generators), walks the page tree, interprets the
vector/text subset of the content-stream language, and rasterizes pages
onto PIL images.  Unsupported constructs degrade softly: unknown operators
are skipped, unknown filters raise UnreadableDocument.

Coordinate conventions: PDF user space has its origin bottom-left with y
up; raster space is top-left y down.  Matrices are (a, b, c, d, e, f) with
row-vector points, x' = a.x + c.y + e and y' = b.x + d.y + f.
"""

from __future__ import annotations

import base64
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

_DEJAVU = "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf"


class UnreadableDocument(ValueError):
    """The file is not a PDF this reader can interpret."""


@dataclass(frozen=True)
class Ref:
    num: int
    gen: int


@dataclass
class Name:
    value: str

    def __hash__(self):
        return hash(self.value)

    def __eq__(self, other):
        if isinstance(other, Name):
            return self.value == other.value
        return NotImplemented


@dataclass
class StreamObject:
    meta: dict
    raw: bytes

    def data(self) -> bytes:
        filters = self.meta.get("Filter")
        if filters is None:
            return self.raw
        if isinstance(filters, Name):
            filters = [filters]
        out = self.raw
        for filt in filters:
            if filt.value in ("FlateDecode", "Fl"):
                try:
                    out = zlib.decompress(out)
                except zlib.error as exc:
                    raise UnreadableDocument(f"bad FlateDecode stream: {exc}") from exc
            elif filt.value in ("ASCII85Decode", "A85"):
                body = re.sub(rb"\s", b"", out)
                if body.startswith(b"<~"):
                    body = body[2:]
                if body.endswith(b"~>"):
                    body = body[:-2]
                try:
                    out = base64.a85decode(body)
                except ValueError as exc:
                    raise UnreadableDocument(f"bad ASCII85 stream: {exc}") from exc
            else:
                raise UnreadableDocument(f"unsupported stream filter /{filt.value}")
        return out


_WHITESPACE = b"\x00\t\n\x0c\r "
_DELIMITERS = b"()<>[]{}/%"


class _Lexer:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def skip_ws(self) -> None:
        data, n = self.data, len(self.data)
        while self.pos < n:
            ch = data[self.pos : self.pos + 1]
            if ch in b"%":
                end = data.find(b"\n", self.pos)
                self.pos = n if end == -1 else end + 1
            elif ch in _WHITESPACE:
                self.pos += 1
            else:
                return

    def peek(self, n: int = 1) -> bytes:
        return self.data[self.pos : self.pos + n]

    def expect(self, token: bytes) -> None:
        if self.data[self.pos : self.pos + len(token)] != token:
            raise UnreadableDocument(
                f"expected {token!r} at offset {self.pos}, found {self.data[self.pos:self.pos+12]!r}"
            )
        self.pos += len(token)

    def read_name(self) -> Name:
        self.expect(b"/")
        start = self.pos
        data, n = self.data, len(self.data)
        while self.pos < n:
            ch = data[self.pos : self.pos + 1]
            if ch in _WHITESPACE or ch in _DELIMITERS:
                break
            self.pos += 1
        return Name(data[start : self.pos].decode("latin-1"))

    def read_string(self) -> bytes:
        self.expect(b"(")
        out = bytearray()
        depth = 1
        data, n = self.data, len(self.data)
        while self.pos < n:
            ch = data[self.pos]
            if ch == 0x5C:  # backslash
                self.pos += 1
                if self.pos >= n:
                    break
                esc = data[self.pos]
                mapping = {0x6E: 10, 0x72: 13, 0x74: 9, 0x62: 8, 0x66: 12}
                if esc in mapping:
                    out.append(mapping[esc])
                    self.pos += 1
                elif 0x30 <= esc <= 0x37:  # octal
                    digits = bytearray()
                    while self.pos < n and len(digits) < 3 and 0x30 <= data[self.pos] <= 0x37:
                        digits.append(data[self.pos])
                        self.pos += 1
                    out.append(int(digits.decode(), 8) & 0xFF)
                elif esc in (10, 13):  # line continuation
                    self.pos += 1
                else:
                    out.append(esc)
                    self.pos += 1
                continue
            if ch == 0x28:
                depth += 1
            elif ch == 0x29:
                depth -= 1
                if depth == 0:
                    self.pos += 1
                    return bytes(out)
            out.append(ch)
            self.pos += 1
        raise UnreadableDocument("unterminated string")

    def read_hex_string(self) -> bytes:
        self.expect(b"<")
        end = self.data.find(b">", self.pos)
        if end == -1:
            raise UnreadableDocument("unterminated hex string")
        digits = re.sub(rb"\s", b"", self.data[self.pos : end])
        if len(digits) % 2:
            digits += b"0"
        self.pos = end + 1
        return bytes.fromhex(digits.decode("latin-1"))

    _NUMBER = re.compile(rb"[+-]?(?:\d+\.\d*|\.\d+|\d+)")

    def read_number(self) -> float | int:
        m = self._NUMBER.match(self.data, self.pos)
        if not m:
            raise UnreadableDocument(f"expected number at offset {self.pos}")
        self.pos = m.end()
        token = m.group().decode()
        return float(token) if (b"." in m.group()) else int(token)

    def read_value(self):
        self.skip_ws()
        ch = self.peek()
        if not ch:
            raise UnreadableDocument("unexpected end of data")
        if ch == b"/":
            return self.read_name()
        if ch == b"(":
            return self.read_string()
        if self.peek(2) == b"<<":
            return self.read_dict()
        if ch == b"<":
            return self.read_hex_string()
        if ch == b"[":
            self.pos += 1
            items = []
            while True:
                self.skip_ws()
                if self.peek() == b"]":
                    self.pos += 1
                    return items
                items.append(self.read_value())
        if self.data.startswith(b"true", self.pos):
            self.pos += 4
            return True
        if self.data.startswith(b"false", self.pos):
            self.pos += 5
            return False
        if self.data.startswith(b"null", self.pos):
            self.pos += 4
            return None
        # number, possibly an indirect reference "n g R"
        m = re.match(rb"(\d+)\s+(\d+)\s+R(?![\w])", self.data[self.pos : self.pos + 32])
        if m:
            self.pos += m.end()
            return Ref(int(m.group(1)), int(m.group(2)))
        return self.read_number()

    def read_dict(self) -> dict:
        self.expect(b"<<")
        out: dict = {}
        while True:
            self.skip_ws()
            if self.peek(2) == b">>":
                self.pos += 2
                return out
            key = self.read_name()
            out[key.value] = self.read_value()


class Document:
    """Parsed PDF: object map plus the page list."""

    def __init__(self, data: bytes):
        if not data.lstrip()[:5].startswith(b"%PDF-"):
            raise UnreadableDocument("missing %PDF header")
        self.data = data
        self.objects: dict[int, object] = {}
        self._scan_objects()
        self.trailer = self._read_trailer()
        self.pages = self._collect_pages()

    # object table ------------------------------------------------------------

    _OBJ_RE = re.compile(rb"(\d+)\s+(\d+)\s+obj\b")

    def _scan_objects(self) -> None:
        pos = 0
        while True:
            m = self._OBJ_RE.search(self.data, pos)
            if not m:
                break
            num = int(m.group(1))
            lexer = _Lexer(self.data, m.end())
            try:
                value = lexer.read_value()
            except UnreadableDocument:
                pos = m.end()
                continue
            lexer.skip_ws()
            if isinstance(value, dict) and lexer.peek(6) == b"stream":
                lexer.pos += 6
                if lexer.peek(2) == b"\r\n":
                    lexer.pos += 2
                elif lexer.peek(1) in (b"\n", b"\r"):
                    lexer.pos += 1
                start = lexer.pos
                length = value.get("Length")
                if isinstance(length, Ref):
                    length = None  # resolved below by scanning
                if isinstance(length, (int, float)):
                    end = start + int(length)
                    if self.data[end : end + 20].lstrip()[:9] != b"endstream":
                        length = None  # declared length is wrong; rescan
                    else:
                        raw = self.data[start:end]
                if length is None:
                    end = self.data.find(b"endstream", start)
                    if end == -1:
                        raise UnreadableDocument("unterminated stream")
                    raw = self.data[start:end].rstrip(b"\r\n")
                value = StreamObject(meta=value, raw=raw)
                pos = self.data.find(b"endstream", start) + len(b"endstream")
            else:
                pos = lexer.pos
            self.objects[num] = value

        if not self.objects:
            raise UnreadableDocument("no objects found")

    def _read_trailer(self) -> dict:
        idx = self.data.rfind(b"trailer")
        if idx != -1:
            lexer = _Lexer(self.data, idx + len(b"trailer"))
            lexer.skip_ws()
            try:
                return lexer.read_dict()
            except UnreadableDocument:
                pass
        # fall back: find the catalog by type
        for num, obj in self.objects.items():
            if isinstance(obj, dict) and _name(obj.get("Type")) == "Catalog":
                return {"Root": Ref(num, 0)}
        raise UnreadableDocument("no trailer and no catalog object")

    def resolve(self, value):
        seen = 0
        while isinstance(value, Ref):
            value = self.objects.get(value.num)
            seen += 1
            if seen > 32:
                raise UnreadableDocument("reference cycle")
        return value

    # page tree ------------------------------------------------------------------

    def _collect_pages(self) -> list[dict]:
        root = self.resolve(self.trailer.get("Root"))
        if not isinstance(root, dict):
            raise UnreadableDocument("catalog missing")
        pages_node = self.resolve(root.get("Pages"))
        if not isinstance(pages_node, dict):
            return []
        collected: list[dict] = []

        def walk(node: dict, inherited: dict) -> None:
            merged = dict(inherited)
            for key in ("MediaBox", "Resources", "Rotate"):
                if key in node:
                    merged[key] = node[key]
            node_type = _name(node.get("Type"))
            if node_type == "Pages" or "Kids" in node:
                for kid in self.resolve(node.get("Kids")) or []:
                    kid_node = self.resolve(kid)
                    if isinstance(kid_node, dict):
                        walk(kid_node, merged)
            else:
                page = dict(node)
                for key, val in merged.items():
                    page.setdefault(key, val)
                collected.append(page)

        walk(pages_node, {})
        return collected

    def page_count(self) -> int:
        return len(self.pages)

    def page_media_box(self, index: int) -> tuple[float, float, float, float]:
        box = self.resolve(self.pages[index].get("MediaBox")) or [0, 0, 612, 792]
        x0, y0, x1, y1 = (float(self.resolve(v)) for v in box)
        return x0, y0, x1, y1

    def page_content(self, index: int) -> bytes:
        contents = self.resolve(self.pages[index].get("Contents"))
        if contents is None:
            return b""
        if isinstance(contents, StreamObject):
            return contents.data()
        if isinstance(contents, list):
            chunks = []
            for item in contents:
                stream = self.resolve(item)
                if isinstance(stream, StreamObject):
                    chunks.append(stream.data())
            return b"\n".join(chunks)
        raise UnreadableDocument("page contents are not a stream")


def _name(value) -> str | None:
    return value.value if isinstance(value, Name) else None


def load(path: str | Path) -> Document:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableDocument(f"cannot read {path}: {exc}") from exc
    return Document(data)


# --- content-stream interpretation -----------------------------------------------

Matrix = tuple[float, float, float, float, float, float]
IDENTITY: Matrix = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


def mat_multiply(m1: Matrix, m2: Matrix) -> Matrix:
    a1, b1, c1, d1, e1, f1 = m1
    a2, b2, c2, d2, e2, f2 = m2
    return (
        a1 * a2 + b1 * c2,
        a1 * b2 + b1 * d2,
        c1 * a2 + d1 * c2,
        c1 * b2 + d1 * d2,
        e1 * a2 + f1 * c2 + e2,
        e1 * b2 + f1 * d2 + f2,
    )


def mat_apply(m: Matrix, x: float, y: float) -> tuple[float, float]:
    a, b, c, d, e, f = m
    return a * x + c * y + e, b * x + d * y + f


@dataclass
class _GraphicsState:
    ctm: Matrix = IDENTITY
    stroke_rgb: tuple[float, float, float] = (0.0, 0.0, 0.0)
    fill_rgb: tuple[float, float, float] = (0.0, 0.0, 0.0)
    line_width: float = 1.0


@dataclass
class PaintedPath:
    op: str  # "stroke" | "fill" | "fillstroke"
    subpaths: list[list[tuple[float, float]]]
    rgb: tuple[float, float, float]
    stroke_rgb: tuple[float, float, float]
    line_width: float


@dataclass
class TextRun:
    text: str
    origin: tuple[float, float]
    size: float
    rgb: tuple[float, float, float]


@dataclass
class PageRecording:
    paths: list[PaintedPath] = field(default_factory=list)
    texts: list[TextRun] = field(default_factory=list)

    def line_segments(self) -> list[tuple[float, float, float, float]]:
        """All painted straight segments in page (user-space) coordinates."""
        segments = []
        for painted in self.paths:
            for subpath in painted.subpaths:
                for (x1, y1), (x2, y2) in zip(subpath, subpath[1:]):
                    segments.append((x1, y1, x2, y2))
        return segments


_OPERATOR_RE = re.compile(rb"[A-Za-z'\"][A-Za-z0-9*']*")


def _tokenize_content(data: bytes):
    lexer = _Lexer(data)
    n = len(data)
    while True:
        lexer.skip_ws()
        if lexer.pos >= n:
            return
        ch = lexer.peek()
        if ch == b"/":
            yield lexer.read_name()
        elif ch == b"(":
            yield lexer.read_string()
        elif lexer.peek(2) == b"<<":
            yield lexer.read_dict()
        elif ch == b"<":
            yield lexer.read_hex_string()
        elif ch == b"[":
            yield lexer.read_value()
        elif ch in b"+-.0123456789":
            yield lexer.read_number()
        else:
            m = _OPERATOR_RE.match(data, lexer.pos)
            if not m:
                lexer.pos += 1  # unknown byte, skip
                continue
            lexer.pos = m.end()
            op = m.group().decode("latin-1")
            if op == "BI":
                # inline image: skip to EI
                end = data.find(b"EI", lexer.pos)
                lexer.pos = n if end == -1 else end + 2
                continue
            yield _Op(op)


@dataclass(frozen=True)
class _Op:
    name: str


def interpret_page(doc: Document, index: int) -> PageRecording:
    """Replay a page's content stream into geometry and text runs (user space)."""
    recording = PageRecording()
    state = _GraphicsState()
    stack: list[_GraphicsState] = []
    operands: list = []
    subpaths: list[list[tuple[float, float]]] = []
    current: list[tuple[float, float]] = []
    text_matrix: Matrix = IDENTITY
    line_matrix: Matrix = IDENTITY
    font_size = 12.0
    leading = 0.0

    def num(value) -> float:
        return float(value) if isinstance(value, (int, float)) else 0.0

    def flush_path(op: str) -> None:
        nonlocal subpaths, current
        if current:
            subpaths.append(current)
        painted = [sp for sp in subpaths if len(sp) >= 2]
        if painted and op in ("stroke", "fill", "fillstroke"):
            recording.paths.append(
                PaintedPath(
                    op=op,
                    subpaths=[[mat_apply(state.ctm, x, y) for x, y in sp] for sp in painted],
                    rgb=state.fill_rgb,
                    stroke_rgb=state.stroke_rgb,
                    line_width=state.line_width * _matrix_scale(state.ctm),
                )
            )
        subpaths = []
        current = []

    def show_text(raw: bytes) -> None:
        nonlocal text_matrix
        text = raw.decode("cp1252", errors="replace")
        composed = mat_multiply(text_matrix, state.ctm)
        origin = mat_apply(composed, 0.0, 0.0)
        size = font_size * _matrix_scale(composed)
        recording.texts.append(TextRun(text=text, origin=origin, size=size, rgb=state.fill_rgb))
        advance = _approx_text_width(text, size) / max(_matrix_scale(state.ctm), 1e-9)
        text_matrix = mat_multiply((1, 0, 0, 1, advance, 0), text_matrix)

    for token in _tokenize_content(data=doc.page_content(index)):
        if not isinstance(token, _Op):
            operands.append(token)
            continue
        op = token.name
        if op == "q":
            stack.append(
                _GraphicsState(state.ctm, state.stroke_rgb, state.fill_rgb, state.line_width)
            )
        elif op == "Q":
            if stack:
                state = stack.pop()
        elif op == "cm" and len(operands) >= 6:
            cm = tuple(num(v) for v in operands[-6:])
            state.ctm = mat_multiply(cm, state.ctm)  # type: ignore[arg-type]
        elif op == "w" and operands:
            state.line_width = num(operands[-1])
        elif op == "RG" and len(operands) >= 3:
            state.stroke_rgb = tuple(num(v) for v in operands[-3:])  # type: ignore[assignment]
        elif op == "rg" and len(operands) >= 3:
            state.fill_rgb = tuple(num(v) for v in operands[-3:])  # type: ignore[assignment]
        elif op == "G" and operands:
            g = num(operands[-1])
            state.stroke_rgb = (g, g, g)
        elif op == "g" and operands:
            g = num(operands[-1])
            state.fill_rgb = (g, g, g)
        elif op in ("K", "k") and len(operands) >= 4:
            c, m, y, k = (num(v) for v in operands[-4:])
            rgb = ((1 - c) * (1 - k), (1 - m) * (1 - k), (1 - y) * (1 - k))
            if op == "K":
                state.stroke_rgb = rgb
            else:
                state.fill_rgb = rgb
        elif op == "m" and len(operands) >= 2:
            if current:
                subpaths.append(current)
            current = [(num(operands[-2]), num(operands[-1]))]
        elif op == "l" and len(operands) >= 2:
            current.append((num(operands[-2]), num(operands[-1])))
        elif op in ("c", "v", "y"):
            # curves flattened to their endpoint; grids and rules are straight
            if len(operands) >= 2:
                current.append((num(operands[-2]), num(operands[-1])))
        elif op == "h":
            if current:
                current.append(current[0])
        elif op == "re" and len(operands) >= 4:
            x, y, width, height = (num(v) for v in operands[-4:])
            if current:
                subpaths.append(current)
                current = []
            subpaths.append(
                [(x, y), (x + width, y), (x + width, y + height), (x, y + height), (x, y)]
            )
        elif op in ("S", "s"):
            if op == "s" and current:
                current.append(current[0])
            flush_path("stroke")
        elif op in ("f", "F", "f*"):
            flush_path("fill")
        elif op in ("B", "B*", "b", "b*"):
            if op in ("b", "b*") and current:
                current.append(current[0])
            flush_path("fillstroke")
        elif op == "n":
            flush_path("none")
        elif op == "BT":
            text_matrix = IDENTITY
            line_matrix = IDENTITY
        elif op == "ET":
            pass
        elif op == "Tf" and len(operands) >= 1:
            font_size = num(operands[-1])
        elif op == "TL" and operands:
            leading = num(operands[-1])
        elif op == "Td" and len(operands) >= 2:
            line_matrix = mat_multiply((1, 0, 0, 1, num(operands[-2]), num(operands[-1])), line_matrix)
            text_matrix = line_matrix
        elif op == "TD" and len(operands) >= 2:
            leading = -num(operands[-1])
            line_matrix = mat_multiply((1, 0, 0, 1, num(operands[-2]), num(operands[-1])), line_matrix)
            text_matrix = line_matrix
        elif op == "Tm" and len(operands) >= 6:
            line_matrix = tuple(num(v) for v in operands[-6:])  # type: ignore[assignment]
            text_matrix = line_matrix
        elif op == "T*":
            line_matrix = mat_multiply((1, 0, 0, 1, 0, -leading), line_matrix)
            text_matrix = line_matrix
        elif op == "Tj" and operands and isinstance(operands[-1], bytes):
            show_text(operands[-1])
        elif op == "'" and operands and isinstance(operands[-1], bytes):
            line_matrix = mat_multiply((1, 0, 0, 1, 0, -leading), line_matrix)
            text_matrix = line_matrix
            show_text(operands[-1])
        elif op == '"' and operands and isinstance(operands[-1], bytes):
            line_matrix = mat_multiply((1, 0, 0, 1, 0, -leading), line_matrix)
            text_matrix = line_matrix
            show_text(operands[-1])
        elif op == "TJ" and operands and isinstance(operands[-1], list):
            for item in operands[-1]:
                if isinstance(item, bytes):
                    show_text(item)
        operands = []
    return recording


def _matrix_scale(m: Matrix) -> float:
    a, b, c, d, _, _ = m
    sx = (a * a + b * b) ** 0.5
    sy = (c * c + d * d) ** 0.5
    return (sx + sy) / 2.0


def _approx_text_width(text: str, size: float) -> float:
    return 0.55 * size * len(text)


# --- rasterization -------------------------------------------------------------------

_font_cache: dict[int, ImageFont.ImageFont] = {}


def _load_font(size: int):
    size = max(size, 4)
    if size not in _font_cache:
        try:
            _font_cache[size] = ImageFont.truetype(_DEJAVU, size=size)
        except OSError:
            _font_cache[size] = ImageFont.load_default()
    return _font_cache[size]


def _rgb255(rgb: tuple[float, float, float]) -> tuple[int, int, int]:
    return tuple(min(255, max(0, round(v * 255))) for v in rgb)  # type: ignore[return-value]


def rasterize_page(doc: Document, index: int, scale: float) -> Image.Image:
    """Render one page to an RGB image at ``scale`` pixels per PDF point."""
    x0, y0, x1, y1 = doc.page_media_box(index)
    width = max(1, round((x1 - x0) * scale))
    height = max(1, round((y1 - y0) * scale))
    image = Image.new("RGB", (width, height), "white")
    draw = ImageDraw.Draw(image)

    def to_device(x: float, y: float) -> tuple[float, float]:
        return (x - x0) * scale, height - (y - y0) * scale

    recording = interpret_page(doc, index)
    for painted in recording.paths:
        for subpath in painted.subpaths:
            points = [to_device(x, y) for x, y in subpath]
            if painted.op in ("fill", "fillstroke") and len(points) >= 3:
                draw.polygon(points, fill=_rgb255(painted.rgb))
            if painted.op in ("stroke", "fillstroke") and len(points) >= 2:
                line_px = max(1, round(painted.line_width * scale))
                draw.line(points, fill=_rgb255(painted.stroke_rgb), width=line_px)
    for run in recording.texts:
        px, py = to_device(*run.origin)
        font = _load_font(round(run.size * scale))
        draw.text((px, py), run.text, fill=_rgb255(run.rgb), font=font, anchor="ls")
    return image
