"""Structured table model with a LaTeX ``tabular`` subset parser.

The grid model is a spanning-cell table: every cell has a top-left anchor
plus a rowspan/colspan, and the spans tile the full rectangle with no gaps
or overlaps.  The parser accepts the subset of LaTeX that converter models
reliably emit (column spec, ``&``, ``\\\\``, rule commands, ``\\multicolumn``,
``\\multirow``, inline math kept as opaque text); everything else is
stripped into a warning list, never silently lost from cell text.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class MalformedTable(ValueError):
    """LaTeX source that cannot be mapped onto a consistent grid."""


class NoMatch(LookupError):
    """A lookup predicate matched no row or column."""


class AmbiguousMatch(LookupError):
    """A lookup predicate matched two or more rows or columns."""


@dataclass(frozen=True)
class Cell:
    row: int
    col: int
    rowspan: int = 1
    colspan: int = 1
    text: str = ""
    is_header: bool = False

    def __post_init__(self):
        if self.row < 0 or self.col < 0:
            raise ValueError(f"cell anchor must be non-negative, got ({self.row}, {self.col})")
        if self.rowspan < 1 or self.colspan < 1:
            raise ValueError(f"spans must be >= 1, got {self.rowspan}x{self.colspan}")

    def covers(self):
        for r in range(self.row, self.row + self.rowspan):
            for c in range(self.col, self.col + self.colspan):
                yield r, c


@dataclass
class TableGrid:
    n_rows: int
    n_cols: int
    cells: list[Cell]
    caption: str | None = None
    header_row_count: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_rows < 1 or self.n_cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.n_rows}x{self.n_cols}")
        if not (0 <= self.header_row_count <= self.n_rows):
            raise ValueError(f"header_row_count {self.header_row_count} outside 0..{self.n_rows}")
        seen: dict[tuple[int, int], Cell] = {}
        for cell in self.cells:
            for pos in cell.covers():
                r, c = pos
                if r >= self.n_rows or c >= self.n_cols:
                    raise ValueError(f"cell at {cell.row},{cell.col} spans outside the grid at {pos}")
                if pos in seen:
                    raise ValueError(f"overlapping spans at {pos}")
                seen[pos] = cell
        if len(seen) != self.n_rows * self.n_cols:
            missing = [(r, c) for r in range(self.n_rows) for c in range(self.n_cols) if (r, c) not in seen]
            raise ValueError(f"grid has uncovered positions: {missing[:5]}")

    def occupancy(self) -> list[list[Cell]]:
        """n_rows x n_cols matrix mapping each position to the cell covering it."""
        occ: list[list[Cell | None]] = [[None] * self.n_cols for _ in range(self.n_rows)]
        for cell in self.cells:
            for r, c in cell.covers():
                occ[r][c] = cell
        return occ  # type: ignore[return-value]

    def cell_at(self, row: int, col: int) -> Cell:
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise IndexError(f"({row}, {col}) outside {self.n_rows}x{self.n_cols} grid")
        return self.occupancy()[row][col]

    def to_dict(self) -> dict:
        return {
            "n_rows": self.n_rows,
            "n_cols": self.n_cols,
            "caption": self.caption,
            "header_row_count": self.header_row_count,
            "cells": [
                {
                    "row": c.row,
                    "col": c.col,
                    "rowspan": c.rowspan,
                    "colspan": c.colspan,
                    "text": c.text,
                    "is_header": c.is_header,
                }
                for c in sorted(self.cells, key=lambda c: (c.row, c.col))
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TableGrid":
        cells = [
            Cell(
                row=c["row"],
                col=c["col"],
                rowspan=c.get("rowspan", 1),
                colspan=c.get("colspan", 1),
                text=c.get("text", ""),
                is_header=c.get("is_header", False),
            )
            for c in data["cells"]
        ]
        return cls(
            n_rows=data["n_rows"],
            n_cols=data["n_cols"],
            cells=cells,
            caption=data.get("caption"),
            header_row_count=data.get("header_row_count", 0),
        )

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "TableGrid":
        return cls.from_dict(json.loads(text))


@dataclass
class LatexTable:
    source: str
    grid: TableGrid
    warnings: list[str] = field(default_factory=list)


# --- tokenizing helpers -----------------------------------------------------

_TABULAR_ENVS = ("tabular*", "tabularx", "longtable", "tabular")
_BEGIN_RE = re.compile(r"\\begin\{(tabular\*|tabularx|longtable|tabular)\}")
_FULL_RULES = ("hline", "toprule", "midrule", "bottomrule")
_PARTIAL_RULES = ("cline", "cmidrule", "specialrule")
# commands that decorate a row but carry no cell content
_ROW_NOISE = ("arrayrulecolor", "rowcolor", "noalign", "rule")


def _read_brace_group(text: str, start: int) -> tuple[str, int]:
    """Return (content, index_after) for the brace group starting at text[start] == '{'."""
    if start >= len(text) or text[start] != "{":
        raise MalformedTable(f"expected '{{' at offset {start}")
    depth = 0
    i = start
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            i += 2
            continue
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[start + 1 : i], i + 1
        i += 1
    raise MalformedTable("unbalanced braces")


def _skip_ws(text: str, i: int) -> int:
    while i < len(text) and text[i].isspace():
        i += 1
    return i


def _read_optional_bracket(text: str, i: int) -> int:
    i = _skip_ws(text, i)
    if i < len(text) and text[i] == "[":
        end = text.find("]", i)
        if end == -1:
            raise MalformedTable("unbalanced '[' argument")
        return end + 1
    return i


def _split_top_level(text: str, *, on_ampersand: bool) -> list[str]:
    """Split on row breaks (``\\\\``) or cell breaks (``&``) at brace depth 0, outside math."""
    parts: list[str] = []
    buf: list[str] = []
    depth = 0
    in_math = False
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\":
            nxt = text[i + 1] if i + 1 < n else ""
            if nxt == "\\" and depth == 0 and not in_math and not on_ampersand:
                parts.append("".join(buf))
                buf = []
                i += 2
                # swallow the optional spacing argument after a row break
                j = _skip_ws(text, i)
                if j < n and text[j] == "*":
                    j += 1
                    j = _skip_ws(text, j)
                if j < n and text[j] == "[":
                    end = text.find("]", j)
                    if end != -1:
                        i = end + 1
                continue
            buf.append(ch)
            if nxt:
                buf.append(nxt)
            i += 2
            continue
        if ch == "$":
            in_math = not in_math
        elif not in_math:
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth < 0:
                    raise MalformedTable("unbalanced braces in table body")
            elif ch == "&" and depth == 0 and on_ampersand:
                parts.append("".join(buf))
                buf = []
                i += 1
                continue
        buf.append(ch)
        i += 1
    parts.append("".join(buf))
    return parts


def _split_rows(body: str) -> list[str]:
    return _split_top_level(body, on_ampersand=False)


def _split_cells(row: str) -> list[str]:
    return _split_top_level(row, on_ampersand=True)


def _strip_rules(chunk: str, warnings: list[str]) -> tuple[str, int]:
    """Remove rule/decoration commands from a row chunk.

    Returns the remaining content and the count of full-width horizontal
    rules found (used for header detection).
    """
    full = 0
    out = chunk
    while True:
        m = re.search(r"\\([a-zA-Z]+)\*?", out)
        if not m:
            break
        name = m.group(1)
        if name in _FULL_RULES:
            full += 1
            end = m.end()
            end = _read_optional_bracket(out, end)
            out = out[: m.start()] + out[end:]
        elif name in _PARTIAL_RULES or name in _ROW_NOISE:
            end = m.end()
            end = _read_optional_bracket(out, end)
            end = _skip_ws(out, end)
            if name == "cmidrule" and end < len(out) and out[end] == "(":
                close = out.find(")", end)
                if close != -1:
                    end = close + 1
                end = _skip_ws(out, end)
            # these commands take 1-3 brace arguments; swallow what is there
            n_args = {"cline": 1, "cmidrule": 1, "specialrule": 3, "arrayrulecolor": 1, "rowcolor": 1, "noalign": 1, "rule": 2}[name]
            for _ in range(n_args):
                end = _skip_ws(out, end)
                if end < len(out) and out[end] == "{":
                    _, end = _read_brace_group(out, end)
            warnings_name = name
            if name not in _PARTIAL_RULES:
                warnings.append(f"stripped \\{warnings_name}")
            out = out[: m.start()] + out[end:]
        else:
            break
    return out, full


def _count_columns(colspec: str) -> int:
    """Count column slots in a tabular column spec, expanding *{n}{spec}."""
    n = 0
    i = 0
    while i < len(colspec):
        ch = colspec[i]
        if ch == "*":
            i = _skip_ws(colspec, i + 1)
            count_s, i = _read_brace_group(colspec, i)
            i = _skip_ws(colspec, i)
            inner, i = _read_brace_group(colspec, i)
            try:
                n += int(count_s.strip()) * _count_columns(inner)
            except ValueError as exc:
                raise MalformedTable(f"bad column multiplier: {count_s!r}") from exc
            continue
        elif ch in "lcrXS":
            n += 1
            i += 1
        elif ch in "pmb" and i + 1 < len(colspec) and colspec[i + 1] == "{":
            _, i = _read_brace_group(colspec, i + 1)
            n += 1
        elif ch in "@!><":
            if i + 1 < len(colspec) and colspec[i + 1] == "{":
                _, i = _read_brace_group(colspec, i + 1)
            else:
                i += 1
        else:
            i += 1  # |, whitespace, and anything decorative
    return n


# --- cell text cleanup -------------------------------------------------------

# wrappers whose braced argument is plain content
_UNWRAP_COMMANDS = {
    "textbf", "textit", "texttt", "textrm", "textsf", "textsc", "emph",
    "underline", "mbox", "text", "small", "footnotesize", "scriptsize",
    "makecell", "footnote", "textsuperscript", "textsubscript",
}
_SPACE_COMMANDS = {"quad", "qquad", ",", ";", ":", "!", " "}
_CHAR_ESCAPES = {"&": "&", "%": "%", "#": "#", "_": "_", "$": "$", "{": "{", "}": "}"}


def _split_math_segments(text: str) -> list[tuple[bool, str]]:
    """Split text into (is_math, segment) runs; math segments keep their $ delimiters."""
    segments: list[tuple[bool, str]] = []
    buf: list[str] = []
    in_math = False
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\" and i + 1 < n and not in_math:
            buf.append(ch)
            buf.append(text[i + 1])
            i += 2
            continue
        if ch == "$":
            if in_math:
                buf.append(ch)
                segments.append((True, "".join(buf)))
                buf = []
                in_math = False
            else:
                if buf:
                    segments.append((False, "".join(buf)))
                buf = [ch]
                in_math = True
            i += 1
            continue
        buf.append(ch)
        i += 1
    if buf:
        segments.append((in_math, "".join(buf)))
    return segments


def _clean_plain(text: str, warnings: list[str]) -> str:
    out: list[str] = []
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch == "\\":
            nxt = text[i + 1] if i + 1 < n else ""
            if nxt in _CHAR_ESCAPES:
                out.append(_CHAR_ESCAPES[nxt])
                i += 2
                continue
            if nxt in _SPACE_COMMANDS:
                out.append(" ")
                i += 2
                continue
            if nxt == "\\":
                out.append(" ")  # in-cell line break
                i += 2
                continue
            m = re.match(r"\\([a-zA-Z]+)\*?", text[i:])
            if m:
                name = m.group(1)
                j = i + m.end()
                if name in _SPACE_COMMANDS:
                    out.append(" ")
                    i = j
                    continue
                j = _read_optional_bracket(text, j)
                j = _skip_ws(text, j)
                if j < n and text[j] == "{":
                    arg, j = _read_brace_group(text, j)
                    out.append(_clean_plain(arg, warnings))
                warnings.append(f"stripped \\{name}")
                i = j
                continue
            # lone backslash before a non-letter: drop it
            warnings.append("stripped stray backslash")
            i += 1
            continue
        if ch == "~":
            out.append(" ")
            i += 1
            continue
        if ch == "{":
            arg, j = _read_brace_group(text, i)
            out.append(_clean_plain(arg, warnings))
            i = j
            continue
        if ch == "}":
            raise MalformedTable("unbalanced braces in cell")
        out.append(ch)
        i += 1
    return "".join(out)


def clean_cell_text(raw: str, warnings: list[str]) -> str:
    """Normalize one cell body: unwrap commands, keep inline math verbatim, collapse whitespace."""
    pieces: list[str] = []
    for is_math, segment in _split_math_segments(raw):
        if is_math:
            pieces.append(segment)
        else:
            cleaned = _clean_plain(segment, warnings)
            cleaned = re.sub(r"\s+", " ", cleaned)
            pieces.append(cleaned)
    return "".join(pieces).strip()


def _escape_cell_text(text: str) -> str:
    pieces: list[str] = []
    for is_math, segment in _split_math_segments(text):
        if is_math:
            pieces.append(segment)
        else:
            pieces.append(re.sub(r"([&%#_])", r"\\\1", segment))
    return "".join(pieces)


# --- the parser ---------------------------------------------------------------

def _parse_span_token(token: str, warnings: list[str]) -> tuple[int, int, str]:
    """Parse one cell token into (rowspan, colspan, cleaned text)."""
    rowspan = 1
    colspan = 1
    body = token.strip()

    m = re.match(r"\\multicolumn\s*", body)
    if m:
        i = m.end()
        count_s, i = _read_brace_group(body, _skip_ws(body, i))
        _, i = _read_brace_group(body, _skip_ws(body, i))  # column spec, alignment only
        inner, i = _read_brace_group(body, _skip_ws(body, i))
        trailing = body[i:].strip()
        if trailing:
            inner += " " + trailing
        try:
            colspan = int(count_s.strip())
        except ValueError as exc:
            raise MalformedTable(f"bad multicolumn count {count_s!r}") from exc
        body = inner.strip()

    m = re.match(r"\\multirow\s*", body)
    if m:
        i = _read_optional_bracket(body, m.end())
        count_s, i = _read_brace_group(body, _skip_ws(body, i))
        _, i = _read_brace_group(body, _skip_ws(body, i))  # width, usually {*}
        i = _read_optional_bracket(body, i)
        inner, i = _read_brace_group(body, _skip_ws(body, i))
        trailing = body[i:].strip()
        if trailing:
            inner += " " + trailing
        try:
            rowspan = int(count_s.strip())
        except ValueError as exc:
            raise MalformedTable(f"bad multirow count {count_s!r}") from exc
        body = inner.strip()

    if rowspan < 1 or colspan < 1:
        raise MalformedTable(f"non-positive span {rowspan}x{colspan}")
    return rowspan, colspan, clean_cell_text(body, warnings)


def _find_environment(source: str) -> tuple[str, str]:
    """Locate the first tabular-like environment; return (env_name, inner_text)."""
    m = _BEGIN_RE.search(source)
    if not m:
        raise MalformedTable("no tabular-like environment found")
    env = m.group(1)
    begin_tag = f"\\begin{{{env}}}"
    end_tag = f"\\end{{{env}}}"
    depth = 1
    i = m.end()
    while depth > 0:
        nb = source.find(begin_tag, i)
        ne = source.find(end_tag, i)
        if ne == -1:
            raise MalformedTable(f"unbalanced environment: missing {end_tag}")
        if nb != -1 and nb < ne:
            depth += 1
            i = nb + len(begin_tag)
        else:
            depth -= 1
            i = ne + len(end_tag)
    inner = source[m.end() : i - len(end_tag)]
    return env, inner


def _extract_caption(source: str) -> str | None:
    m = re.search(r"\\caption\s*(\[)?", source)
    if not m:
        return None
    i = m.end(0)
    if m.group(1):
        close = source.find("]", i)
        if close == -1:
            return None
        i = close + 1
    i = _skip_ws(source, i)
    if i >= len(source) or source[i] != "{":
        return None
    content, _ = _read_brace_group(source, i)
    caption_warnings: list[str] = []
    return clean_cell_text(content, caption_warnings) or None


def parse_latex_table(source: str, header_rows: int | None = None) -> LatexTable:
    """Parse the first ``tabular``-like environment in ``source`` into a grid.

    Header rows default to the rows above the first full-width horizontal
    rule that has at least one row above and one below it; pass
    ``header_rows`` to override.

    Raises MalformedTable when the environment is unbalanced or a row holds
    more cells than the column spec allows.
    """
    env, inner = _find_environment(source)
    warnings: list[str] = []

    i = _skip_ws(inner, 0)
    if env in ("tabular*", "tabularx"):
        _, i = _read_brace_group(inner, i)  # target width
        i = _skip_ws(inner, i)
    i = _read_optional_bracket(inner, i)
    i = _skip_ws(inner, i)
    n_cols = 0
    if i < len(inner) and inner[i] == "{":
        colspec, i = _read_brace_group(inner, i)
        n_cols = _count_columns(colspec)
    body = inner[i:]

    raw_chunks = _split_rows(body)
    rows: list[list[tuple[int, int, str]]] = []
    rules_before: dict[int, int] = {}
    for chunk in raw_chunks:
        content, full_rules = _strip_rules(chunk, warnings)
        if full_rules:
            rules_before[len(rows)] = rules_before.get(len(rows), 0) + full_rules
        if not content.strip() and "&" not in content:
            continue
        tokens = _split_cells(content)
        rows.append([_parse_span_token(tok, warnings) for tok in tokens])

    if not rows:
        raise MalformedTable("tabular environment has no rows")
    if n_cols == 0:
        n_cols = max(
            sum(cs for _, cs, _ in row) for row in rows
        )
        warnings.append("no usable column spec; inferred column count from rows")
    n_rows = len(rows)

    occ: list[list[int | None]] = [[None] * n_cols for _ in range(n_rows)]
    placed: list[dict] = []

    def occupied(r: int, c: int) -> bool:
        return occ[r][c] is not None

    for r, row in enumerate(rows):
        c = 0
        for rowspan, colspan, text in row:
            if c < n_cols and occupied(r, c):
                if text == "" and rowspan == 1:
                    # continuation slot under a rowspan from above
                    c += colspan
                    continue
                warnings.append(f"shifted cell past a spanned slot in row {r}")
                while c < n_cols and occupied(r, c):
                    c += 1
            if c >= n_cols:
                if text == "":
                    continue
                raise MalformedTable(f"row {r} has more cells than the {n_cols}-column spec")
            rowspan_eff = min(rowspan, n_rows - r)
            if rowspan_eff != rowspan:
                warnings.append(f"clamped rowspan at row {r} from {rowspan} to {rowspan_eff}")
            if c + colspan > n_cols:
                raise MalformedTable(f"row {r} has more cells than the {n_cols}-column spec")
            for rr in range(r, r + rowspan_eff):
                for cc in range(c, c + colspan):
                    if occ[rr][cc] is not None:
                        raise MalformedTable(f"overlapping spans at ({rr}, {cc})")
                    occ[rr][cc] = len(placed)
            placed.append({"row": r, "col": c, "rowspan": rowspan_eff, "colspan": colspan, "text": text})
            c += colspan

    # pad gaps left by short rows with empty cells
    for r in range(n_rows):
        for c in range(n_cols):
            if occ[r][c] is None:
                occ[r][c] = len(placed)
                placed.append({"row": r, "col": c, "rowspan": 1, "colspan": 1, "text": ""})

    if header_rows is not None:
        header_row_count = header_rows
    else:
        header_row_count = 0
        for idx in sorted(rules_before):
            if 1 <= idx <= n_rows - 1:
                header_row_count = idx
                break

    cells = [
        Cell(
            row=p["row"],
            col=p["col"],
            rowspan=p["rowspan"],
            colspan=p["colspan"],
            text=p["text"],
            is_header=p["row"] < header_row_count,
        )
        for p in placed
    ]
    grid = TableGrid(
        n_rows=n_rows,
        n_cols=n_cols,
        cells=cells,
        caption=_extract_caption(source),
        header_row_count=header_row_count,
    )
    return LatexTable(source=source, grid=grid, warnings=warnings)


# --- serializer ----------------------------------------------------------------

def serialize_latex(grid: TableGrid) -> str:
    """Render a grid back to LaTeX such that re-parsing yields an equal grid."""
    occ = grid.occupancy()
    lines: list[str] = []
    if grid.caption:
        lines.append(f"\\caption{{{_escape_cell_text(grid.caption)}}}")
    lines.append("\\begin{tabular}{" + "l" * grid.n_cols + "}")
    for r in range(grid.n_rows):
        tokens: list[str] = []
        c = 0
        while c < grid.n_cols:
            cell = occ[r][c]
            if cell.row == r and cell.col == c:
                body = _escape_cell_text(cell.text)
                if cell.rowspan > 1:
                    body = f"\\multirow{{{cell.rowspan}}}{{*}}{{{body}}}"
                if cell.colspan > 1:
                    body = f"\\multicolumn{{{cell.colspan}}}{{l}}{{{body}}}"
                elif body == "":
                    body = "{}"
                tokens.append(body)
                c += cell.colspan
            else:
                tokens.append("{}")
                c += 1
        lines.append(" & ".join(tokens) + " \\\\")
        if grid.header_row_count and r == grid.header_row_count - 1:
            lines.append("\\hline")
    lines.append("\\end{tabular}")
    return "\n".join(lines)


# --- lookup oracle ---------------------------------------------------------------

def _norm_key(text: str) -> str:
    return re.sub(r"\s+", " ", text).strip().casefold()


def lookup_cell(grid: TableGrid, row_key: str, col_key: str, key_col: int = 0) -> str:
    """Resolve the cell at the intersection of a row header and a column header.

    ``row_key`` is matched against the key column (default: first column) of
    body rows; ``col_key`` against header-row cells.  Grids without declared
    header rows treat the first row as the header for matching.  Spanning
    cells answer for every position they cover.

    Raises NoMatch / AmbiguousMatch when a predicate matches zero or
    multiple rows or columns.
    """
    if not (0 <= key_col < grid.n_cols):
        raise IndexError(f"key column {key_col} outside grid")
    occ = grid.occupancy()
    header_rows = max(grid.header_row_count, 1)
    row_key_n = _norm_key(row_key)
    col_key_n = _norm_key(col_key)

    col_matches = [
        c
        for c in range(grid.n_cols)
        if any(_norm_key(occ[r][c].text) == col_key_n for r in range(min(header_rows, grid.n_rows)))
    ]
    row_matches = [
        r for r in range(header_rows, grid.n_rows) if _norm_key(occ[r][key_col].text) == row_key_n
    ]

    if not row_matches:
        raise NoMatch(f"no row matches {row_key!r}")
    if not col_matches:
        raise NoMatch(f"no column matches {col_key!r}")
    if len(row_matches) > 1:
        raise AmbiguousMatch(f"{len(row_matches)} rows match {row_key!r}")
    if len(col_matches) > 1:
        raise AmbiguousMatch(f"{len(col_matches)} columns match {col_key!r}")
    return occ[row_matches[0]][col_matches[0]].text
