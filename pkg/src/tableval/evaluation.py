"""Grade generated answers against ground truth and compute the metric suite.

Two graders exist: a judge model that classifies an answer as correct or
incorrect, and a deterministic matcher used as its fallback (and as a
judge-free mode).  On top of the per-answer verdicts sit the run accuracy,
the base-vs-fine-tuned 2x2 agreement matrix, the relative accuracy gain,
and the correction-to-regression ratio.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

from .gateway import ChatClient, ChatRequest, GatewayError, text_message


class EmptyRun(ValueError):
    pass


class MisalignedRuns(ValueError):
    """Verdict lists cover different triplet id sets."""


class UndefinedGain(ValueError):
    """Relative gain is undefined when the baseline accuracy is zero."""


@dataclass
class Verdict:
    triplet_id: str
    model_id: str
    method: str
    grader: str  # "judge" | "matcher"
    label: str  # "correct" | "incorrect"
    judge_raw: str | None = None

    def __post_init__(self):
        if self.label not in ("correct", "incorrect"):
            raise ValueError(f"label must be binary, got {self.label!r}")
        if self.grader not in ("judge", "matcher"):
            raise ValueError(f"unknown grader {self.grader!r}")
        if (self.judge_raw is not None) != (self.grader == "judge"):
            raise ValueError("judge_raw must be present exactly when grader is the judge")

    @property
    def correct(self) -> bool:
        return self.label == "correct"


@dataclass
class RunReport:
    n_correct: int
    n_total: int

    def __post_init__(self):
        if not (0 <= self.n_correct <= self.n_total):
            raise ValueError(f"need 0 <= n_correct <= n_total, got {self.n_correct}/{self.n_total}")

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_total


@dataclass
class ConfusionMatrix:
    both_correct: int
    ft_only_correct: int
    pre_only_correct: int
    both_incorrect: int

    def __post_init__(self):
        cells = (self.both_correct, self.ft_only_correct, self.pre_only_correct, self.both_incorrect)
        if any(c < 0 for c in cells):
            raise ValueError("matrix cells must be non-negative")

    @property
    def n_total(self) -> int:
        return self.both_correct + self.ft_only_correct + self.pre_only_correct + self.both_incorrect

    def pre_report(self) -> RunReport:
        return RunReport(self.both_correct + self.pre_only_correct, self.n_total)

    def ft_report(self) -> RunReport:
        return RunReport(self.both_correct + self.ft_only_correct, self.n_total)


@dataclass
class StabilityMetrics:
    relative_gain: float | None  # signed percentage; None when pre-accuracy was zero
    correction_to_regression: float | None  # None marks an unbounded ratio (no regressions)


# --- deterministic matcher -------------------------------------------------------

_MARKDOWN_CHARS = re.compile(r"[*`_]")
_WS = re.compile(r"\s+")
_QUANTITY = re.compile(r"(\d[\d,]*(?:\.\d+)?)\s*([a-z%²³°µ]+(?:/[a-z]+)*)?")
_SUPERSCRIPTS = str.maketrans({"²": "2", "³": "3"})


def normalize_answer(text: str) -> str:
    text = text.lower()
    text = _MARKDOWN_CHARS.sub("", text)
    return _WS.sub(" ", text).strip()


def _canonical_number(token: str) -> str:
    token = token.replace(",", "")
    if "." in token:
        token = token.rstrip("0").rstrip(".")
    return token


def _canonical_unit(unit: str | None) -> str | None:
    if unit is None:
        return None
    return unit.translate(_SUPERSCRIPTS).strip(".") or None


def extract_quantities(normalized: str) -> list[tuple[str, str | None]]:
    return [
        (_canonical_number(number), _canonical_unit(unit))
        for number, unit in _QUANTITY.findall(normalized)
    ]


def _contains_phrase(haystack: str, needle: str) -> bool:
    if not needle:
        return False
    return re.search(rf"(?<!\w){re.escape(needle)}(?!\w)", haystack) is not None


def matcher_says_correct(generated: str, ground_truth: str) -> bool:
    gen = normalize_answer(generated)
    truth = normalize_answer(ground_truth)
    if _contains_phrase(gen, truth):
        return True
    truth_quantities = extract_quantities(truth)
    if not truth_quantities:
        return False
    gen_quantities = extract_quantities(gen)

    def compatible(got: tuple[str, str | None], want: tuple[str, str | None]) -> bool:
        if got[0] != want[0]:
            return False
        # a missing unit on either side still counts when the digits are exact
        return got[1] is None or want[1] is None or got[1] == want[1]

    return all(any(compatible(g, want) for g in gen_quantities) for want in truth_quantities)


def grade_with_matcher(
    generated: str,
    ground_truth: str,
    *,
    triplet_id: str = "",
    model_id: str = "",
    method: str = "",
) -> Verdict:
    """Deterministic verdict: the ground truth (as a phrase or as numbers with
    compatible units) must appear in the generated answer."""
    label = "correct" if matcher_says_correct(generated, ground_truth) else "incorrect"
    return Verdict(
        triplet_id=triplet_id, model_id=model_id, method=method, grader="matcher", label=label
    )


# --- judge grading -----------------------------------------------------------------

JUDGE_PROMPT = """You are grading one answer against its ground truth.

Question: {question}
Ground truth answer: {ground_truth}
Candidate answer: {generated}

Reply with exactly one word: CORRECT if the candidate gives the same answer as the ground truth, INCORRECT otherwise."""

_VERDICT_TOKEN = re.compile(r"[\s\W]*(correct|incorrect)[\s\W]*", re.IGNORECASE)


def parse_judge_reply(text: str) -> str | None:
    match = _VERDICT_TOKEN.fullmatch(text or "")
    return match.group(1).lower() if match else None


def grade_with_judge(
    question: str,
    ground_truth: str,
    generated: str,
    judge: ChatClient,
    judge_model_id: str,
    *,
    triplet_id: str = "",
    model_id: str = "",
    method: str = "",
) -> Verdict:
    """Ask the judge endpoint for a one-token verdict.

    An unparseable reply is retried once; a second unparseable reply or any
    endpoint failure falls back to the deterministic matcher (and the
    verdict records the matcher as its grader).
    """
    prompt = JUDGE_PROMPT.format(question=question, ground_truth=ground_truth, generated=generated)
    request = ChatRequest(
        model_id=judge_model_id,
        messages=[text_message("user", prompt)],
        temperature=0.0,
        max_output_tokens=8,
    )
    for _ in range(2):
        try:
            reply = judge.complete(request)
        except GatewayError:
            break
        label = parse_judge_reply(reply.text)
        if label is not None:
            return Verdict(
                triplet_id=triplet_id,
                model_id=model_id,
                method=method,
                grader="judge",
                label=label,
                judge_raw=reply.text,
            )
    return grade_with_matcher(
        generated, ground_truth, triplet_id=triplet_id, model_id=model_id, method=method
    )


# --- run-level metrics ---------------------------------------------------------------

def accuracy(verdicts: list[Verdict]) -> RunReport:
    if not verdicts:
        raise EmptyRun("cannot compute accuracy of an empty run")
    return RunReport(n_correct=sum(v.correct for v in verdicts), n_total=len(verdicts))


def confusion(base_verdicts: list[Verdict], ft_verdicts: list[Verdict]) -> ConfusionMatrix:
    base = {v.triplet_id: v for v in base_verdicts}
    ft = {v.triplet_id: v for v in ft_verdicts}
    if len(base) != len(base_verdicts) or len(ft) != len(ft_verdicts):
        raise MisalignedRuns("duplicate triplet ids within a run")
    if base.keys() != ft.keys():
        raise MisalignedRuns(
            f"triplet id sets differ ({len(base.keys() ^ ft.keys())} ids unmatched)"
        )
    cells = {"bc": 0, "fc": 0, "pc": 0, "bi": 0}
    for triplet_id, base_verdict in base.items():
        ft_verdict = ft[triplet_id]
        if base_verdict.correct and ft_verdict.correct:
            cells["bc"] += 1
        elif ft_verdict.correct:
            cells["fc"] += 1
        elif base_verdict.correct:
            cells["pc"] += 1
        else:
            cells["bi"] += 1
    return ConfusionMatrix(
        both_correct=cells["bc"],
        ft_only_correct=cells["fc"],
        pre_only_correct=cells["pc"],
        both_incorrect=cells["bi"],
    )


def relative_gain(pre_accuracy: float, ft_accuracy: float) -> float:
    if pre_accuracy == 0:
        raise UndefinedGain("relative gain undefined for zero baseline accuracy")
    return (ft_accuracy - pre_accuracy) / pre_accuracy * 100.0


def correction_to_regression(matrix: ConfusionMatrix) -> float | None:
    if matrix.pre_only_correct > 0:
        return matrix.ft_only_correct / matrix.pre_only_correct
    return None  # no regressions: explicitly unbounded rather than a number


def stability(matrix: ConfusionMatrix, pre_accuracy: float, ft_accuracy: float) -> StabilityMetrics:
    return StabilityMetrics(
        relative_gain=relative_gain(pre_accuracy, ft_accuracy),
        correction_to_regression=correction_to_regression(matrix),
    )


# --- report emission --------------------------------------------------------------------

@dataclass
class ModelEvaluation:
    model_id: str
    pre: RunReport
    ft: RunReport | None = None
    matrix: ConfusionMatrix | None = None
    metrics: StabilityMetrics | None = None


def format_ratio(value: float | None) -> str:
    if value is None:
        return "unbounded"
    text = f"{value:.2f}"
    if text.endswith("0"):
        text = text[:-1]
    return text


def _evaluation_row(ev: ModelEvaluation) -> dict:
    row: dict = {
        "model_id": ev.model_id,
        "pre": {"n_correct": ev.pre.n_correct, "n_total": ev.pre.n_total, "accuracy": ev.pre.accuracy},
    }
    if ev.ft is not None:
        row["ft"] = {"n_correct": ev.ft.n_correct, "n_total": ev.ft.n_total, "accuracy": ev.ft.accuracy}
    if ev.matrix is not None:
        row["confusion"] = {
            "both_correct": ev.matrix.both_correct,
            "ft_only_correct": ev.matrix.ft_only_correct,
            "pre_only_correct": ev.matrix.pre_only_correct,
            "both_incorrect": ev.matrix.both_incorrect,
        }
    if ev.metrics is not None:
        row["relative_gain_pct"] = ev.metrics.relative_gain
        row["correction_to_regression"] = ev.metrics.correction_to_regression
        row["correction_to_regression_display"] = format_ratio(ev.metrics.correction_to_regression)
    return row


def render_text_report(evaluations: list[ModelEvaluation]) -> str:
    if not evaluations:
        return "no runs\n"
    lines = []
    name_width = max(len("Model"), max(len(e.model_id) for e in evaluations))
    header = f"{'Model':<{name_width}}  {'Correction-to-Regression Ratio':>31}"
    lines.append(header)
    lines.append("-" * len(header))
    for ev in evaluations:
        ratio = format_ratio(ev.metrics.correction_to_regression) if ev.metrics else "n/a"
        lines.append(f"{ev.model_id:<{name_width}}  {ratio:>31}")
    lines.append("")
    detail_header = (
        f"{'Model':<{name_width}}  {'Pre Acc':>8}  {'FT Acc':>8}  {'Rel Gain %':>10}"
    )
    lines.append(detail_header)
    lines.append("-" * len(detail_header))
    for ev in evaluations:
        ft_acc = f"{ev.ft.accuracy:.2f}" if ev.ft else "n/a"
        gain = (
            f"{ev.metrics.relative_gain:.2f}"
            if ev.metrics and ev.metrics.relative_gain is not None
            else "n/a"
        )
        lines.append(
            f"{ev.model_id:<{name_width}}  {ev.pre.accuracy:>8.2f}  {ft_acc:>8}  {gain:>10}"
        )
    return "\n".join(lines) + "\n"


def emit_report(evaluations: list[ModelEvaluation], out_dir: str | Path) -> tuple[Path, Path]:
    """Write report.json and report.txt; byte-stable for identical inputs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = out_dir / "report.json"
    text_path = out_dir / "report.txt"
    payload = {"models": [_evaluation_row(ev) for ev in evaluations]}
    if not evaluations:
        payload["note"] = "no runs"
    json_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    text_path.write_text(render_text_report(evaluations), encoding="utf-8")
    return json_path, text_path


# --- verdict store and comparison export ----------------------------------------------

def save_verdicts(path: str | Path, verdicts: list[Verdict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for v in verdicts:
            fh.write(
                json.dumps(
                    {
                        "triplet_id": v.triplet_id,
                        "model_id": v.model_id,
                        "method": v.method,
                        "grader": v.grader,
                        "label": v.label,
                        "judge_raw": v.judge_raw,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_verdicts(path: str | Path) -> list[Verdict]:
    verdicts = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        verdicts.append(Verdict(**record))
    return verdicts


def write_comparison_file(rows: list[dict], path: str | Path) -> None:
    """Question / Ground Truth / Fine-tuned Generation triples as a JSON array."""
    out = [
        {
            "Question": row["question"],
            "Ground Truth": row["ground_truth"],
            "Fine-tuned Generation": row["generation"],
        }
        for row in rows
    ]
    Path(path).write_text(json.dumps(out, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
