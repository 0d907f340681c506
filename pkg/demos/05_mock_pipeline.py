"""Full pipeline against an in-process scripted endpoint.

Everything runs locally: a generated PDF is ingested, a scripted "model"
generates QA pairs, answers them via both input methods, judges itself,
and the final report lands in a temp directory.  Needs the dev extra
(reportlab).
"""

import json
import re
import tempfile
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from reportlab.lib.pagesizes import letter
from reportlab.pdfgen import canvas

from tableval.cli import dispatch

TABLE_LATEX = "\\begin{tabular}{ll}\nSpan & 3.64 m \\\\\nRating & 45 min \\\\\n\\end{tabular}"


def scripted_reply(body: dict) -> str:
    model = body.get("model", "")
    text = json.dumps(body.get("messages", []))
    if model == "gen":
        return json.dumps(
            [
                {"Question": "What is the maximum span?", "Answer": "3.64 m"},
                {"Question": "What is the fire rating?", "Answer": "45 min"},
            ]
        )
    if model == "conv":
        return TABLE_LATEX
    if model == "answerer":
        return "3.64 m" if "span" in text.lower() else "45 min"
    if model == "judge":
        truth = re.search(r"Ground truth answer: ([^\\\"]+)", text)
        candidate = re.search(r"Candidate answer: ([^\\\"]+)", text)
        ok = truth and candidate and truth.group(1).strip() in candidate.group(1)
        return "CORRECT" if ok else "INCORRECT"
    return "?"


class Handler(BaseHTTPRequestHandler):
    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        payload = json.dumps(
            {
                "choices": [
                    {"message": {"content": scripted_reply(body)}, "finish_reason": "stop"}
                ],
                "usage": {},
            }
        ).encode()
        self.send_response(200)
        self.send_header("Content-Length", str(len(payload)))
        self.end_headers()
        self.wfile.write(payload)

    def log_message(self, *args):
        pass


def build_pdf(path: Path) -> Path:
    c = canvas.Canvas(str(path), pagesize=letter)
    c.grid([72, 220, 380], [520, 560, 600, 640])
    c.setFont("Helvetica", 10)
    c.drawString(76, 606, "Span")
    c.drawString(224, 606, "3.64 m")
    c.showPage()
    c.save()
    return path


def main():
    server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    base_url = f"http://127.0.0.1:{server.server_address[1]}/v1"

    workdir = Path(tempfile.mkdtemp(prefix="pipeline-demo-"))
    pdf = build_pdf(workdir / "doc.pdf")
    endpoint = {"base_url": base_url, "timeout_s": 10}
    config = workdir / "pipeline.yaml"
    config.write_text(
        json.dumps(
            {
                "paths": {
                    "corpus_dir": "corpus",
                    "dataset_store": "dataset/triplets.jsonl",
                    "runs_dir": "runs",
                    "reports_dir": "reports",
                },
                "split": {"train_size": 0, "seed": 1},
                "endpoints": {
                    "generator": {**endpoint, "model_id": "gen"},
                    "converter": {**endpoint, "model_id": "conv"},
                    "judge": {**endpoint, "model_id": "judge"},
                    "answerers": {"answerer": {**endpoint, "model_id": "answerer"}},
                },
            }
        )
    )

    stages = [
        ["ingest", "--config", str(config), "--pdf", str(pdf)],
        ["curate", "--config", str(config)],
        ["split", "--config", str(config)],
        ["run", "--config", str(config), "--method", "direct"],
        ["run", "--config", str(config), "--method", "indirect"],
        ["judge", "--config", str(config), "--run-id", "direct-test"],
        ["report", "--config", str(config), "--run-id", "direct-test"],
    ]
    for argv in stages:
        code = dispatch(argv)
        assert code == 0, f"{argv[0]} exited {code}"
    server.shutdown()

    print("\nreport:")
    print((workdir / "reports/direct-test/report.txt").read_text())
    print("pipeline artifacts in", workdir)


if __name__ == "__main__":
    main()
