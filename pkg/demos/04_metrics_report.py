"""Build a five-model base-vs-fine-tuned comparison and print the report."""

import tempfile
from pathlib import Path

from tableval.evaluation import (
    ConfusionMatrix,
    ModelEvaluation,
    emit_report,
    render_text_report,
    stability,
)

# (model, both_correct, ft_only, pre_only, both_incorrect) on a 100-item test set
COMPARISONS = [
    ("LLaMA-3.2-11B-Vision-Instruct", 36, 12, 6, 46),
    ("Qwen2-VL-2B-Instruct", 33, 13, 5, 49),
    ("Qwen2-VL-7B-Instruct", 17, 31, 10, 42),
    ("Qwen2.5-VL-3B-Instruct", 11, 30, 9, 50),
    ("Qwen2.5-VL-7B-Instruct", 14, 22, 5, 59),
]


def main():
    evaluations = []
    for model_id, both, ft_only, pre_only, neither in COMPARISONS:
        matrix = ConfusionMatrix(both, ft_only, pre_only, neither)
        pre, ft = matrix.pre_report(), matrix.ft_report()
        evaluations.append(
            ModelEvaluation(
                model_id=model_id,
                pre=pre,
                ft=ft,
                matrix=matrix,
                metrics=stability(matrix, pre.accuracy, ft.accuracy),
            )
        )
    print(render_text_report(evaluations))
    out_dir = Path(tempfile.mkdtemp(prefix="report-demo-"))
    json_path, text_path = emit_report(evaluations, out_dir)
    print("written:", json_path, "and", text_path)


if __name__ == "__main__":
    main()
