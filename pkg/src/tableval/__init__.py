"""tableval: curate table-QA datasets from PDFs and benchmark VLM endpoints.

The package is organized around the pipeline stages:

- ``tables``: spanning-cell grid model, LaTeX tabular parser, lookup oracle
- ``minipdf`` / ``ingest``: PDF page detection and high-resolution rendering
- ``curation``: triplet generation, storage, splitting, chat export
- ``gateway``: chat-completions client (retries, rate limit, audit log)
- ``runners``: direct and indirect answering runs
- ``evaluation``: judge/matcher grading, accuracy, confusion, stability
- ``lora``: low-rank adapter merge math and the adapter file format
- ``cli``: the ``tableval`` command
"""

from .curation import DatasetSplit, QATriplet, TripletStore, split_dataset
from .evaluation import (
    ConfusionMatrix,
    RunReport,
    StabilityMetrics,
    Verdict,
    accuracy,
    confusion,
    grade_with_judge,
    grade_with_matcher,
    stability,
)
from .gateway import ChatClient, ChatRequest, ChatResponse, EndpointConfig
from .ingest import PageImage, ingest_pdf, render_page, scan_for_table_pages
from .lora import LoraUpdate, TargetModuleSet, delta_rank_bound, merge, read_adapter, write_adapter
from .runners import GenerationRecord, RunStore, run_direct, run_indirect, run_split
from .tables import Cell, LatexTable, TableGrid, lookup_cell, parse_latex_table, serialize_latex

__version__ = "0.1.0"
