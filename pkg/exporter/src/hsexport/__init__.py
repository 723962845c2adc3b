"""Hidden-state export for news-driven relation probing.

Runs each news article through a causal language model inside a fixed
relation-extraction prompt and writes the final-layer hidden states to
RPHS files, one per article, plus a JSONL index.
"""

__version__ = "0.1.0"

from .export import ExportJob, export, render_prompt
from .rphs import CONTEXT_INPUT_ONLY, CONTEXT_INPUT_PLUS_GEN, write_rphs

__all__ = [
    "ExportJob",
    "export",
    "render_prompt",
    "write_rphs",
    "CONTEXT_INPUT_ONLY",
    "CONTEXT_INPUT_PLUS_GEN",
]
