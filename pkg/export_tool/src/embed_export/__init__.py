"""Offline exporter producing the tokenizer pipeline's embedding files.

Strictly one-directional: this tool writes the V2LE container and the
next-token table that the pipeline loads; it never imports the pipeline
and the pipeline never imports model frameworks.
"""

from .format import write_embedding_file, write_next_token_table
from .jobs import ExportJob, run_job
from .vocab import load_vocabulary

__version__ = "0.1.0"

__all__ = ["ExportJob", "run_job", "write_embedding_file",
           "write_next_token_table", "load_vocabulary"]
