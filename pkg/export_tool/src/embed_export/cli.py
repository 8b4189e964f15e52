"""Command-line entry point: run export jobs described by JSON job files."""

from __future__ import annotations

import argparse
import sys

from .format import ExportFormatError
from .jobs import ExportJob, JobError, run_job
from .providers import MissingAssets, ProviderError
from .vocab import VocabSourceError


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-export",
        description="Export model vocabularies, text/image embeddings, and "
                    "next-token tables for the tokenizer pipeline.")
    parser.add_argument("jobs", nargs="+", help="JSON job files to run")
    args = parser.parse_args(argv)
    try:
        for job_path in args.jobs:
            job = ExportJob.load(job_path)
            count = run_job(job)
            print(f"{job.kind}: {count} entries -> {job.output}")
    except (JobError, VocabSourceError, ExportFormatError, MissingAssets, ProviderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
