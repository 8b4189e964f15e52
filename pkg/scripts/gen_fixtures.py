#!/usr/bin/env python3
"""Generate a self-contained synthetic workspace for the desk-scale pipeline.

Creates a dataset of smooth random images, a local codebook, a stub global
codebook, a deterministic next-token predictor table, per-image embeddings
for the vocabulary filter, and a ready-to-run config.json.
"""

import argparse
import json
from pathlib import Path

from vislang.codebooks import save_embeddings
from vislang.config import stage_rng
from vislang.imageio import write_image
from vislang.synthetic import (cyclic_predictor, synthetic_images, synthetic_table,
                               synthetic_vocabulary)


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_workspace", help="workspace directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--images", type=int, default=48)
    parser.add_argument("--image-size", type=int, default=32)
    parser.add_argument("--vocab-size", type=int, default=512)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = stage_rng(args.seed, "fixtures")

    vocab = synthetic_vocabulary(args.vocab_size)
    save_embeddings(vocab, synthetic_table(rng, args.vocab_size, 24), out / "local.v2le")

    data_dir = out / "data"
    data_dir.mkdir(exist_ok=True)
    for i, img in enumerate(synthetic_images(rng, args.images, args.image_size)):
        write_image(img, data_dir / f"img{i:04d}.rimg")

    predictor = cyclic_predictor(vocab, 2)
    (out / "predictor.json").write_text(
        json.dumps({"prefix": predictor.prefix, "table": predictor.table}), encoding="utf-8")

    # per-image embeddings in the filter's similarity space
    keys = synthetic_vocabulary(args.images, stem="img")
    save_embeddings(keys, synthetic_table(rng, args.images, 16), out / "imgemb.v2le")

    config = {
        "seed": args.seed,
        "model": {"image_size": args.image_size, "width_divisor": 16, "d_local": 12,
                  "global_dim": 16, "k_global": 5},
        "train": {"epochs": 12, "batch_size": 8, "warmup_epochs": 2, "checkpoint_every": 0},
        "paths": {"local_codebook": "local.v2le", "global_codebook": "out/filtered.v2le",
                  "dataset_dir": "data", "output_dir": "out",
                  "checkpoint": "out/model.v2lm"},
        "expand": {"m": 1, "predictor_table": "predictor.json",
                   "output": "out/expanded.v2le",
                   "embedder": {"kind": "hashed", "dim": 16}},
        "filter": {"expanded": "out/expanded.v2le", "image_embeddings": "imgemb.v2le",
                   "top_k": 5, "output": "out/filtered.v2le"},
        "backend": {"kind": "echo", "text": f"{vocab.text(0)} {vocab.text(0)}"},
        "task": {},
    }
    (out / "config.json").write_text(json.dumps(config, indent=2), encoding="utf-8")
    print(f"workspace ready: {out} ({args.images} images, vocab {args.vocab_size})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
