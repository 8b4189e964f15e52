#!/usr/bin/env python3
"""End-to-end demo on a synthetic workspace: build both codebooks, train the
tokenizer, tokenize the dataset, run an oracle-backed inpainting task, and
print metrics. Run scripts/gen_fixtures.py first (or point --workspace at an
existing one).
"""

import argparse
import json
from pathlib import Path

import numpy as np

from vislang.cli import main as cli
from vislang.codebooks import load_embeddings
from vislang.imageio import read_image
from vislang.metrics import codebook_utilization, psnr
from vislang.model import load_token_map
from vislang.restoration import DenoiseSpec, mask_positions, restoration_answers


def run(argv) -> None:
    code = cli(argv)
    if code != 0:
        raise SystemExit(f"command {' '.join(argv)} failed with exit code {code}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workspace", default="demo_workspace")
    args = parser.parse_args()
    ws = Path(args.workspace)
    cfg = ["--config", str(ws / "config.json")]

    print("== codebook construction ==")
    run(["expand-vocab", *cfg])
    run(["filter-vocab", *cfg])

    print("== training ==")
    run(["train", *cfg])

    print("== tokenization ==")
    run(["tokenize", *cfg])
    maps = sorted((ws / "out").glob("img*.v2lt"))
    print(f"token maps written: {len(maps)}")

    print("== reconstruction ==")
    run(["detokenize", *cfg, str(maps[0])])
    original = read_image(ws / "data" / f"{maps[0].stem}.rimg")
    recon = read_image(ws / "out" / f"{maps[0].stem}.rimg")
    print(f"PSNR({maps[0].stem}) = {psnr(original, recon):.2f} dB")

    local_vocab, _ = load_embeddings(ws / "local.v2le")
    hist, frac = codebook_utilization([load_token_map(p) for p in maps], len(local_vocab))
    print(f"local codebook utilization: {frac:.4f} ({int((hist > 0).sum())} codes)")

    print("== oracle inpainting ==")
    truth = load_token_map(maps[0])
    spec = DenoiseSpec("inpaint")
    answers = restoration_answers(truth, mask_positions("inpaint", truth.grid_shape),
                                  spec.stride, local_vocab)
    (ws / "answers.json").write_text(json.dumps(answers), encoding="utf-8")
    doc = json.loads((ws / "config.json").read_text())
    doc["backend"] = {"kind": "oracle", "answers": "answers.json"}
    doc["task"] = {"kind": "inpaint", "token_map": f"out/{maps[0].stem}.v2lt"}
    (ws / "config.json").write_text(json.dumps(doc, indent=2))
    run(["run-task", *cfg])

    restored = load_token_map(ws / "out" / "restored_inpaint.v2lt")
    print(f"inpainting exact: {bool(np.array_equal(restored.local_ids, truth.local_ids))}")
    print("demo complete.")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
