"""Command-line entry point tying the pipeline together.

Subcommands: expand-vocab, filter-vocab, train, tokenize, detokenize,
run-task, eval. The config file is the source of truth; flags override.
Exit codes: 0 success, 1 user error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backends import BackendError, LoggingBackend
from .codebooks import (EmbeddingFileError, EmbeddingTable, PredictorError, TablePredictor,
                        expand_vocabulary, load_embeddings, save_embeddings)
from .config import ConfigError, RunConfig, build_text_embedder, stage_seed
from .imageio import ImageFileError, load_dataset, read_image, write_image
from .metrics import EvalReport, accuracy, codebook_utilization, psnr
from .model import TokenMapError, load_token_map, save_token_map
from .prompts import FewShotSpec, PromptError, run_caption, run_classification, run_vqa
from .restoration import (MASK_TASKS, TRANSLATION_TASKS, DenoiseSpec, ProtocolError, RunReport,
                          rotate_map, run_map_translation, run_mask_restoration,
                          run_masked_restoration_30pct, shift_map)
from .training import (CheckpointError, TrainingDiverged, load_checkpoint, train,
                       write_loss_csv)
from .codebooks import ChecksumError

USER_ERRORS = (ConfigError, EmbeddingFileError, ChecksumError, ImageFileError, TokenMapError,
               ProtocolError, PromptError, PredictorError, CheckpointError, BackendError,
               TrainingDiverged, FileNotFoundError, ValueError)


def _load_config(args) -> RunConfig:
    overrides: dict = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return RunConfig.load(args.config, overrides)


def cmd_expand_vocab(args) -> int:
    cfg = _load_config(args)
    vocab, _ = cfg.load_local_codebook()
    predictor_path = cfg.require_path(cfg.expand, "predictor_table", "predictor table")
    predictor = TablePredictor.from_json(predictor_path)
    m = int(cfg.expand.get("m", 1))
    expanded = expand_vocabulary(vocab, predictor, m)
    embedder = build_text_embedder(cfg)
    table = EmbeddingTable(embedder.embed(expanded.texts()), frozen=True)
    out = cfg.resolve(cfg.expand.get("output", str(cfg.output_dir() / "expanded.v2le")))
    save_embeddings(expanded, table, out)
    counts = expanded.counts_by_arity()
    print(f"expanded vocabulary: {counts[1]} unigrams + {counts[2]} bigrams + "
          f"{counts[3]} trigrams = {len(expanded)} entries -> {out}")
    return 0


def cmd_filter_vocab(args) -> int:
    cfg = _load_config(args)
    from .codebooks import ExpandedVocabulary, filter_expanded

    exp_path = cfg.require_path(cfg.filter, "expanded", "expanded vocabulary file")
    expanded, text_table = load_embeddings(exp_path)
    if not isinstance(expanded, ExpandedVocabulary):
        raise ConfigError(f"{exp_path}: expected an expanded vocabulary file")
    img_path = cfg.require_path(cfg.filter, "image_embeddings", "image embedding file")
    _, image_table = load_embeddings(img_path)
    top_k = int(cfg.filter.get("top_k", 5))
    kept_vocab, kept_table, _ = filter_expanded(expanded, text_table, image_table, top_k)
    out = cfg.resolve(cfg.filter.get("output", str(cfg.output_dir() / "global.v2le")))
    save_embeddings(kept_vocab, kept_table, out)
    counts = kept_vocab.counts_by_arity()
    print(f"filtered global codebook: {len(kept_vocab)} entries "
          f"({counts[1]}/{counts[2]}/{counts[3]} by arity) -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = load_dataset(cfg.require_path(cfg.paths, "dataset_dir", "dataset directory"))
    model = cfg.build_model()
    ckpt_path = cfg.resolve(cfg.paths.get("checkpoint", str(cfg.output_dir() / "model.v2lm")))
    result = train(model, dataset, cfg.train, checkpoint_path=ckpt_path,
                   resume_from=args.resume, max_steps=args.max_steps)
    csv_path = cfg.output_dir() / "loss.csv"
    write_loss_csv(result.rows, csv_path, append=args.resume is not None)
    last = result.rows[-1] if result.rows else {"step": 0, "total": float("nan")}
    print(f"trained to step {last['step']} (loss {last['total']:.6g}); "
          f"checkpoint -> {ckpt_path}, curve -> {csv_path}")
    return 0


def _restore_model(cfg: RunConfig):
    model = cfg.build_model()
    ckpt_path = cfg.require_path(cfg.paths, "checkpoint", "model checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    params = model.parameters()
    for name, arr in ckpt.params.items():
        if name not in params:
            raise CheckpointError(f"checkpoint parameter {name!r} unknown to this model")
        if params[name].data.shape != arr.shape:
            raise CheckpointError(f"checkpoint parameter {name!r} has shape {arr.shape}, "
                                  f"expected {params[name].data.shape}")
        params[name].data[...] = arr
    return model


def _input_images(cfg: RunConfig, inputs: list[str]) -> list[Path]:
    if inputs:
        return [cfg.resolve(p) for p in inputs]
    dataset_dir = cfg.require_path(cfg.paths, "dataset_dir", "dataset directory")
    return sorted(dataset_dir.glob("*.rimg"))


def cmd_tokenize(args) -> int:
    cfg = _load_config(args)
    model = _restore_model(cfg)
    out_dir = cfg.output_dir()
    count = 0
    for path in _input_images(cfg, args.inputs):
        image = read_image(path)
        tm = model.tokenize(image, key=path.stem)
        save_token_map(tm, out_dir / f"{path.stem}.v2lt")
        count += 1
    grid = model.config.grid
    print(f"tokenized {count} images to {grid}x{grid} grids + "
          f"{model.config.k_global} global tokens -> {out_dir}")
    return 0


def cmd_detokenize(args) -> int:
    cfg = _load_config(args)
    model = _restore_model(cfg)
    out_dir = cfg.output_dir()
    count = 0
    for raw in args.inputs:
        path = cfg.resolve(raw)
        tm = load_token_map(path)
        image = np.clip(model.detokenize(tm), 0.0, 1.0)
        write_image(image, out_dir / f"{path.stem}.rimg")
        count += 1
    print(f"decoded {count} token maps -> {out_dir}")
    return 0


def _denoise_spec(cfg: RunConfig, kind: str) -> DenoiseSpec:
    keys = {}
    for name in ("copies", "context_len", "stride", "ratio_start", "ratio_step"):
        if name in cfg.task:
            keys[name] = cfg.task[name]
    return DenoiseSpec(task=kind, **keys)


def _run_denoise_task(cfg: RunConfig, kind: str, backend, out_dir: Path) -> EvalReport:
    local_vocab, _ = cfg.load_local_codebook()
    seed = stage_seed(cfg.seed, "task")
    report = RunReport(task=kind)
    if kind == "masked30":
        tm = load_token_map(cfg.require_path(cfg.task, "token_map", "token map"))
        restored = run_masked_restoration_30pct(tm, backend, local_vocab, seed, report=report)
        truth = tm
    elif kind in MASK_TASKS:
        tm = load_token_map(cfg.require_path(cfg.task, "token_map", "token map"))
        restored = run_mask_restoration(kind, tm, backend, _denoise_spec(cfg, kind),
                                        local_vocab, seed=seed, report=report)
        truth = tm
    elif kind in TRANSLATION_TASKS:
        reference = load_token_map(cfg.require_path(cfg.task, "reference_map", "reference map"))
        if cfg.task.get("token_map"):
            polluted = load_token_map(cfg.require_path(cfg.task, "token_map", "token map"))
        elif kind == "rotate":
            polluted = rotate_map(reference, int(cfg.task.get("rotate_turns", 1)))
        elif kind == "shift":
            polluted = shift_map(reference, int(cfg.task.get("shift_y", 0)),
                                 int(cfg.task.get("shift_x", 1)))
        else:
            raise ConfigError("deblur task needs task.token_map (the polluted map)")
        restored = run_map_translation(kind, polluted, reference, backend,
                                       _denoise_spec(cfg, kind), local_vocab,
                                       seed=seed, report=report)
        truth = reference
    else:
        raise ConfigError(f"unknown denoise task {kind!r}")
    save_token_map(restored, out_dir / f"restored_{kind}.v2lt")
    report.save(out_dir / f"report_{kind}.json")
    exact = bool(np.array_equal(restored.local_ids, truth.local_ids))
    print(f"{kind}: {report.calls} calls, {report.fallbacks} fallbacks, "
          f"exact restoration: {exact}")
    return EvalReport(metadata={"task": kind, "calls": report.calls,
                                "fallbacks": report.fallbacks, "exact": exact})


def _run_episode_task(cfg: RunConfig, kind: str, backend, out_dir: Path) -> EvalReport:
    _, _ = cfg.load_local_codebook()
    global_vocab, _ = cfg.load_global_codebook()
    episodes_path = cfg.require_path(cfg.task, "episodes", "episodes file")
    doc = json.loads(episodes_path.read_text(encoding="utf-8"))
    results: list[tuple[str, str]] = []
    for episode in doc["episodes"]:
        test = load_token_map(cfg.resolve(episode["test_map"]))
        samples = [(load_token_map(cfg.resolve(s["map"])), *_sample_fields(kind, s))
                   for s in episode["samples"]]
        if kind == "classify":
            spec = FewShotSpec(
                n_ways=int(episode["n_ways"]), k_shots=int(episode["k_shots"]),
                labels=tuple(episode["labels"]),
                task_induction=bool(episode.get("task_induction", True)),
                repetitions=int(episode.get("repetitions", 0)),
            )
            generated = run_classification(spec, samples, test, global_vocab, backend)
            results.append((generated, episode["label"]))
        elif kind == "caption":
            generated = run_caption(samples, test, global_vocab, backend)
            results.append((generated, episode.get("caption", "")))
        else:
            generated = run_vqa(samples, test, episode["question"], global_vocab, backend)
            results.append((generated, episode.get("answer", "")))
    report = EvalReport(metadata={"task": kind, "episodes": len(results),
                                  "outputs": [g for g, _ in results]})
    if kind in ("classify", "vqa") and results:
        report.task_accuracy[kind] = accuracy(results)
        print(f"{kind}: accuracy {report.task_accuracy[kind]:.4f} over {len(results)} episodes")
    else:
        print(f"{kind}: generated {len(results)} outputs")
    return report


def _sample_fields(kind: str, sample: dict) -> tuple:
    if kind == "classify":
        return (sample["label"],)
    if kind == "caption":
        return (sample["caption"],)
    return (sample["question"], sample["answer"])


def cmd_run_task(args) -> int:
    cfg = _load_config(args)
    kind = args.task or cfg.task.get("kind")
    if not kind:
        raise ConfigError("no task given (flag --task or config task.kind)")
    out_dir = cfg.output_dir()
    backend = LoggingBackend(cfg.build_backend(), out_dir / "wire_log.jsonl")
    if kind in MASK_TASKS + TRANSLATION_TASKS + ("masked30",):
        report = _run_denoise_task(cfg, kind, backend, out_dir)
    elif kind in ("classify", "caption", "vqa"):
        report = _run_episode_task(cfg, kind, backend, out_dir)
    else:
        raise ConfigError(f"unknown task {kind!r}")
    report.save(out_dir / f"eval_{kind}.json")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    report = EvalReport(metadata={"config_seed": cfg.seed})
    out_dir = cfg.output_dir()
    if args.originals and args.reconstructions:
        orig_dir = cfg.resolve(args.originals)
        recon_dir = cfg.resolve(args.reconstructions)
        for orig_path in sorted(Path(orig_dir).glob("*.rimg")):
            recon_path = Path(recon_dir) / orig_path.name
            if not recon_path.exists():
                continue
            report.psnr_values.append(psnr(read_image(orig_path), read_image(recon_path)))
    if args.maps:
        local_vocab, _ = cfg.load_local_codebook()
        maps = [load_token_map(p) for p in sorted(cfg.resolve(args.maps).glob("*.v2lt"))]
        if maps:
            hist, frac = codebook_utilization(maps, len(local_vocab))
            report.utilization = frac
            report.histogram = hist.tolist()
            with open(out_dir / "utilization.csv", "w", encoding="utf-8") as fh:
                fh.write("token_id,count\n")
                fh.writelines(f"{i},{int(c)}\n" for i, c in enumerate(hist))
    report.save(out_dir / "eval.json")
    print(report.summary_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vislang",
        description="Frozen-vocabulary image tokenization pipeline: codebook "
                    "construction, training, tokenization, prompt-driven tasks, metrics.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("expand-vocab", help="grow the base vocabulary with predicted n-grams")
    common(p)
    p.set_defaults(func=cmd_expand_vocab)

    p = sub.add_parser("filter-vocab", help="keep entries in some image's similarity top-k")
    common(p)
    p.set_defaults(func=cmd_filter_vocab)

    p = sub.add_parser("train", help="train encoder, decoder, and projector")
    common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tokenize", help="turn images into token map files")
    common(p)
    p.add_argument("inputs", nargs="*", help="image files (defaults to the dataset directory)")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("detokenize", help="decode token map files back to images")
    common(p)
    p.add_argument("inputs", nargs="+", help="token map files")
    p.set_defaults(func=cmd_detokenize)

    p = sub.add_parser("run-task", help="drive the LLM backend through one task")
    common(p)
    p.add_argument("--task", default=None,
                   help="inpaint|outpaint|deblur|rotate|shift|masked30|classify|caption|vqa")
    p.set_defaults(func=cmd_run_task)

    p = sub.add_parser("eval", help="compute metrics over produced artifacts")
    common(p)
    p.add_argument("--originals", default=None, help="directory of original images")
    p.add_argument("--reconstructions", default=None, help="directory of reconstructions")
    p.add_argument("--maps", default=None, help="directory of token map files")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
