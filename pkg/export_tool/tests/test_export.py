import json
import struct
from pathlib import Path

import numpy as np
import pytest

from embed_export.cli import main
from embed_export.format import ExportFormatError, write_embedding_file
from embed_export.jobs import ExportJob, JobError, run_job
from embed_export.providers import StubImageProvider, StubNextTokenSource, StubTextProvider
from embed_export.vocab import VocabSourceError, load_vocabulary

# the pipeline package is the consumer; its loader is the round-trip oracle
from vislang.codebooks import ChecksumError, TablePredictor, Vocabulary, load_embeddings
from vislang.codebooks import expand_vocabulary


def write_rimg(path: Path, arr: np.ndarray) -> None:
    quant = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    payload = np.moveaxis(quant, 0, 2).tobytes()
    path.write_bytes(b"RIMG" + struct.pack("<III", arr.shape[1], arr.shape[2], 3) + payload)


def make_vocab_file(path: Path, n: int) -> list[str]:
    tokens = [f"w{i}" for i in range(n)]
    path.write_text("\n".join(tokens) + "\n", encoding="utf-8")
    return tokens


def vocab_job(tmp_path: Path, n: int, dim: int = 12) -> Path:
    make_vocab_file(tmp_path / "vocab.txt", n)
    job = {"kind": "vocab-embeddings", "output": "vocab.v2le", "vocab_source": "vocab.txt",
           "provider": {"kind": "stub", "dim": dim, "seed": 3}}
    job_path = tmp_path / "job.json"
    job_path.write_text(json.dumps(job), encoding="utf-8")
    return job_path


# -- vocabulary sources ---------------------------------------------------------


def test_vocab_from_txt(tmp_path):
    tokens = make_vocab_file(tmp_path / "v.txt", 5)
    assert load_vocabulary(tmp_path / "v.txt") == tokens


def test_vocab_from_vocab_json(tmp_path):
    mapping = {"b": 1, "a": 0, "c": 2}
    (tmp_path / "vocab.json").write_text(json.dumps(mapping))
    assert load_vocabulary(tmp_path / "vocab.json") == ["a", "b", "c"]


def test_vocab_from_tokenizer_json(tmp_path):
    doc = {"model": {"type": "WordLevel", "vocab": {"x": 0, "y": 1}}}
    (tmp_path / "tokenizer.json").write_text(json.dumps(doc))
    assert load_vocabulary(tmp_path / "tokenizer.json") == ["x", "y"]


def test_vocab_gap_rejected(tmp_path):
    (tmp_path / "vocab.json").write_text(json.dumps({"a": 0, "b": 2}))
    with pytest.raises(VocabSourceError):
        load_vocabulary(tmp_path / "vocab.json")


def test_vocab_missing_file(tmp_path):
    with pytest.raises(VocabSourceError, match="does not exist"):
        load_vocabulary(tmp_path / "nope.txt")


# -- vocab embedding export -----------------------------------------------------


def test_base_vocabulary_export_has_32000_entries(tmp_path):
    job = ExportJob.load(vocab_job(tmp_path, 32_000))
    count = run_job(job)
    assert count == 32_000
    vocab, table = load_embeddings(tmp_path / "vocab.v2le")
    assert isinstance(vocab, Vocabulary)
    assert len(vocab) == 32_000
    assert table.rows == 32_000
    assert table.dim == 12


def test_export_roundtrips_through_pipeline_loader(tmp_path):
    job = ExportJob.load(vocab_job(tmp_path, 40, dim=7))
    run_job(job)
    vocab, table = load_embeddings(tmp_path / "vocab.v2le")
    expected = StubTextProvider(dim=7, seed=3).embed_texts(list(vocab.entries))
    assert np.array_equal(table.matrix, expected)
    sidecar = json.loads((tmp_path / "vocab.v2le.provenance.json").read_text())
    assert sidecar["provider"].startswith("stub-text")
    assert sidecar["entries"] == 40


def test_reexport_is_byte_identical(tmp_path):
    job_path = vocab_job(tmp_path, 25)
    run_job(ExportJob.load(job_path))
    first = (tmp_path / "vocab.v2le").read_bytes()
    run_job(ExportJob.load(job_path))
    assert (tmp_path / "vocab.v2le").read_bytes() == first


def test_writer_bytes_match_pipeline_writer(tmp_path):
    # same entries and rows must serialize to the identical container bytes
    from vislang.codebooks import EmbeddingTable, save_embeddings

    rng = np.random.default_rng(4)
    tokens = [f"t{i}" for i in range(9)]
    matrix = rng.standard_normal((9, 5)).astype(np.float32)
    write_embedding_file(tmp_path / "tool.v2le", tokens, matrix)
    save_embeddings(Vocabulary(tuple(tokens)), EmbeddingTable(matrix.copy()),
                    tmp_path / "pipeline.v2le")
    assert (tmp_path / "tool.v2le").read_bytes() == (tmp_path / "pipeline.v2le").read_bytes()


def test_corrupted_export_fails_pipeline_checksum(tmp_path):
    run_job(ExportJob.load(vocab_job(tmp_path, 10)))
    path = tmp_path / "vocab.v2le"
    blob = bytearray(path.read_bytes())
    blob[-10] ^= 0x55
    path.write_bytes(bytes(blob))
    with pytest.raises(ChecksumError):
        load_embeddings(path)


def test_zero_dim_rejected(tmp_path):
    with pytest.raises(ExportFormatError, match="zero"):
        write_embedding_file(tmp_path / "x.v2le", ["a"], np.zeros((1, 0), dtype=np.float32))


# -- image feature export ----------------------------------------------------------


def test_image_features_row_per_image(tmp_path):
    rng = np.random.default_rng(0)
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    images = {}
    for i in range(5):
        arr = rng.uniform(0, 1, (3, 8, 8))
        write_rimg(img_dir / f"im{i}.rimg", arr)
        images[f"im{i}"] = arr
    job = {"kind": "image-features", "output": "img.v2le", "image_dir": "imgs",
           "provider": {"kind": "stub", "dim": 9, "seed": 1}}
    (tmp_path / "job.json").write_text(json.dumps(job))
    assert run_job(ExportJob.load(tmp_path / "job.json")) == 5
    vocab, table = load_embeddings(tmp_path / "img.v2le")
    assert vocab.entries == tuple(sorted(images))
    assert table.rows == 5 and table.dim == 9


def test_duplicate_images_embed_identically(tmp_path):
    rng = np.random.default_rng(1)
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    arr = rng.uniform(0, 1, (3, 8, 8))
    write_rimg(img_dir / "a.rimg", arr)
    write_rimg(img_dir / "b.rimg", arr)
    job = {"kind": "image-features", "output": "img.v2le", "image_dir": "imgs",
           "provider": {"kind": "stub", "dim": 6}}
    (tmp_path / "job.json").write_text(json.dumps(job))
    run_job(ExportJob.load(tmp_path / "job.json"))
    _, table = load_embeddings(tmp_path / "img.v2le")
    a, b = table.as_f64()
    cos = float(a @ b) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert cos == pytest.approx(1.0, abs=1e-12)
    assert np.array_equal(a, b)


def test_image_job_empty_dir_rejected(tmp_path):
    (tmp_path / "imgs").mkdir()
    job = {"kind": "image-features", "output": "img.v2le", "image_dir": "imgs"}
    (tmp_path / "job.json").write_text(json.dumps(job))
    with pytest.raises(JobError, match="no images"):
        run_job(ExportJob.load(tmp_path / "job.json"))


# -- next-token table -----------------------------------------------------------------


def test_next_token_table_m_entries_per_context(tmp_path):
    tokens = make_vocab_file(tmp_path / "vocab.txt", 12)
    job = {"kind": "next-token-table", "output": "table.json", "vocab_source": "vocab.txt",
           "top_m": 2, "provider": {"kind": "stub", "seed": 4}}
    (tmp_path / "job.json").write_text(json.dumps(job))
    run_job(ExportJob.load(tmp_path / "job.json"))
    doc = json.loads((tmp_path / "table.json").read_text())
    assert doc["m"] == 2
    for token in tokens:
        preds = doc["table"][f"a photo of {token}"]
        assert len(preds) == 2
        assert all(p in tokens for p in preds)


def test_next_token_table_deterministic(tmp_path):
    make_vocab_file(tmp_path / "vocab.txt", 8)
    job = {"kind": "next-token-table", "output": "table.json", "vocab_source": "vocab.txt",
           "top_m": 1}
    (tmp_path / "job.json").write_text(json.dumps(job))
    run_job(ExportJob.load(tmp_path / "job.json"))
    first = (tmp_path / "table.json").read_text()
    run_job(ExportJob.load(tmp_path / "job.json"))
    assert (tmp_path / "table.json").read_text() == first


def test_next_token_table_spot_check_against_source(tmp_path):
    tokens = make_vocab_file(tmp_path / "vocab.txt", 20)
    job = {"kind": "next-token-table", "output": "table.json", "vocab_source": "vocab.txt",
           "top_m": 1, "provider": {"kind": "stub", "seed": 9}}
    (tmp_path / "job.json").write_text(json.dumps(job))
    run_job(ExportJob.load(tmp_path / "job.json"))
    doc = json.loads((tmp_path / "table.json").read_text())
    source = StubNextTokenSource(tokens, seed=9)
    for token in tokens[:10]:
        context = f"a photo of {token}"
        assert doc["table"][context] == source.top_m(context, 1)


def test_next_token_table_drives_pipeline_expansion(tmp_path):
    tokens = make_vocab_file(tmp_path / "vocab.txt", 15)
    job = {"kind": "next-token-table", "output": "table.json", "vocab_source": "vocab.txt",
           "top_m": 2, "provider": {"kind": "stub", "seed": 2}}
    (tmp_path / "job.json").write_text(json.dumps(job))
    run_job(ExportJob.load(tmp_path / "job.json"))
    predictor = TablePredictor.from_json(tmp_path / "table.json")
    expanded = expand_vocabulary(Vocabulary(tuple(tokens)), predictor, m=2)
    assert len(expanded) == 15 * (1 + 2 + 4)


# -- job handling / cli -----------------------------------------------------------------


def test_unknown_job_keys_rejected(tmp_path):
    (tmp_path / "job.json").write_text(json.dumps({"kind": "vocab-embeddings",
                                                   "output": "x", "surprise": 1}))
    with pytest.raises(JobError, match="surprise"):
        ExportJob.load(tmp_path / "job.json")


def test_unknown_job_kind_rejected(tmp_path):
    (tmp_path / "job.json").write_text(json.dumps({"kind": "everything", "output": "x"}))
    with pytest.raises(JobError, match="kind"):
        ExportJob.load(tmp_path / "job.json")


def test_cli_runs_job_and_reports(tmp_path, capsys):
    job_path = vocab_job(tmp_path, 6)
    assert main([str(job_path)]) == 0
    out = capsys.readouterr().out
    assert "vocab-embeddings: 6 entries" in out


def test_cli_user_error_exit_code(tmp_path, capsys):
    (tmp_path / "job.json").write_text(json.dumps({"kind": "vocab-embeddings",
                                                   "output": "x.v2le"}))
    assert main([str(tmp_path / "job.json")]) == 1
    assert "error:" in capsys.readouterr().err


# -- real encoder path (tiny local model, still offline) ---------------------------------


@pytest.mark.filterwarnings("ignore")
def test_clip_text_provider_with_local_tiny_model(tmp_path):
    torch = pytest.importorskip("torch")
    transformers = pytest.importorskip("transformers")
    from tokenizers import Tokenizer, models, pre_tokenizers

    model_dir = tmp_path / "tiny_clip"
    model_dir.mkdir()
    vocab = {"[UNK]": 0, "w0": 1, "w1": 2, "w2": 3}
    tok = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    fast = transformers.PreTrainedTokenizerFast(tokenizer_object=tok, unk_token="[UNK]",
                                                pad_token="[UNK]")
    fast.save_pretrained(model_dir)
    cfg = transformers.CLIPTextConfig(vocab_size=8, hidden_size=8, intermediate_size=16,
                                      num_hidden_layers=1, num_attention_heads=2,
                                      max_position_embeddings=16, projection_dim=5,
                                      bos_token_id=0, eos_token_id=0)
    torch.manual_seed(0)
    transformers.CLIPTextModelWithProjection(cfg).save_pretrained(model_dir)

    make_vocab_file(tmp_path / "vocab.txt", 3)
    job = {"kind": "vocab-embeddings", "output": "real.v2le", "vocab_source": "vocab.txt",
           "provider": {"kind": "clip", "model_dir": str(model_dir)}}
    (tmp_path / "job.json").write_text(json.dumps(job))
    assert run_job(ExportJob.load(tmp_path / "job.json")) == 3
    vocab_out, table = load_embeddings(tmp_path / "real.v2le")
    assert len(vocab_out) == 3
    assert table.dim == 5


def test_clip_provider_missing_assets_clean_error(tmp_path):
    from embed_export.providers import ClipTextProvider, MissingAssets

    with pytest.raises(MissingAssets, match="does not exist"):
        ClipTextProvider(tmp_path / "no_model_here")
