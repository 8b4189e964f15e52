import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from vislang.codebooks import ExpandedEntry, ExpandedVocabulary
from vislang.globalfeat import ToyGlobalFeatures
from vislang.model import ModelConfig, TokenizerModel
from vislang.synthetic import synthetic_table, synthetic_vocabulary


def expanded_stub(n: int, stem: str = "g") -> ExpandedVocabulary:
    return ExpandedVocabulary(tuple(ExpandedEntry(f"{stem}{i}", 1, (i,)) for i in range(n)))


def build_tiny_model(
    seed: int = 0,
    image_size: int = 16,
    width_divisor: int = 32,
    d_local: int = 6,
    global_dim: int = 8,
    k_global: int = 3,
    local_rows: int = 24,
    local_dim: int = 10,
    global_rows: int = 12,
) -> TokenizerModel:
    rng = np.random.default_rng(seed + 1000)
    cfg = ModelConfig(image_size=image_size, width_divisor=width_divisor,
                      d_local=d_local, global_dim=global_dim, k_global=k_global)
    return TokenizerModel(
        cfg,
        synthetic_vocabulary(local_rows),
        synthetic_table(rng, local_rows, local_dim),
        expanded_stub(global_rows),
        synthetic_table(rng, global_rows, global_dim),
        ToyGlobalFeatures(dim=global_dim),
        seed=seed,
    )


@pytest.fixture
def tiny_model():
    return build_tiny_model()


ACCEPTANCE_RESULTS: list[tuple[str, bool]] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, ok in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
