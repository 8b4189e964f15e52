import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vislang import autodiff as ad
from vislang.autodiff import Tensor, backward, straight_through
from vislang.codebooks import EmbeddingTable
from vislang.quantize import (Projector, gather_quantized, project, quantize_global,
                              quantize_global_exhaustive, quantize_local,
                              quantize_local_exhaustive)
from vislang.synthetic import synthetic_table

from oracles import nearest_rows_scalar, top_k_rows_scalar


# -- projector ---------------------------------------------------------------


def make_projector(in_dim, out_dim, seed=0):
    return Projector(in_dim, out_dim, np.random.default_rng(seed))


def test_project_identity():
    p = make_projector(4, 4)
    p.weight.data[...] = np.eye(4)
    p.bias.data[...] = 0.0
    table = synthetic_table(np.random.default_rng(1), 6, 4)
    out = project(p, table)
    assert np.array_equal(out.matrix, table.as_f64())


def test_project_zero_weight_gives_bias_rows():
    p = make_projector(4, 3)
    p.weight.data[...] = 0.0
    p.bias.data[...] = np.array([1.0, -2.0, 0.5])
    out = project(p, synthetic_table(np.random.default_rng(2), 5, 4))
    assert np.allclose(out.matrix, np.tile([1.0, -2.0, 0.5], (5, 1)))


def test_project_matches_per_row_oracle():
    rng = np.random.default_rng(3)
    p = make_projector(5, 3, seed=4)
    table = synthetic_table(rng, 7, 5)
    out = project(p, table)
    for i in range(7):
        row = p.weight.data @ table.as_f64()[i] + p.bias.data
        assert np.allclose(out.matrix[i], row, rtol=1e-12, atol=0)


def test_project_dim_mismatch():
    with pytest.raises(ValueError, match="dim"):
        project(make_projector(5, 3), synthetic_table(np.random.default_rng(0), 4, 6))


# -- local quantization --------------------------------------------------------


def test_quantize_local_three_row_example():
    codebook = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    result = quantize_local(np.array([[0.9, 0.2]]), codebook)
    assert result.token_ids.tolist() == [1]
    assert np.allclose(result.distances, [0.01 + 0.04])


def test_quantize_local_exact_match_distance_zero():
    rng = np.random.default_rng(0)
    codebook = rng.standard_normal((10, 4))
    result = quantize_local(codebook[[7]], codebook)
    assert result.token_ids.tolist() == [7]
    assert result.distances[0] == 0.0
    assert np.array_equal(result.quantized_vectors[0], codebook[7])


def test_quantize_local_tie_breaks_low_index():
    codebook = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])  # rows 0 and 2 identical
    result = quantize_local(np.array([[1.0, 0.1]]), codebook)
    assert result.token_ids.tolist() == [0]


@pytest.mark.parametrize("seed", range(3))
def test_quantize_local_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    codebook = rng.standard_normal((4096, 8))
    queries = rng.standard_normal((1000, 8))
    fast = quantize_local(queries, codebook)
    slow = quantize_local_exhaustive(queries, codebook)
    ids, _ = nearest_rows_scalar(queries, codebook)
    assert np.array_equal(fast.token_ids, slow.token_ids)
    assert np.array_equal(fast.token_ids, ids)
    assert np.allclose(fast.distances, slow.distances, rtol=1e-9, atol=1e-9)


def test_quantize_local_grid_shape_preserved():
    rng = np.random.default_rng(1)
    features = rng.standard_normal((4, 5, 3))
    codebook = rng.standard_normal((20, 3))
    result = quantize_local(features, codebook)
    assert result.token_ids.shape == (4, 5)
    assert result.quantized_vectors.shape == (4, 5, 3)
    assert np.array_equal(result.quantized_vectors, codebook[result.token_ids])


def test_quantize_local_rejects_bad_inputs():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError, match="empty"):
        quantize_local(rng.standard_normal((2, 3)), np.empty((0, 3)))
    with pytest.raises(ValueError, match="non-finite"):
        quantize_local(np.array([[np.nan, 1.0]]), rng.standard_normal((4, 2)))
    with pytest.raises(ValueError, match="dim"):
        quantize_local(rng.standard_normal((2, 3)), rng.standard_normal((4, 2)))


def test_translation_invariance_of_assignments():
    rng = np.random.default_rng(5)
    codebook = rng.standard_normal((256, 6))
    queries = rng.standard_normal((300, 6))
    shift = rng.standard_normal(6) * 3.0
    base = quantize_local(queries, codebook).token_ids
    shifted = quantize_local(queries + shift, codebook + shift).token_ids
    assert np.array_equal(base, shifted)


def test_quantize_determinism_across_runs():
    rng = np.random.default_rng(6)
    codebook = rng.standard_normal((512, 4))
    queries = rng.standard_normal((64, 4))
    a = quantize_local(queries, codebook)
    b = quantize_local(queries.copy(), codebook.copy())
    assert np.array_equal(a.token_ids, b.token_ids)
    assert np.array_equal(a.distances, b.distances)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), rows=st.integers(1, 40), dim=st.integers(1, 6))
def test_quantize_local_property_vs_oracle(seed, rows, dim):
    rng = np.random.default_rng(seed)
    codebook = rng.integers(-3, 4, size=(rows, dim)).astype(np.float64)
    queries = rng.integers(-3, 4, size=(8, dim)).astype(np.float64)
    fast = quantize_local(queries, codebook)
    ids, dists = nearest_rows_scalar(queries, codebook)
    # integer-valued data keeps the expansion exact, so ties must agree too
    assert np.array_equal(fast.token_ids, ids)
    assert np.array_equal(fast.distances, dists)


# -- global quantization ---------------------------------------------------------


def test_quantize_global_full_codebook():
    rng = np.random.default_rng(7)
    codebook = rng.standard_normal((12, 5))
    f = rng.standard_normal(5)
    result = quantize_global(f, codebook, k_global=12)
    assert sorted(result.token_ids.tolist()) == list(range(12))
    assert np.all(np.diff(result.distances) >= 0)


def test_quantize_global_exact_row():
    rng = np.random.default_rng(8)
    codebook = rng.standard_normal((30, 4))
    result = quantize_global(codebook[13], codebook, k_global=1)
    assert result.token_ids.tolist() == [13]


def test_quantize_global_matches_full_sort():
    rng = np.random.default_rng(9)
    codebook = rng.standard_normal((500, 6))
    for _ in range(20):
        f = rng.standard_normal(6)
        fast = quantize_global(f, codebook, k_global=5)
        ids, _ = top_k_rows_scalar(f, codebook, 5)
        assert np.array_equal(fast.token_ids, ids)
        slow = quantize_global_exhaustive(f, codebook, 5)
        assert np.array_equal(fast.token_ids, slow.token_ids)


def test_quantize_global_boundary_ties_by_index():
    codebook = np.array([[0.0], [2.0], [1.0], [1.0], [1.0]])
    result = quantize_global(np.array([0.0]), codebook, k_global=3)
    # distances: 0, 4, 1, 1, 1 -> ids 0, then the tied 1.0 rows by index
    assert result.token_ids.tolist() == [0, 2, 3]


def test_quantize_global_k_out_of_range():
    codebook = np.zeros((4, 2))
    with pytest.raises(ValueError, match="k_global"):
        quantize_global(np.zeros(2), codebook, k_global=0)
    with pytest.raises(ValueError, match="k_global"):
        quantize_global(np.zeros(2), codebook, k_global=5)


# -- straight-through -------------------------------------------------------------


def test_straight_through_forward_is_quantized_rows():
    rng = np.random.default_rng(10)
    codebook = rng.standard_normal((16, 3))
    x = rng.standard_normal((5, 3))
    result = quantize_local(x, codebook)
    out = straight_through(Tensor(x), result.quantized_vectors)
    assert np.array_equal(out.data, codebook[result.token_ids])


def test_straight_through_identity_backward():
    rng = np.random.default_rng(11)
    x = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    codebook = rng.standard_normal((9, 3))
    result = quantize_local(x.data, codebook)
    backward(ad.tensor_sum(straight_through(x, result.quantized_vectors)))
    assert np.array_equal(x.grad, np.ones((4, 3)))


def test_straight_through_equals_identity_linear_downstream():
    rng = np.random.default_rng(12)
    x_val = rng.standard_normal((6, 4))
    weights = rng.standard_normal((6, 4))
    codebook = rng.standard_normal((25, 4))
    result = quantize_local(x_val, codebook)

    x1 = Tensor(x_val, requires_grad=True)
    backward(ad.tensor_sum(ad.mul(straight_through(x1, result.quantized_vectors), Tensor(weights))))
    x2 = Tensor(x_val, requires_grad=True)
    backward(ad.tensor_sum(ad.mul(x2, Tensor(weights))))
    assert np.array_equal(x1.grad, x2.grad)


def test_straight_through_dual_graph_nonlinear():
    # codebook rows equal to the features: quantized values coincide with x,
    # so the straight-through graph must reproduce the identity graph bitwise
    rng = np.random.default_rng(13)
    x_val = rng.standard_normal((5, 3))
    result = quantize_local(x_val, x_val)
    assert np.array_equal(result.quantized_vectors, x_val)

    def downstream(t):
        return ad.mean(ad.mul(ad.silu(t), ad.silu(t)))

    x1 = Tensor(x_val, requires_grad=True)
    backward(downstream(straight_through(x1, result.quantized_vectors)))
    x2 = Tensor(x_val, requires_grad=True)
    backward(downstream(x2))
    assert np.array_equal(x1.grad, x2.grad)


def test_frozen_codebook_receives_no_gradient():
    rng = np.random.default_rng(14)
    table = EmbeddingTable(rng.standard_normal((10, 4)).astype(np.float32))
    table_node = Tensor(table.as_f64(), requires_grad=False)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    result = quantize_local(x.data, table)
    fq = gather_quantized(table_node, result)
    loss = ad.mse(straight_through(x, fq.data), Tensor(np.zeros((3, 4))))
    backward(loss)
    assert table_node.grad is None
    assert x.grad is not None


def test_gather_quantized_routes_gradient_to_projector():
    rng = np.random.default_rng(15)
    base = synthetic_table(rng, 8, 5)
    projector = make_projector(5, 3, seed=16)
    table_node = projector.apply(Tensor(base.as_f64()))
    result = quantize_local(rng.standard_normal((4, 3)), table_node.data)
    fq = gather_quantized(table_node, result)
    backward(ad.mean(ad.mul(fq, fq)))
    assert projector.weight.grad is not None
    assert np.abs(projector.weight.grad).max() > 0
