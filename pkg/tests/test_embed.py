import itertools

import numpy as np
import pytest

from mosaic import autodiff as ad
from mosaic.embed import (
    build_sequence,
    embed_measurement,
    embedding_matrices,
    frequencies,
    positional_encoding,
    positional_table,
    project_token,
)
from mosaic.sampler import MaskSpec, compress, draw_mask, full_mask
from mosaic.wht import build_hadamard, sample_full


def test_zero_measurement_gives_zero_matrix():
    b = build_hadamard(8)
    assert not embed_measurement(0.0, b, 3, 5).matrix.any()


def test_dc_lift_is_all_ones():
    b = build_hadamard(8)
    e = embed_measurement(1.0, b, 1, 1)
    assert np.array_equal(e.matrix, np.ones((8, 8)))
    assert e.origin == (1, 1)


def test_entries_have_measurement_magnitude():
    b = build_hadamard(8, "sequency")
    e = embed_measurement(-2.5, b, 4, 7)
    assert np.all(np.abs(e.matrix) == 2.5)
    assert np.array_equal(e.matrix, -2.5 * np.outer(b.row(4), b.row(7)))


def test_index_out_of_range():
    with pytest.raises(ValueError):
        embed_measurement(1.0, build_hadamard(4), 0, 1)
    with pytest.raises(ValueError):
        embed_measurement(1.0, build_hadamard(4), 1, 5)


@pytest.mark.parametrize("N,ordering", [(4, "sylvester"), (8, "sequency"), (32, "sylvester")])
def test_sum_of_lifts_recovers_patch(N, ordering):
    b = build_hadamard(N, ordering)
    X = np.random.default_rng(N).random((N, N))
    Y = sample_full(X, b)
    total = sum(embed_measurement(Y[i - 1, j - 1], b, i, j).matrix for i in range(1, N + 1) for j in range(1, N + 1))
    assert np.linalg.norm(total / b.k - X) <= 1e-9 * np.linalg.norm(X)


def test_vectorised_lifts_match_single():
    b = build_hadamard(8)
    rng = np.random.default_rng(2)
    mk = draw_mask(64, 0.25, 3)
    vals = rng.standard_normal(mk.m)
    lifts = embedding_matrices(vals, mk.flat_array, b)
    for k, (i, j) in enumerate(mk.indices):
        assert np.array_equal(lifts[k], embed_measurement(vals[k], b, i, j).matrix.reshape(-1))


def test_ablation_modes():
    b = build_hadamard(4)
    vals = np.array([2.0, -3.0])
    flat = np.array([0, 5])
    assert np.array_equal(embedding_matrices(vals, flat, b, "ones-times-y"), vals[:, None] * np.ones((2, 16)))
    assert np.array_equal(embedding_matrices(vals, flat, b, "ones"), np.ones((2, 16)))
    with pytest.raises(ValueError):
        embedding_matrices(vals, flat, b, "random")


def test_project_token_examples():
    b = build_hadamard(4)
    E = embed_measurement(1.5, b, 2, 3)
    d = 16
    out = project_token(E, np.eye(16), np.zeros(d))
    assert np.array_equal(out.data, E.matrix.reshape(-1))
    bias = np.arange(8.0)
    zero = project_token(np.zeros((4, 4)), np.ones((16, 8)), bias)
    assert np.array_equal(zero.data, bias)
    with pytest.raises(ValueError):
        project_token(E, np.ones((15, 8)), bias)


def test_project_token_gradient():
    b = build_hadamard(4)
    E = embed_measurement(0.7, b, 3, 2)
    rng = np.random.default_rng(0)
    W = ad.Parameter(rng.standard_normal((16, 8)), "T", dtype=np.float64)
    bias = ad.Parameter(rng.standard_normal(8), "Tb", dtype=np.float64)
    target = ad.Tensor(rng.standard_normal(8))

    def closure():
        return ad.mse_loss(project_token(E, W, bias), target)

    report = ad.grad_check(closure, [W, bias], coords_per_param=20)
    assert report.passed, report.summary()


def test_positional_injective_32():
    table = positional_table(32, 32)
    assert table.shape == (1024, 32)
    rounded = {tuple(np.round(r, 12)) for r in table}
    assert len(rounded) == 1024
    dists = np.linalg.norm(table[:, None, :] - table[None, :, :], axis=-1)
    assert dists[~np.eye(1024, dtype=bool)].min() > 1e-6


def test_positional_first_entries():
    d = 16
    w = frequencies(d)
    p = positional_encoding(1, 1, d, 8)
    assert np.allclose(p[0 : d // 2 : 2], np.sin(w))
    assert np.allclose(p[1 : d // 2 : 2], np.cos(w))
    assert np.allclose(p[d // 2 :: 2], np.sin(w))
    assert w[0] == 1.0


def test_positional_layout_rows_and_columns():
    a = positional_encoding(3, 5, 8, 8)
    c = positional_encoding(3, 6, 8, 8)
    assert np.array_equal(a[:4], c[:4]) and not np.array_equal(a[4:], c[4:])


def test_positional_bad_width():
    with pytest.raises(ValueError):
        positional_encoding(1, 1, 6, 8)
    with pytest.raises(ValueError):
        positional_encoding(9, 1, 8, 8)


def test_table_read_only():
    t = positional_table(8, 16)
    with pytest.raises(ValueError):
        t[0, 0] = 1.0


def _weights(d=16, n=64, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)) * 0.1, rng.standard_normal(d) * 0.1


def test_build_sequence_token_formula():
    b = build_hadamard(8)
    X = np.random.default_rng(1).random((8, 8))
    mk = draw_mask(64, 0.25, 9)
    cm = compress(sample_full(X, b), mk)
    W, bias = _weights()
    seq = build_sequence(cm, b, W, bias)
    assert seq.tokens.shape == (16, 16) and seq.d == 16
    assert seq.positions == mk.indices
    for k, (i, j) in enumerate(mk.indices):
        E = embed_measurement(cm.values[k], b, i, j).matrix.reshape(-1)
        expect = E @ W + bias + positional_encoding(i, j, 16, 8)
        assert np.allclose(seq.tokens.data[k], expect, atol=1e-12)


def test_single_token_sequence():
    b = build_hadamard(8)
    cm = compress(np.ones((8, 8)), MaskSpec(64, 1 / 64, 0, (10,)))
    W, bias = _weights()
    assert build_sequence(cm, b, W, bias).tokens.shape == (1, 16)


def test_order_independent_of_draw_order():
    b = build_hadamard(8)
    Y = sample_full(np.random.default_rng(4).random((8, 8)), b)
    flat = [40, 3, 17, 9]
    a = compress(Y, MaskSpec(64, 4 / 64, 0, tuple(sorted(flat))))
    c = compress(Y, MaskSpec(64, 4 / 64, 1, tuple(sorted(reversed(flat)))))
    W, bias = _weights()
    assert np.array_equal(build_sequence(a, b, W, bias).tokens.data, build_sequence(c, b, W, bias).tokens.data)


def test_ones_ablation_tokens_ignore_measurements():
    b = build_hadamard(8)
    mk = full_mask(64)
    W, bias = _weights()
    s1 = build_sequence(compress(np.zeros((8, 8)), mk), b, W, bias, mode="ones")
    s2 = build_sequence(compress(np.ones((8, 8)), mk), b, W, bias, mode="ones")
    assert np.array_equal(s1.tokens.data, s2.tokens.data)
    assert np.allclose(s1.tokens.data, np.ones(64) @ W + bias + positional_table(8, 16))


def test_build_sequence_shape_checks():
    b = build_hadamard(8)
    cm = compress(np.zeros((8, 8)), draw_mask(64, 0.25, 0))
    with pytest.raises(ValueError):
        build_sequence(cm, b, np.zeros((63, 16)), np.zeros(16))
    with pytest.raises(ValueError):
        build_sequence(cm, build_hadamard(4), np.zeros((16, 16)), np.zeros(16))


def test_all_pairs_distinct_small():
    table = positional_table(8, 16)
    for a, c in itertools.combinations(range(64), 2):
        assert not np.allclose(table[a], table[c])
