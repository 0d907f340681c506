from __future__ import annotations

import random

import numpy as np
import pytest

from tableval.lora import (
    TARGET_MODULES,
    AdapterFormatError,
    LoraUpdate,
    NonFinite,
    ShapeMismatch,
    TargetModuleSet,
    delta_rank_bound,
    merge,
    read_adapter,
    write_adapter,
)


# --- independent oracles, written before the module under test ------------------

def matmul_oracle(A, B):
    """Dense multiply-accumulate with plain Python floats."""
    n, m = len(A), len(B[0])
    inner = len(B)
    assert len(A[0]) == inner
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(inner):
                acc += A[i][t] * B[t][j]
            out[i][j] = acc
    return out


def rank_oracle(M, tol=1e-9):
    """Row-reduction rank with partial pivoting, independent of numpy.linalg."""
    mat = [list(map(float, row)) for row in M]
    n_rows = len(mat)
    n_cols = len(mat[0]) if n_rows else 0
    rank = 0
    row = 0
    for col in range(n_cols):
        pivot = max(range(row, n_rows), key=lambda r: abs(mat[r][col]), default=None)
        if pivot is None or abs(mat[pivot][col]) <= tol:
            continue
        mat[row], mat[pivot] = mat[pivot], mat[row]
        pv = mat[row][col]
        for r in range(row + 1, n_rows):
            factor = mat[r][col] / pv
            for c in range(col, n_cols):
                mat[r][c] -= factor * mat[row][c]
        rank += 1
        row += 1
        if row == n_rows:
            break
    return rank


def random_update(rng: random.Random, d: int, k: int, r: int, alpha: float = 8.0) -> LoraUpdate:
    A = [[rng.uniform(-1, 1) for _ in range(r)] for _ in range(d)]
    B = [[rng.uniform(-1, 1) for _ in range(k)] for _ in range(r)]
    return LoraUpdate(A=np.array(A), B=np.array(B), rank=r, alpha=alpha)


def test_merge_into_zero_weights_is_the_delta():
    rng = random.Random(0)
    u = random_update(rng, 2, 2, 1)
    merged = merge(np.zeros((2, 2)), u, scale_mode="paper_eq2")
    assert np.allclose(merged, np.array(matmul_oracle(u.A.tolist(), u.B.tolist())), atol=1e-12)


def test_alpha_over_r_scaling_elementwise():
    rng = random.Random(1)
    u = random_update(rng, 4, 4, 2, alpha=4.0)
    W = np.array([[rng.uniform(-1, 1) for _ in range(4)] for _ in range(4)])
    merged = merge(W, u, scale_mode="alpha_over_r")
    expected_delta = matmul_oracle(u.A.tolist(), u.B.tolist())
    for i in range(4):
        for j in range(4):
            assert merged[i][j] == pytest.approx(W[i][j] + 2.0 * expected_delta[i][j], abs=1e-10)


def test_merge_matches_oracle_and_rank_bound_on_random_instances():
    rng = random.Random(2)
    for _ in range(50):
        d, k = rng.randint(2, 10), rng.randint(2, 10)
        r = rng.randint(1, min(d, k))
        u = random_update(rng, d, k, r)
        W = np.array([[rng.uniform(-2, 2) for _ in range(k)] for _ in range(d)])
        for mode in ("paper_eq2", "alpha_over_r"):
            merged = merge(W, u, scale_mode=mode)
            scale = 1.0 if mode == "paper_eq2" else u.alpha / u.rank
            oracle = matmul_oracle(u.A.tolist(), u.B.tolist())
            for i in range(d):
                for j in range(k):
                    assert abs(merged[i][j] - (W[i][j] + scale * oracle[i][j])) < 1e-10
            assert rank_oracle(merged - W) <= r
        assert delta_rank_bound(u) <= r


def test_rank_of_basis_update_is_one():
    A = np.zeros((4, 2))
    A[0, 0] = 1.0
    B = np.zeros((2, 5))
    B[0, 0] = 1.0
    u = LoraUpdate(A=A, B=B, rank=2, alpha=1.0)
    assert delta_rank_bound(u) == 1


def test_rank_of_zero_b_is_zero_and_merge_is_identity():
    rng = random.Random(3)
    A = np.array([[rng.uniform(-1, 1) for _ in range(2)] for _ in range(4)])
    u = LoraUpdate(A=A, B=np.zeros((2, 3)), rank=2, alpha=32.0)
    assert delta_rank_bound(u) == 0
    W = np.arange(12, dtype=float).reshape(4, 3)
    for mode in ("paper_eq2", "alpha_over_r"):
        assert np.array_equal(merge(W, u, scale_mode=mode), W)


def test_full_rank_random_update_hits_configured_rank():
    rng = random.Random(4)
    for _ in range(10):
        u = random_update(rng, 6, 7, 3)
        got = delta_rank_bound(u)
        assert got == rank_oracle(u.A @ u.B, tol=1e-9) == 3


def test_delta_scales_linearly_in_a():
    rng = random.Random(5)
    u = random_update(rng, 5, 4, 2)
    W = np.ones((5, 4))
    base_delta = merge(W, u) - W
    scaled = LoraUpdate(A=3.0 * u.A, B=u.B, rank=u.rank, alpha=u.alpha)
    assert np.allclose(merge(W, scaled) - W, 3.0 * base_delta, atol=1e-12)


def test_shape_and_finiteness_errors():
    u = LoraUpdate(A=np.ones((3, 2)), B=np.ones((2, 4)), rank=2, alpha=1.0)
    with pytest.raises(ShapeMismatch):
        merge(np.zeros((3, 3)), u)
    with pytest.raises(ShapeMismatch):
        LoraUpdate(A=np.ones((3, 2)), B=np.ones((3, 4)), rank=2, alpha=1.0)
    with pytest.raises(ShapeMismatch):
        LoraUpdate(A=np.ones((3, 5)), B=np.ones((5, 4)), rank=5, alpha=1.0)  # r > min(d, k)
    with pytest.raises(NonFinite):
        merge(np.array([[np.inf, 0.0], [0.0, 0.0]]), LoraUpdate(np.ones((2, 1)), np.ones((1, 2)), 1, 1.0))
    with pytest.raises(NonFinite):
        LoraUpdate(A=np.array([[np.nan], [0.0]]), B=np.ones((1, 2)), rank=1, alpha=1.0)


def test_adapter_file_round_trip(tmp_path):
    rng = random.Random(6)
    u = random_update(rng, 5, 3, 2, alpha=32.0)
    path = tmp_path / "q_proj.lora"
    write_adapter(path, "q_proj", u)
    name, loaded = read_adapter(path)
    assert name == "q_proj"
    assert loaded.rank == 2 and loaded.alpha == pytest.approx(32.0)
    assert np.array_equal(loaded.A, u.A.astype(np.float32))
    assert np.array_equal(loaded.B, u.B.astype(np.float32))
    # byte determinism
    first = path.read_bytes()
    write_adapter(path, "q_proj", u)
    assert path.read_bytes() == first


def test_adapter_format_errors(tmp_path):
    bad = tmp_path / "bad.lora"
    bad.write_bytes(b"NOTLORA!")
    with pytest.raises(AdapterFormatError):
        read_adapter(bad)
    rng = random.Random(7)
    u = random_update(rng, 4, 4, 2)
    good = tmp_path / "good.lora"
    write_adapter(good, "v_proj", u)
    truncated = tmp_path / "short.lora"
    truncated.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(AdapterFormatError):
        read_adapter(truncated)


def test_target_module_registry():
    assert TARGET_MODULES == {
        "q_proj", "k_proj", "v_proj", "gate_proj", "down_proj", "up_proj", "visual_proj",
    }
    assert TargetModuleSet({"q_proj", "visual_proj"}).names == {"q_proj", "visual_proj"}
    with pytest.raises(ValueError):
        TargetModuleSet(frozenset())
    with pytest.raises(ValueError):
        TargetModuleSet({"o_proj"})
