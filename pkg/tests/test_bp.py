import itertools

import numpy as np
import pytest

from errquant.bp import (
    LabelSpace,
    MrfModel,
    _MessageUpdate,
    bp_moments,
    bp_sweep,
    compare_to_chain,
    export_marginals_raw,
    mean_abs_diff,
    tv_mrf,
    write_marginal_slice,
)
from errquant.core import ConfigError, ShapeError
from errquant.imageio import read_cif
from errquant.samplers import ChainStats


def brute_force(unary, w, labels):
    """Exact marginals of a grid MRF by enumerating every labelling."""
    M, N, nl = unary.shape
    marg = np.zeros_like(unary)
    total = 0.0
    for conf in itertools.product(range(nl), repeat=M * N):
        c = np.array(conf).reshape(M, N)
        e = unary[np.arange(M)[:, None], np.arange(N)[None, :], c].sum()
        lv = labels[c]
        e += w * (np.abs(np.diff(lv, axis=0)).sum() + np.abs(np.diff(lv, axis=1)).sum())
        p = np.exp(-e)
        total += p
        for i in range(M):
            for j in range(N):
                marg[i, j, c[i, j]] += p
    return marg / total


@pytest.mark.parametrize("shape", [(1, 2), (1, 3), (1, 4), (3, 1), (4, 1)])
@pytest.mark.parametrize("nl", [2, 3, 4])
def test_chain_exact(shape, nl):
    rng = np.random.Generator(np.random.PCG64(nl * 10 + shape[1]))
    unary = rng.uniform(0, 3, shape + (nl,))
    labels = np.sort(rng.uniform(0, 1, nl))
    model = MrfModel(unary, 2.5, labels)
    np.testing.assert_allclose(bp_sweep(model, 3), brute_force(unary, 2.5, labels), atol=1e-8)


def test_tv_chain_exact():
    z = np.array([[0.1, 0.8, 0.4]])
    labels = LabelSpace(2)
    model = tv_mrf(z, 0.3, 0.5, labels)
    np.testing.assert_allclose(bp_sweep(model, 2), brute_force(model.unary, 2.0, labels.values), atol=1e-8)


def test_pairwise_off_is_softmax(rng):
    unary = rng.uniform(0, 5, (4, 5, 6))
    marg = bp_sweep(MrfModel(unary, 0.0, np.linspace(0, 1, 6)), 2)
    soft = np.exp(-unary)
    soft /= soft.sum(axis=-1, keepdims=True)
    np.testing.assert_allclose(marg, soft, atol=1e-12)


def test_loopy_grid_converges():
    rng = np.random.Generator(np.random.PCG64(9))
    z = rng.random((3, 3))
    model = tv_mrf(z, 0.2, 0.5, LabelSpace(3))
    a = bp_sweep(model, 9)
    b = bp_sweep(model, 10)
    assert np.abs(a - b).max() < 1e-6


def test_loopy_grid_close_to_enumeration():
    # not exact on loops, but a weakly coupled 2x2 grid stays close
    rng = np.random.Generator(np.random.PCG64(4))
    unary = rng.uniform(0, 2, (2, 2, 3))
    labels = np.array([0.0, 0.5, 1.0])
    marg = bp_sweep(MrfModel(unary, 0.3, labels), 10)
    assert np.abs(marg - brute_force(unary, 0.3, labels)).max() < 1e-2


def test_marginals_normalized(rng):
    model = tv_mrf(rng.random((5, 6)), 0.1, 0.05, LabelSpace(16))
    marg = bp_sweep(model, 3)
    np.testing.assert_allclose(marg.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(marg >= 0)


def test_damping_keeps_fixed_point():
    z = np.array([[0.2, 0.6, 0.9, 0.4]])
    model = tv_mrf(z, 0.2, 0.3, LabelSpace(4))
    np.testing.assert_allclose(bp_sweep(model, 60, damping=0.5), bp_sweep(model, 3), atol=1e-8)


def test_exact_and_matmul_updates_agree(rng):
    labels = np.linspace(0, 1, 9)
    upd = _MessageUpdate(labels, 40.0)
    h = rng.uniform(-30, 0, (5, 9))
    fast = upd(h)
    upd.exact = True
    np.testing.assert_allclose(upd(h), fast, atol=1e-10)


def test_strong_coupling_uses_log_domain():
    # w = 1e4 exceeds the matmul range; result must stay finite and normalized
    z = np.array([[0.1, 0.9], [0.5, 0.5]])
    marg = bp_sweep(tv_mrf(z, 0.1, 1e-4, LabelSpace(8)), 3)
    assert np.all(np.isfinite(marg))
    np.testing.assert_allclose(marg.sum(axis=-1), 1.0)


def test_moments_point_mass_and_uniform():
    labels = np.array([0.0, 1.0])
    mean, var = bp_moments(np.array([[[0.0, 1.0], [0.5, 0.5]]]), labels)
    np.testing.assert_array_equal(mean, [[1.0, 0.5]])
    np.testing.assert_array_equal(var, [[0.0, 0.25]])


def test_moments_direct_sum(rng):
    ls = LabelSpace(7)
    marg = rng.random((3, 4, 8))
    marg /= marg.sum(axis=-1, keepdims=True)
    mean, var = bp_moments(marg, ls)
    for i in range(3):
        for j in range(4):
            m = sum(marg[i, j, k] * ls.values[k] for k in range(8))
            v = sum(marg[i, j, k] * (ls.values[k] - m) ** 2 for k in range(8))
            assert mean[i, j] == pytest.approx(m, abs=1e-12)
            assert var[i, j] == pytest.approx(v, abs=1e-12)


def test_compare_to_chain(rng):
    mean = rng.random((4, 4))
    var = rng.random((4, 4))
    same = ChainStats(1, mean.copy(), var.copy())
    assert compare_to_chain(mean, var, same) == (0.0, 0.0)
    shifted = ChainStats(1, mean + 0.3, var.copy())
    md_m, md_v = compare_to_chain(mean, var, shifted)
    assert md_m == pytest.approx(0.3) and md_v == pytest.approx(0.0, abs=1e-15)


def test_exports(tmp_path, rng):
    ls = LabelSpace(3)
    marg = bp_sweep(tv_mrf(rng.random((2, 3)), 0.2, 0.5, ls), 2)
    paths = export_marginals_raw(marg, tmp_path / "m")
    assert len(paths) == 4
    np.testing.assert_array_equal(read_cif(paths[2]), marg[..., 2])
    write_marginal_slice(tmp_path / "s.csv", marg, ls, 1, "# config_hash=abc")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "# config_hash=abc"
    assert lines[1] == "label,col0,col1,col2"
    assert len(lines) == 2 + 4


def test_validation():
    with pytest.raises(ConfigError):
        LabelSpace(0)
    with pytest.raises(ShapeError):
        MrfModel(np.zeros((2, 2, 3)), 1.0, np.zeros(4))
    with pytest.raises(ConfigError):
        MrfModel(np.zeros((2, 2, 3)), -1.0, np.zeros(3))
    with pytest.raises(ConfigError):
        bp_sweep(MrfModel(np.zeros((1, 2, 2)), 1.0, np.zeros(2)), 0)
    with pytest.raises(ShapeError):
        mean_abs_diff(np.zeros(2), np.zeros(3))
