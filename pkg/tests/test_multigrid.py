import os

import numpy as np
import pytest

from mgno.multigrid import (MgConfig, MgWeights, classical_poisson_config,
                            classical_poisson_weights, smooth, restrict_residual,
                            apply_wmg, estimate_contraction, energy_norm,
                            save_weights, load_weights, POISSON_A, POISSON_B,
                            POISSON_RP)
from mgno.network import init_params  # convenient random MgWeights source
from mgno.network import MgNOConfig
from mgno.tensor import BoundaryMode, Field, Kernel, conv2d
from dense_oracle import vcycle_matrix

D = BoundaryMode.DIRICHLET_ZERO
P = BoundaryMode.PERIODIC_CIRCULAR


def poisson_field(rng, d):
    u_star = Field(rng.standard_normal((1, d, d)))
    f = conv2d(u_star, Kernel(POISSON_A[None, None]), D)
    return u_star, f


def random_mg(seed, levels=2, width=2, c_in=1, pre=(1, 1), post=(1, 0),
              boundary=D, restrict=D):
    """Random multi-channel weights with a matching config."""
    cfg = MgConfig(levels=levels, channels=(width,) * levels, pre_iters=pre,
                   post_iters=post, boundary=boundary, restrict_boundary=restrict,
                   input_channels=c_in)
    net_cfg = MgNOConfig(layers=1, width=width, levels=levels, pre_iters=pre,
                         post_iters=post, boundary=boundary,
                         restrict_boundary=restrict, in_channels=c_in, seed=seed)
    return init_params(net_cfg).layers[0].wmg, cfg


# ----------------------------------------------------------------- configs

def test_config_validation():
    with pytest.raises(ValueError):
        MgConfig(levels=2, channels=(1, 1), pre_iters=(1, 1), post_iters=(0, 1))
    with pytest.raises(ValueError):
        MgConfig(levels=2, channels=(1, 1), pre_iters=(1, 1), post_iters=(1, 0),
                 cycle="backslash")
    with pytest.raises(ValueError):
        MgConfig(levels=2, channels=(1, 1), pre_iters=(1, 1), post_iters=(0, 0),
                 restrict_boundary=BoundaryMode.NO_PAD)
    cfg = MgConfig(levels=3, channels=(1, 1, 1), pre_iters=(1, 1, 1),
                   post_iters=(1, 1, 0))
    with pytest.raises(ValueError):
        cfg.check_size(6, 6)


# ------------------------------------------------------------------ smooth

def test_smooth_fixed_point():
    rng = np.random.default_rng(0)
    u_star, f = poisson_field(rng, 8)
    a = Kernel(POISSON_A[None, None])
    b = Kernel(POISSON_B[None, None])
    out = smooth(u_star, f, a, b, D)
    np.testing.assert_allclose(out.data, u_star.data, atol=1e-12)


def test_smooth_from_zero():
    rng = np.random.default_rng(1)
    f = Field(rng.standard_normal((1, 8, 8)))
    a = Kernel(POISSON_A[None, None])
    b = Kernel(POISSON_B[None, None])
    out = smooth(Field(np.zeros((1, 8, 8))), f, a, b, D)
    np.testing.assert_allclose(out.data, conv2d(f, b, D).data, atol=1e-14)


def test_smooth_energy_decrease():
    rng = np.random.default_rng(2)
    u_star, f = poisson_field(rng, 8)
    a = Kernel(POISSON_A[None, None])
    b = Kernel(POISSON_B[None, None])
    u = Field(np.zeros((1, 8, 8)))
    err = energy_norm(u_star.data - u.data, POISSON_A[None, None], D)
    for _ in range(5):
        u = smooth(u, f, a, b, D)
        nxt = energy_norm(u_star.data - u.data, POISSON_A[None, None], D)
        assert nxt < err
        err = nxt


# ------------------------------------------------------------- restriction

def test_restrict_zero_residual():
    rng = np.random.default_rng(3)
    u_star, f = poisson_field(rng, 8)
    out = restrict_residual(f, u_star, Kernel(POISSON_A[None, None]),
                            Kernel(POISSON_RP[None, None]), D, D)
    assert out.data.shape == (1, 4, 4)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_restrict_hand_computed_2x2():
    f = Field(np.ones((1, 4, 4)))
    u = Field(np.zeros((1, 4, 4)))
    out = restrict_residual(f, u, Kernel(POISSON_A[None, None]),
                            Kernel(POISSON_RP[None, None]), D, D)
    np.testing.assert_allclose(out.data[0], [[2.0, 3.0], [3.0, 4.0]], atol=1e-14)


def test_restrict_linearity():
    rng = np.random.default_rng(4)
    a = Kernel(POISSON_A[None, None])
    r = Kernel(POISSON_RP[None, None])
    f1_, u1 = Field(rng.standard_normal((1, 8, 8))), Field(rng.standard_normal((1, 8, 8)))
    f2_, u2 = Field(rng.standard_normal((1, 8, 8))), Field(rng.standard_normal((1, 8, 8)))
    lhs = restrict_residual(Field(f1_.data + f2_.data), Field(u1.data + u2.data),
                            a, r, D, D).data
    rhs = restrict_residual(f1_, u1, a, r, D, D).data \
        + restrict_residual(f2_, u2, a, r, D, D).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# --------------------------------------------------------------- apply_wmg

def test_apply_wmg_zero_input():
    w, cfg = random_mg(seed=5)
    out = apply_wmg(Field(np.zeros((1, 8, 8))), None, w, cfg)
    np.testing.assert_array_equal(out.data, np.zeros((2, 8, 8)))


def test_apply_wmg_superposition():
    rng = np.random.default_rng(6)
    w, cfg = random_mg(seed=7)
    f1_ = Field(rng.standard_normal((1, 8, 8)))
    f2_ = Field(rng.standard_normal((1, 8, 8)))
    lhs = apply_wmg(Field(f1_.data + f2_.data), None, w, cfg).data
    rhs = apply_wmg(f1_, None, w, cfg).data + apply_wmg(f2_, None, w, cfg).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_apply_wmg_size_validation():
    w, cfg = random_mg(seed=8, levels=3, pre=(1, 1, 1), post=(1, 1, 0))
    with pytest.raises(ValueError):
        apply_wmg(Field(np.zeros((1, 6, 6))), None, w, cfg)


def test_backslash_equals_v_without_post():
    rng = np.random.default_rng(9)
    w, _ = random_mg(seed=10, pre=(1, 2), post=(0, 0))
    f = Field(rng.standard_normal((1, 8, 8)))
    cfg_v = MgConfig(levels=2, channels=(2, 2), pre_iters=(1, 2), post_iters=(0, 0),
                     cycle="v", input_channels=1)
    cfg_b = MgConfig(levels=2, channels=(2, 2), pre_iters=(1, 2), post_iters=(0, 0),
                     cycle="backslash", input_channels=1)
    np.testing.assert_array_equal(apply_wmg(f, None, w, cfg_v).data,
                                  apply_wmg(f, None, w, cfg_b).data)


def test_apply_wmg_boundary_padding_is_stateless():
    # recomputing after explicitly zeroing the Dirichlet ghost ring changes nothing
    rng = np.random.default_rng(19)
    levels = 2
    cfg = classical_poisson_config(levels, smooth_iters=1, coarse_iters=1)
    w = classical_poisson_weights(levels, cfg)
    f = Field(rng.standard_normal((1, 8, 8)))
    out1 = apply_wmg(f, None, w, cfg)
    out2 = apply_wmg(Field(f.data.copy()), None, w, cfg)
    np.testing.assert_array_equal(out1.data, out2.data)


# -------------------------------------------------- dense operator oracle

@pytest.mark.parametrize("boundary", [D, P])
def test_apply_wmg_matches_dense_composition(boundary):
    d = 8
    w, cfg = random_mg(seed=11, levels=2, width=2, c_in=1, pre=(1, 1),
                       post=(1, 0), boundary=boundary, restrict=boundary)
    oracle = vcycle_matrix(w, cfg, d)
    # column-by-column assembly through the actual implementation
    cols = []
    for j in range(d * d):
        e = np.zeros((1, d, d))
        e.reshape(-1)[j] = 1.0
        cols.append(apply_wmg(Field(e), None, w, cfg).data.reshape(-1))
    ours = np.array(cols).T
    np.testing.assert_allclose(ours, oracle, atol=1e-10)


# ------------------------------------------------------- classical preset

def test_classical_weights_match_published_stencils():
    w = classical_poisson_weights(3)
    np.testing.assert_array_equal(w.a[0][0, 0], POISSON_A)
    assert w.b_pre[0][0][0, 0, 1, 1] == 12.0 / 64.0
    np.testing.assert_array_equal(w.r[0][0, 0], POISSON_RP)
    np.testing.assert_array_equal(w.p[0][0, 0, :3, :3], POISSON_RP)
    assert np.all(w.p[0][0, 0, 3, :] == 0.0) and np.all(w.p[0][0, 0, :, 3] == 0.0)
    np.testing.assert_array_equal(w.k0[0, 0],
                                  [[0, 0, 0], [0, 1, 0], [0, 0, 0]])


def test_classical_contraction_rate_d64():
    rng = np.random.default_rng(12)
    d, levels = 64, 4
    cfg = classical_poisson_config(levels)
    w = classical_poisson_weights(levels)
    u_star, f = poisson_field(rng, d)
    rep = estimate_contraction(f, u_star, w, cfg, iters=10)
    assert 0.05 <= rep.rho <= 0.2
    assert not rep.diverged


def test_classical_first_cycle_reduction_with_one_smoothing():
    # one pre- plus one post-smoothing step: the first cycle gains about a digit
    rng = np.random.default_rng(13)
    d, levels = 64, 4
    cfg = MgConfig(levels=levels, channels=(1,) * levels, pre_iters=(1, 1, 1, 1),
                   post_iters=(1, 1, 1, 0), boundary=D, restrict_boundary=D)
    w = classical_poisson_weights(levels, cfg)
    u_star, f = poisson_field(rng, d)
    rep = estimate_contraction(f, u_star, w, cfg, iters=2)
    first = rep.energy_errors[1] / rep.energy_errors[0]
    assert 0.05 <= first <= 0.2


def test_estimate_contraction_zero_solution():
    w = classical_poisson_weights(2)
    cfg = classical_poisson_config(2)
    zero = Field(np.zeros((1, 8, 8)))
    rep = estimate_contraction(zero, zero, w, cfg, iters=3)
    assert rep.rho == 0.0
    assert all(e == 0.0 for e in rep.energy_errors)


def test_smooth_solution_converges_no_slower_than_random():
    rng = np.random.default_rng(14)
    d, levels = 32, 3
    cfg = classical_poisson_config(levels)
    w = classical_poisson_weights(levels)
    i = np.arange(1, d + 1)
    h = 1.0 / (d + 1)
    smooth_star = Field((np.sin(np.pi * i[:, None] * h)
                         * np.sin(np.pi * i[None, :] * h))[None])
    rough_star = Field(rng.standard_normal((1, d, d)))
    reps = {}
    for name, star in [("smooth", smooth_star), ("rough", rough_star)]:
        f = conv2d(star, Kernel(POISSON_A[None, None]), D)
        reps[name] = estimate_contraction(f, star, w, cfg, iters=8)
    assert reps["smooth"].rho <= reps["rough"].rho + 0.02


def test_energy_monotone_classical():
    rng = np.random.default_rng(15)
    cfg = classical_poisson_config(3)
    w = classical_poisson_weights(3)
    u_star, f = poisson_field(rng, 32)
    rep = estimate_contraction(f, u_star, w, cfg, iters=8)
    for prev, cur in zip(rep.energy_errors, rep.energy_errors[1:]):
        assert cur <= prev + 1e-12


# ------------------------------------------------------------ serialization

def test_weights_roundtrip(tmp_path):
    w, cfg = random_mg(seed=16, levels=3, width=3, c_in=2, pre=(2, 1, 1),
                       post=(1, 1, 0))
    save_weights(tmp_path / "w", w, cfg)
    w2, cfg2 = load_weights(tmp_path / "w")
    assert cfg2 == cfg
    for (n1, a1), (n2, a2) in zip(w.tensors(), w2.tensors()):
        assert n1 == n2
        np.testing.assert_array_equal(np.asarray(a1), np.asarray(a2))


def test_load_weights_rejects_bad_format(tmp_path):
    w, cfg = random_mg(seed=17)
    save_weights(tmp_path / "w", w, cfg)
    manifest = os.path.join(tmp_path, "w", "manifest.json")
    text = open(manifest).read().replace("mgno-wmg-1", "mgno-wmg-9")
    open(manifest, "w").write(text)
    with pytest.raises(ValueError):
        load_weights(tmp_path / "w")
