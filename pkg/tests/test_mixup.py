import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from hsicdfsl import encoder as E
from hsicdfsl import mixup as M
from hsicdfsl import tensor as T
from hsicdfsl.episodic import Episode, fsl_loss_from_embeddings
from hsicdfsl.errors import ConfigError, ContractError, DimensionError
from hsicdfsl.tensor import Tensor

TINY = E.EncoderConfig(depth=1, embed_dim=8, heads=2, mlp_dim=8, patch_size=3,
                       spectral_tokens=2, bands=4, patch_extent=3)


def test_config_validation():
    with pytest.raises(ConfigError, match="mixup.tau"):
        M.MixupConfig(tau=0)
    with pytest.raises(ConfigError, match="mixup.sigma_perturb"):
        M.MixupConfig(sigma_perturb=1.5)
    with pytest.raises(ConfigError, match="mixup.beta_alpha"):
        M.MixupConfig(beta_alpha=0)


# -- mixing --------------------------------------------------------------------

def test_embedding_mix_endpoint():
    zi, zj = np.array([1.0, 2.0]), np.array([-3.0, 4.0])
    z, y = M.mix_embeddings(zi, zj, [1, 0], [0, 1], 1.0)
    np.testing.assert_array_equal(z.data, zi)
    np.testing.assert_array_equal(y, [1, 0])


def test_embedding_mix_symmetry():
    zi = np.array([0.3, -1.7, 2.2])
    z, _ = M.mix_embeddings(zi, -zi, [1, 0], [0, 1], 0.5)
    np.testing.assert_array_equal(z.data, 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 1))
def test_mix_interpolation_bound_and_distribution(seed, lam):
    rng = np.random.default_rng(seed)
    zi, zj = rng.normal(size=6), rng.normal(size=6)
    yi, yj = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    z, y = M.mix_embeddings(zi, zj, yi, yj, lam)
    lo, hi = np.minimum(zi, zj), np.maximum(zi, zj)
    assert np.all(z.data >= lo - 1e-15) and np.all(z.data <= hi + 1e-15)
    assert np.all(y >= 0) and abs(y.sum() - 1) < 1e-12


def test_mix_rejects_bad_lambda():
    with pytest.raises(ContractError):
        M.mix_embeddings(np.zeros(2), np.zeros(2), [1], [1], 1.2)
    with pytest.raises(ContractError):
        M.mix_inputs(np.zeros(2), np.zeros(2), [1], [1], -0.1)


def test_embedding_mix_gradient_reaches_both_embeddings():
    zi = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    zj = Tensor(np.array([3.0, -1.0]), requires_grad=True)
    with T.Tape() as tape:
        z, _ = M.mix_embeddings(zi, zj, [1], [1], 0.3)
        loss = T.tsum(z)
    g = tape.backward(loss, [zi, zj])
    np.testing.assert_allclose(g[zi].data, 0.3)
    np.testing.assert_allclose(g[zj].data, 0.7)


def test_input_mix_endpoint_and_fixed_point():
    rng = np.random.default_rng(0)
    xs, xt = rng.normal(size=(5, 5, 4)), rng.normal(size=(5, 5, 4))
    x, y = M.mix_inputs(xs, xt, [1, 0], [0, 1], 0.0)
    np.testing.assert_array_equal(x, xt)
    np.testing.assert_array_equal(y, [0, 1])
    x, _ = M.mix_inputs(xs, xs, [1, 0], [0, 1], 0.37)
    np.testing.assert_allclose(x, xs, rtol=0, atol=1e-15)


def test_input_mix_mean_linearity():
    rng = np.random.default_rng(1)
    xs, xt = rng.normal(size=(9, 9, 50)), rng.normal(size=(9, 9, 50))
    x, _ = M.mix_inputs(xs, xt, [1], [1], 0.3)
    assert abs(x.mean() - (0.3 * xs.mean() + 0.7 * xt.mean())) < 1e-12


def test_input_mix_shape_mismatch():
    with pytest.raises(DimensionError):
        M.mix_inputs(np.zeros((3, 3, 2)), np.zeros((3, 3, 3)), [1], [1], 0.5)


# -- lambda draws --------------------------------------------------------------

def test_beta_one_is_uniform():
    rng = np.random.default_rng(2)
    draws = np.array([M.sample_lambda_beta(1.0, rng) for _ in range(100_000)])
    assert stats.kstest(draws, "uniform").statistic < 0.01


@pytest.mark.parametrize("alpha", [0.2, 1.0, 4.0])
def test_beta_symmetric_mean(alpha):
    rng = np.random.default_rng(3)
    draws = np.array([M.sample_lambda_beta(alpha, rng) for _ in range(100_000)])
    assert draws.min() >= 0 and draws.max() <= 1
    sd = math.sqrt(1 / (4 * (2 * alpha + 1)))
    assert abs(draws.mean() - 0.5) < 3 * sd / math.sqrt(len(draws))


def test_perturb_zero_sigma_is_identity():
    assert M.perturb_lambda(0.42, 0.0, np.random.default_rng(0)) == 0.42


def test_perturb_clamps_at_zero():
    rng = np.random.default_rng(4)
    vals = [M.perturb_lambda(0.0, 0.2, rng) for _ in range(1000)]
    assert min(vals) == 0.0 and max(vals) <= 0.2


def test_perturb_uniform_moments():
    rng = np.random.default_rng(5)
    vals = np.array([M.perturb_lambda(0.5, 0.2, rng) for _ in range(100_000)])
    assert vals.min() >= 0.3 and vals.max() <= 0.7
    sd = 0.4 / math.sqrt(12)
    assert abs(vals.mean() - 0.5) < 3 * sd / math.sqrt(len(vals))


# -- sliced W1 -----------------------------------------------------------------

def exact_w1(a, b):
    """Brute-force optimal assignment between equal-size point sets."""
    n = len(a)
    cost = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n))) / n


def test_identical_sets_distance_zero():
    a = np.random.default_rng(6).normal(size=(10, 5))
    assert M.domain_distance(a, a.copy()) < 1e-12


def test_one_dimensional_point_masses():
    assert M.domain_distance([[0.0]], [[3.0]]) == pytest.approx(3.0, abs=1e-12)


def test_one_dimensional_is_exact():
    rng = np.random.default_rng(7)
    a, b = rng.normal(size=(7, 1)), rng.normal(size=(7, 1))
    assert M.domain_distance(a, b) == pytest.approx(exact_w1(a, b), abs=1e-12)


def test_unequal_sizes_one_dimensional():
    # {0, 1} against {0, 0.5, 1}: quantile functions differ on a third of the mass by 0.5
    d = M.domain_distance([[0.0], [1.0]], [[0.0], [0.5], [1.0]])
    assert d == pytest.approx(1 / 3 * 0.5, abs=1e-12)


def test_translation_is_exact_in_any_dimension():
    rng = np.random.default_rng(8)
    a = rng.normal(size=(12, 6))
    v = rng.normal(size=6)
    d = M.domain_distance(a, a + v, projections=20_000, rng=np.random.default_rng(0))
    assert d == pytest.approx(np.linalg.norm(v), rel=0.03)


def test_projection_scale_matches_monte_carlo():
    rng = np.random.default_rng(9)
    for dim in (2, 3, 16):
        th = rng.normal(size=(200_000, dim))
        th /= np.linalg.norm(th, axis=1, keepdims=True)
        assert M.projection_scale(dim) == pytest.approx(np.abs(th[:, 0]).mean(), rel=0.01)
    assert M.projection_scale(2) == pytest.approx(2 / math.pi, abs=1e-15)


def test_small_sets_match_hungarian():
    from scipy.optimize import linear_sum_assignment

    rng = np.random.default_rng(10)
    ratios = []
    for _ in range(50):
        n = int(rng.integers(2, 5))
        a = rng.normal(size=(n, 2))
        b = a + rng.normal(size=2) + rng.normal(0, 0.3, (n, 2))
        cost = np.linalg.norm(a[:, None] - b[None], axis=-1)
        r, c = linear_sum_assignment(cost)
        ref = cost[r, c].mean()
        assert ref == pytest.approx(exact_w1(a, b), abs=1e-12)
        ratios.append(M.domain_distance(a, b, projections=64, rng=rng) / ref)
    assert abs(np.mean(ratios) - 1) <= 0.10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_pseudometric(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=(6, 3)) + rng.normal(size=3) for _ in range(3))

    def d(x, y):
        return M.domain_distance(x, y, rng=np.random.default_rng(1))

    assert abs(d(a, b) - d(b, a)) < 1e-12
    assert d(a, a) < 1e-12
    assert d(a, c) <= d(a, b) + d(b, c) + 1e-9


def test_empty_set_rejected():
    with pytest.raises(ContractError):
        M.domain_distance(np.zeros((0, 2)), np.zeros((3, 2)))


# -- schedule ------------------------------------------------------------------

def test_equal_distances_give_exp_minus_ten():
    s = M.update_schedule(M.MixupSchedule(total=10), 2.5, 2.5, 0.05)
    assert abs(s.q - math.exp(-10)) < 1e-12
    assert s.lambda2 == pytest.approx(0.1, abs=1e-4)


def test_zero_source_distance_freezes_lambda():
    s = M.update_schedule(M.MixupSchedule(lambda2=0.3, n=1, total=5), 0.0, 1.0, 0.05)
    assert s.q == 1.0 and s.lambda2 == 0.3 and s.n == 2


def test_both_distances_zero_hold_state():
    s = M.MixupSchedule(lambda2=0.3, n=1, total=5)
    assert M.update_schedule(s, 0.0, 0.0, 0.05) is s


def test_schedule_rejects_negative_distance_and_overrun():
    with pytest.raises(ContractError):
        M.update_schedule(M.MixupSchedule(total=3), -1.0, 1.0, 0.05)
    with pytest.raises(ContractError):
        M.update_schedule(M.MixupSchedule(n=3, total=3), 1.0, 1.0, 0.05)


def simulate(total, q_of_step, start=0.0):
    lam, out = start, []
    for n in range(1, total + 1):
        q = q_of_step(n)
        lam = n * (1 - q) / total + q * lam
        out.append(lam)
    return np.array(out)


def test_schedule_matches_closed_form_simulation():
    rng = np.random.default_rng(11)
    total = 50
    ds, dt = rng.uniform(0.01, 3, total), rng.uniform(0.01, 3, total)
    s = M.MixupSchedule(total=total)
    got = []
    for i in range(total):
        s = M.update_schedule(s, ds[i], dt[i], 0.05)
        got.append(s.lambda2)
    ref = simulate(total, lambda n: math.exp(-ds[n - 1] / ((ds[n - 1] + dt[n - 1]) * 0.05)))
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-15)


@pytest.mark.parametrize("q", [1e-3, 0.2, 0.5, 0.9, 0.999])
def test_constant_q_is_monotone(q):
    lam = simulate(100, lambda n: q)
    assert np.all(np.diff(lam) >= 0) and lam[-1] <= 1


def test_random_q_stays_in_unit_interval():
    rng = np.random.default_rng(12)
    s = M.MixupSchedule(total=1000)
    for _ in range(1000):
        ds, dt = rng.exponential(size=2)
        s = M.update_schedule(s, ds, dt, float(rng.uniform(0.01, 1)))
        assert 0 <= s.lambda2 <= 1


# -- losses --------------------------------------------------------------------

def test_source_losses_endpoint():
    rng = np.random.default_rng(13)
    zs, zq = rng.normal(size=(4, 3)), rng.normal(size=(6, 3))
    ys, yq = np.array([0, 0, 1, 1]), np.array([0, 1, 0, 1, 0, 1])
    perm = rng.permutation(6)
    l_fsl, l_mx = M.source_losses_from_embeddings(zs, ys, zq, yq, 2, 1.0, perm)
    assert l_mx.item() == pytest.approx(l_fsl.item(), abs=1e-14)


def test_source_losses_collapse_give_two_log_n():
    z = np.ones((6, 3))
    l_fsl, l_mx = M.source_losses_from_embeddings(z, [0, 1, 2, 0, 1, 2], z, [0, 1, 2, 0, 1, 2],
                                                  3, 0.4, np.arange(6)[::-1])
    assert (l_fsl + l_mx).item() == pytest.approx(2 * math.log(3), abs=1e-12)


def test_source_losses_hand_instance():
    zs = np.array([[0.0, 0.0], [2.0, 0.0]])
    zq = np.array([[0.5, 0.0], [1.5, 0.0]])
    lam = 0.25
    l_fsl, l_mx = M.source_losses_from_embeddings(zs, [0, 1], zq, [0, 1], 2, lam, np.array([1, 0]))
    # each query is 0.5 from its own prototype and 1.5 from the other
    ce_true = math.log1p(math.exp(-2.0))
    assert l_fsl.item() == pytest.approx(ce_true, abs=1e-14)
    # mixed row 0: z = 0.25*0.5 + 0.75*1.5 = 1.25, label [0.25, 0.75]
    # mixed row 1: z = 0.75, label [0.75, 0.25]; both symmetric around 1
    d0, d1 = 1.25 ** 2, 0.75 ** 2
    lse = math.log(math.exp(-d0) + math.exp(-d1))
    row = -(0.25 * (-d0 - lse) + 0.75 * (-d1 - lse))
    assert l_mx.item() == pytest.approx(row, abs=1e-14)


def test_intermediate_endpoint_reduces_to_source_ce():
    rng = np.random.default_rng(14)
    zss, zts = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    zsq, ztq = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    ys = np.array([0, 0, 1, 1])
    l_in, l_emb = M.intermediate_losses_from_embeddings(
        zss, ys, zts, ys, zsq, ys, ztq, ys, zsq, 2, 2, 1.0)
    # union space: source classes 0-1, target classes 2-3
    ref = fsl_loss_from_embeddings(np.vstack([zss, zts]), np.r_[ys, ys + 2], zsq, ys, 4)
    assert l_in.item() == pytest.approx(ref.item(), abs=1e-13)
    assert l_emb.item() == pytest.approx(ref.item(), abs=1e-13)


def test_intermediate_hand_pair():
    zss, zts = np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]])
    zsq, ztq = np.array([[0.0, 1.0]]), np.array([[2.0, 1.0]])
    lam = 0.5
    z_in = np.array([[1.0, 0.0]])
    l_in, l_emb = M.intermediate_losses_from_embeddings(
        zss, [0], zts, [0], zsq, [0], ztq, [0], z_in, 1, 1, lam)
    # z_in is equidistant from both prototypes: CE = log 2
    assert l_in.item() == pytest.approx(math.log(2), abs=1e-14)
    # z_mix = (1, 1) is also equidistant
    assert l_emb.item() == pytest.approx(math.log(2), abs=1e-14)


def _episode(rng, n, k, q, cfg=TINY, offset=0.0):
    shape = (cfg.patch_extent, cfg.patch_extent, cfg.bands)
    sy, qy = np.repeat(np.arange(n), k), np.repeat(np.arange(n), q)
    sx = rng.normal(size=(n * k,) + shape) + sy[:, None, None, None] + offset
    qx = rng.normal(size=(n * q,) + shape) + qy[:, None, None, None] + offset
    return Episode(sx, sy, qx, qy, list(range(n)))


def test_source_phase_loss_gradients_flow():
    rng = np.random.default_rng(15)
    params = E.init_params(TINY, rng)
    ep = _episode(rng, 2, 2, 3)
    with T.Tape() as tape:
        loss = M.source_phase_loss(ep, params, M.MixupConfig(), rng)
    g = tape.backward(loss, params.trainable())
    assert np.isfinite(loss.item()) and loss.item() > 0
    assert any(np.abs(v.data).max() > 0 for v in g.values())


def test_intermediate_phase_loss_requires_pseudo_labels():
    rng = np.random.default_rng(16)
    params = E.init_params(TINY, rng)
    src, tgt = _episode(rng, 2, 2, 3), _episode(rng, 2, 2, 3)
    tgt.query_y = np.full(len(tgt.query_y), -1)
    with pytest.raises(ContractError, match="pseudo-labels"):
        M.intermediate_phase_loss(src, tgt, params, 0.5, rng)


def test_intermediate_phase_loss_shapes_and_endpoint():
    rng = np.random.default_rng(17)
    params = E.init_params(TINY, rng)
    src, tgt = _episode(rng, 2, 2, 4), _episode(rng, 2, 2, 3, offset=0.5)
    step = M.intermediate_phase_loss(src, tgt, params, 1.0, np.random.default_rng(0))
    i, j = step.pairs
    assert len(i) == len(j) == 6 and len(set(i)) == 6
    # at lambda=1 the input mix is the source query itself
    np.testing.assert_allclose(step.z_mixed_input, step.z_source, rtol=0, atol=1e-12)


def test_twin_domains_match_single_domain_loss():
    # identical pools: the target half of the union space mirrors the source half
    rng = np.random.default_rng(18)
    params = E.init_params(TINY, rng)
    ep = _episode(rng, 2, 2, 3)
    vals = [M.intermediate_phase_loss(ep, ep, params, 0.5, np.random.default_rng(s)).loss.item()
            for s in range(5)]
    assert np.all(np.isfinite(vals)) and np.std(vals) < 0.5 * np.mean(vals)
