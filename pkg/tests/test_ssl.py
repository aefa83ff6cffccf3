from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from implicit_meta import model as M
from implicit_meta import ssl as S
from implicit_meta.metaopt import MetaOptState

from conftest import central_diff, rel_err

CFG = S.SslConfig()


@pytest.fixture(scope="module")
def toy():
    return S.gen_ssl_toy(0)


def trained_base(data, steps=300, seed=0):
    p = M.MlpParams.init(np.random.default_rng(seed), 2, 16, data.labeled.num_classes)
    for _ in range(steps):
        p = S.supervised_step(p, data.labeled.batch(), 0.2)
    return p


def test_gen_ssl_toy_structure(toy):
    again = S.gen_ssl_toy(0)
    np.testing.assert_array_equal(toy.unlabeled, again.unlabeled)
    np.testing.assert_array_equal(toy.labeled.inputs, again.labeled.inputs)
    assert toy.ood_mask.shape == (len(toy.unlabeled),)
    assert toy.ood_mask.sum() == len(toy.unlabeled_ood)
    from implicit_meta.data import class_means
    means = class_means(4, 2, 2.0)
    centre = toy.unlabeled_ood.mean(0)
    assert np.min(np.linalg.norm(means - centre, axis=1)) > 3 * 0.35
    rows = lambda x: {tuple(r) for r in x}
    assert not (rows(toy.labeled.inputs) & rows(toy.val.inputs)) and not (rows(toy.val.inputs) & rows(toy.test.inputs))
    with pytest.raises(ValueError):
        S.gen_ssl_toy(0, ood_center=(2.0, 0.1))


def test_fully_supervised_separable(toy):
    from implicit_meta.data import class_means
    means = class_means(4, 2, 2.0)
    y = np.argmin(((toy.unlabeled_in[:, None] - means) ** 2).sum(-1), axis=1)
    p = M.MlpParams.init(np.random.default_rng(0), 2, 16, 4)
    for _ in range(1500):
        p = S.supervised_step(p, M.Batch(toy.unlabeled_in, y), 0.5)
    assert M.accuracy(p, toy.test.batch()) > 0.95


def test_augment_examples():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((10_000, 3))
    np.testing.assert_array_equal(S.weak_augment(x, rng, 0.0), x)
    np.testing.assert_array_equal(S.strong_augment(x, rng, 0.0), x)
    d2 = np.sum((S.strong_augment(x, rng, 0.5) - x) ** 2, axis=1).mean()
    assert d2 == pytest.approx(3 * 0.25, rel=0.05)
    moved = np.any(S.weak_augment(x, rng, 0.1) != x, axis=1)
    assert moved.mean() == pytest.approx(0.5, abs=0.02)
    w = S.weak_augment(x, rng, 0.1)
    d2w = np.sum((w - x) ** 2, axis=1)[np.any(w != x, axis=1)].mean()
    assert d2w == pytest.approx(3 * 0.01, rel=0.05)


def test_config_validation():
    with pytest.raises(ValueError):
        S.SslConfig(tau=0.0)
    with pytest.raises(ValueError):
        S.SslConfig(sigma_weak=0.5, sigma_strong=0.1)


def test_unsup_loss_threshold_cases(toy):
    p = trained_base(toy, 50)
    losses, mask = S.fixmatch_unsup_loss(p, toy.unlabeled[:20], 1.0, np.random.default_rng(0))
    assert not mask.any() and np.all(losses == 0)
    confident = M.MlpParams(np.zeros((2, 1)), np.zeros(1), np.zeros((1, 2)), np.array([10.0, -10.0]))
    views = S.Views(np.zeros((3, 2)), np.zeros((3, 2)))
    t = S.unsup_terms(confident, views, 0.95)
    assert t.mask.all() and np.all(t.losses < 1e-8) and np.all(t.pseudo == 0)


def test_pseudo_label_ties_to_lowest_index():
    flat = M.MlpParams.zeros(2, 1, 3)
    t = S.unsup_terms(flat, S.Views(np.ones((2, 2)), np.ones((2, 2))), 0.1)
    assert t.pseudo.tolist() == [0, 0]


def test_unsup_loss_matches_naive_loop(toy):
    p = trained_base(toy, 200)
    views = S.draw_views(toy.unlabeled[:40], np.random.default_rng(1), CFG)
    t = S.unsup_terms(p, views, 0.8)
    for i in range(40):
        q = M.softmax(M.mlp_forward(p, views.weak[i:i + 1]))[0]
        on = q.max() >= 0.8
        assert t.mask[i] == on
        ref = M.cross_entropy(M.mlp_forward(p, views.strong[i:i + 1]), np.array([int(np.argmax(q))])) if on else 0
        assert t.losses[i] == pytest.approx(ref, abs=1e-12)
    assert t.mask.any()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), t1=st.floats(0.3, 1.0), t2=st.floats(0.3, 1.0))
def test_mask_monotone_in_tau(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    rng = np.random.default_rng(seed)
    p = M.MlpParams.init(rng, 2, 8, 3)
    views = S.Views(3 * rng.standard_normal((30, 2)), rng.standard_normal((30, 2)))
    assert not np.any(S.unsup_terms(p, views, hi).mask & ~S.unsup_terms(p, views, lo).mask)


def test_cn_zero_is_supervised(toy):
    p = trained_base(toy, 100)
    cn0 = S.constant_cn(2, 8, 0.0)
    lab = toy.labeled.batch()
    a = S.ssl_inner_step(p, cn0, lab, toy.unlabeled[:64], 0.5, 0.1, np.random.default_rng(0), CFG)
    b = S.supervised_step(p, lab, 0.1)
    assert np.max(np.abs(a.flat() - b.flat())) <= 1e-12


def test_cn_one_trajectory_bit_identical(toy):
    cn1 = S.constant_cn(2, 8, 1.0)
    p0 = trained_base(toy, 100)
    cfg = replace(CFG, tau=0.5)
    a = S._train_base(p0, cn1, toy, cfg, 40, np.random.default_rng(5))
    b = S._train_base(p0, None, toy, cfg, 40, np.random.default_rng(5))
    np.testing.assert_array_equal(a.flat(), b.flat())


def test_weight_two_doubles_instance_contribution(toy):
    p = trained_base(toy, 200)
    views = S.draw_views(toy.unlabeled[:8], np.random.default_rng(3), CFG)
    lab = toy.labeled.batch()
    t = S.unsup_terms(p, views, 0.5)
    i = int(np.flatnonzero(t.mask)[0])
    ones = np.ones(8)
    twos = ones.copy()
    twos[i] = 2.0
    zero_i = ones.copy()
    zero_i[i] = 0.0
    g = {k: S.ssl_loss_grad(p, lab, views, w, 0.5)[1].flat() for k, w in (("1", ones), ("2", twos), ("0", zero_i))}
    np.testing.assert_allclose(g["2"] - g["1"], g["1"] - g["0"], atol=1e-12)
    # and the analytic gradient is the derivative of the composite loss
    fd = central_diff(lambda x: S.ssl_loss_grad(p.like(x), lab, views, twos, 0.5)[0], p.flat())
    assert rel_err(g["2"], fd) < 1e-4


def test_cn_warmup(toy):
    rng = np.random.default_rng(0)
    one = S.constant_cn(2, 8, 1.0)
    res = S.cn_warmup(one, toy.unlabeled, 5, 1e-2, rng, CFG)
    np.testing.assert_array_equal(res.cn.flat(), one.flat())
    cn = M.MlpParams.init(np.random.default_rng(1), 2, 16, 1)
    res = S.cn_warmup(cn, toy.unlabeled, 2000, 1e-2, rng, CFG)
    assert res.complete and res.in_band_fraction >= 0.95
    v = np.array(res.variance_trajectory)
    k = max(len(v) // 4, 1)
    assert v[-k:].mean() < v[:k].mean()
    with pytest.raises(ValueError):
        S.cn_warmup(cn, toy.unlabeled, 0, 1e-2, rng, CFG)


def test_cn_warmup_incomplete_warns(toy, caplog):
    cn = M.MlpParams.init(np.random.default_rng(1), 2, 16, 1)
    res = S.cn_warmup(cn, toy.unlabeled, 1, 1e-4, np.random.default_rng(0), CFG)
    assert not res.complete
    assert "incomplete" in caplog.text


def test_meta_update_zero_val_gradient(toy):
    flat = M.MlpParams.zeros(2, 8, 4)
    val = M.Batch(np.zeros((4, 2)), np.arange(4))
    cn = M.MlpParams.init(np.random.default_rng(0), 2, 8, 1)
    new = S.ssl_meta_update(flat, cn, val, toy.unlabeled[:32], 0.1, MetaOptState(lr=1e-2),
                            np.random.default_rng(0), CFG)
    np.testing.assert_allclose(new.flat(), cn.flat(), atol=1e-8)


def test_masked_instance_contributes_nothing(toy):
    p = trained_base(toy, 100)
    cn = M.MlpParams.init(np.random.default_rng(0), 2, 8, 1)
    views = S.draw_views(toy.unlabeled[:1], np.random.default_rng(0), CFG)
    hg = S.ssl_hypergradient(p, cn, toy.val.batch(), views, tau=1.0)
    assert np.all(hg == 0)


def test_meta_update_owns_only_cn(toy):
    p = trained_base(toy, 100)
    before = p.flat().copy()
    cn = M.MlpParams.init(np.random.default_rng(0), 2, 8, 1)
    cn_before = cn.flat().copy()
    S.ssl_meta_update(p, cn, toy.val.batch(), toy.unlabeled[:32], 0.5, MetaOptState(lr=1e-2),
                      np.random.default_rng(0), CFG)
    np.testing.assert_array_equal(p.flat(), before)
    np.testing.assert_array_equal(cn.flat(), cn_before)
    S.ssl_inner_step(p, cn, toy.labeled.batch(), toy.unlabeled[:32], 0.5, 0.1, np.random.default_rng(0), CFG)
    np.testing.assert_array_equal(cn.flat(), cn_before)


def test_hypergradient_one_step_finite_difference(toy):
    p = trained_base(toy, 300)
    cn = M.MlpParams.init(np.random.default_rng(4), 2, 8, 1)
    cn = cn.like(cn.flat() + np.r_[np.zeros(cn.size - 1), 1.0])
    views = S.draw_views(toy.unlabeled[::10], np.random.default_rng(2), CFG)
    lab, val, tau, lr = toy.labeled.batch(), toy.val.batch(), 0.6, 1e-4
    assert S.unsup_terms(p, views, tau).mask.sum() > 5

    def val_after_step(omega):
        weights = S.cn_forward(cn.like(omega), views.weak)
        _, g, _ = S.ssl_loss_grad(p, lab, views, weights, tau)
        return M.val_loss(p.like(p.flat() - lr * g.flat()), val)

    fd = central_diff(val_after_step, cn.flat(), h=1e-4) / lr
    hg = S.ssl_hypergradient(p, cn, val, views, tau)
    assert rel_err(hg, fd) < 1e-2


def test_hypergradient_linear_in_alignment(toy):
    p = trained_base(toy, 300)
    cn = M.MlpParams.init(np.random.default_rng(4), 2, 8, 1)
    views = S.draw_views(toy.unlabeled[:16], np.random.default_rng(2), CFG)
    d = np.random.default_rng(0).standard_normal(p.size)
    s = S.instance_alignment(p, views, 0.5, d)
    np.testing.assert_allclose(S.instance_alignment(p, views, 0.5, 2 * d), 2 * s, rtol=1e-12)
    per = [M.backprop(cn, views.weak[i:i + 1], np.array([[s[i]]])).flat() for i in range(16)]
    total = M.backprop(cn, views.weak, s[:, None]).flat()
    np.testing.assert_allclose(total, np.sum(per, axis=0), atol=1e-12)


def test_neumann_flag_runs(toy):
    p = trained_base(toy, 100)
    cn = M.MlpParams.init(np.random.default_rng(4), 2, 8, 1)
    views = S.draw_views(toy.unlabeled[:16], np.random.default_rng(2), CFG)
    from implicit_meta.hypergrad import ApproxSpec
    hg = S.ssl_hypergradient(p, cn, toy.val.batch(), views, 0.5, toy.labeled.batch(), ApproxSpec.neumann(2))
    assert hg.shape == (cn.size,) and np.all(np.isfinite(hg))
    with pytest.raises(ValueError):
        S.ssl_hypergradient(p, cn, toy.val.batch(), views, 0.5, None, ApproxSpec.neumann(2))


def test_run_without_meta_updates_matches_control(toy):
    cfg = replace(CFG, meta_every=10_000, total_steps=50, base_warmup_steps=20, cn_warmup_steps=50, phase2_steps=30)
    r = S.run_ssl_toy(cfg, toy)
    assert r.meta_updates == 0
    assert len(r.weight_original) == len(toy.unlabeled)
    rows = list(r.weight_rows())
    assert set(rows[0]) == {"instance_id", "is_ood", "weight_original", "weight_weak_augmented"}
    assert sum(row["is_ood"] for row in rows) == len(toy.unlabeled_ood)
