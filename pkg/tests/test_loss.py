import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from contrastlab import loss as L
from contrastlab import tensor as T

from oracles import naive_similarity, naive_three_view_loss, unit_rows


def constant_sims(n, value=0.3, aux=True):
    full = np.full((n, n), value)
    return L.ScaledSimilarities(0.1, full.copy(), full.copy(), full.copy(),
                                full.copy() if aux else None, full.copy() if aux else None)


def random_embeddings(seed, n, d, aux=True):
    rng = np.random.default_rng(seed)
    return L.BatchEmbeddings(unit_rows(rng, n, d), unit_rows(rng, n, d), unit_rows(rng, n, d) if aux else None)


class TestSimilarityMatrices:
    def test_identical_views_have_unit_diagonal(self):
        x = unit_rows(np.random.default_rng(0), 5, 4)
        sims = L.similarity_matrices(L.BatchEmbeddings(x, x), 1.0)
        np.testing.assert_allclose(np.diag(sims.xy), 1.0, atol=1e-12)

    def test_orthogonal_rows(self):
        sims = L.similarity_matrices(L.BatchEmbeddings(np.eye(3), np.eye(3)), 0.5)
        off = ~np.eye(3, dtype=bool)
        assert not sims.xy[off].any()

    def test_matches_double_loop(self):
        emb = random_embeddings(1, 4, 8)
        sims = L.similarity_matrices(emb, 0.1)
        for name, (a, b) in {"xy": (emb.x, emb.y), "xx": (emb.x, emb.x), "yy": (emb.y, emb.y),
                             "zx": (emb.z, emb.x), "zy": (emb.z, emb.y)}.items():
            np.testing.assert_allclose(getattr(sims, name), naive_similarity(a, b, 0.1), atol=1e-6)

    @pytest.mark.parametrize("tau", [0.0, -0.1])
    def test_rejects_bad_temperature(self, tau):
        with pytest.raises(L.ParameterError):
            L.similarity_matrices(random_embeddings(0, 3, 4), tau)

    def test_rejects_non_unit_rows(self):
        with pytest.raises(ValueError):
            L.BatchEmbeddings(np.ones((3, 2)), np.ones((3, 2)))

    def test_rejects_single_image(self):
        with pytest.raises(L.BatchSizeError):
            L.BatchEmbeddings(np.eye(1, 3), np.eye(1, 3))


class TestClosedForms:
    def test_two_images(self):
        report = L.gnt_xent(constant_sims(2))
        assert report.l_xy == pytest.approx(math.log(4), abs=1e-12)
        assert report.l_zx == pytest.approx(0.0, abs=1e-12)
        assert report.l_zy == pytest.approx(0.0, abs=1e-12)
        assert report.total == pytest.approx(1.3863, abs=1e-4)

    @pytest.mark.parametrize("n", [2, 3, 5, 17])
    def test_all_equal(self, n):
        report = L.gnt_xent(constant_sims(n, value=-4.2))
        assert abs(report.l_xy - math.log(4 * (n - 1))) <= 1e-9
        assert abs(report.l_zx - 2 * math.log(n - 1)) <= 1e-9
        assert abs(report.l_zy - 2 * math.log(n - 1)) <= 1e-9


class TestOracleEquivalence:
    @pytest.mark.parametrize("kind", L.LOSS_KINDS)
    def test_random_n8_d16(self, kind):
        emb = random_embeddings(3, 8, 16)
        report = L.contrastive_loss(L.similarity_matrices(emb, 0.1), kind)
        total, lxy, lzx, lzy = naive_three_view_loss(emb.x, emb.y, emb.z, 0.1, kind)
        assert report.total == pytest.approx(total, abs=1e-6)
        assert report.per_component == pytest.approx((lxy, lzx, lzy), abs=1e-6)

    def test_total_is_mean_of_components(self):
        report = L.gnt_xent(L.similarity_matrices(random_embeddings(4, 6, 5), 0.2))
        assert report.total == pytest.approx(report.l_xy + report.l_zx + report.l_zy, abs=1e-12)

    def test_two_view_has_zero_aux_components(self):
        emb = random_embeddings(5, 6, 5, aux=False)
        report = L.gnt_xent(L.similarity_matrices(emb, 0.1))
        assert report.l_zx == 0.0 and report.l_zy == 0.0
        assert report.total == pytest.approx(naive_three_view_loss(emb.x, emb.y, None, 0.1)[0], abs=1e-9)

    def test_doubling_temperature(self):
        emb = random_embeddings(6, 5, 6)
        a = L.similarity_matrices(emb, 0.1)
        b = L.similarity_matrices(emb, 0.2)
        np.testing.assert_allclose(b.xy, a.xy / 2, atol=1e-12)
        for tau in (0.1, 0.2):
            got = L.gnt_xent(L.similarity_matrices(emb, tau)).total
            assert got == pytest.approx(naive_three_view_loss(emb.x, emb.y, emb.z, tau)[0], abs=1e-6)
        # softmax weights over the zx row negatives follow the halved inputs
        s = np.array(naive_similarity(emb.z, emb.x, 0.2))
        t = L.gnt_xent(b).terms["zx_row"]
        for i in range(5):
            negs = np.array([s[i][j] for j in range(5) if j != i])
            expected = np.exp(negs) / np.exp(negs).sum()
            np.testing.assert_allclose(t.grad_negs[i][t.neg_mask[i]], expected, atol=1e-9)

    def test_unknown_kind(self):
        with pytest.raises(L.ParameterError):
            L.contrastive_loss(constant_sims(3), "triplet")


class TestGradients:
    def test_positive_gradients_are_constant(self):
        emb = random_embeddings(7, 6, 8)
        grads = L.similarity_grads(L.similarity_matrices(emb, 0.1))
        assert np.all(np.diag(grads["xy"]) == -1.0)
        assert np.all(np.diag(grads["zx"]) == -2.0)
        assert np.all(np.diag(grads["zy"]) == -2.0)

    def test_single_negative_gets_unit_weight(self):
        sims = L.similarity_matrices(random_embeddings(8, 2, 4), 0.1)
        report = L.gnt_xent(sims)
        for name in ("zx_row", "zx_col", "zy_row", "zy_col"):
            t = report.terms[name]
            np.testing.assert_array_equal(t.grad_negs[t.neg_mask], 1.0)

    def test_negative_weights_sum_to_one(self):
        report = L.gnt_xent(L.similarity_matrices(random_embeddings(9, 16, 32), 0.1))
        for t in report.terms.values():
            np.testing.assert_allclose(t.grad_negs.sum(axis=1), 1.0, atol=1e-12)
            assert not t.grad_negs[~t.neg_mask].any()

    @pytest.mark.parametrize("kind", L.LOSS_KINDS)
    def test_similarity_grads_vs_finite_differences(self, kind):
        sims = L.similarity_matrices(random_embeddings(10, 6, 8), 0.1)
        analytic = L.similarity_grads(sims, kind)
        for key in ("xy", "xx", "yy", "zx", "zy"):
            def f(v, key=key):
                return L.contrastive_loss(L.ScaledSimilarities(**{**sims.__dict__, key: v}), kind).total * sims.n
            numeric = T.finite_difference_gradient(f, getattr(sims, key))
            assert T.relative_error(analytic[key], numeric) <= 1e-6

    @pytest.mark.parametrize("kind", L.LOSS_KINDS)
    def test_embedding_grads_vs_finite_differences(self, kind):
        emb = random_embeddings(11, 5, 6)
        grads = L.full_loss_backward(emb, 0.1, kind)
        mats = [emb.x, emb.y, emb.z]
        for k in range(3):
            def f(v, k=k):
                parts = [v if j == k else mats[j] for j in range(3)]
                return L.contrastive_loss(L.similarity_matrices(L.BatchEmbeddings(*parts, check_norm=False), 0.1), kind).total
            assert T.relative_error(grads[k], T.finite_difference_gradient(f, mats[k])) <= 1e-5

    def test_batch_permutation_permutes_gradients(self):
        emb = random_embeddings(12, 7, 5)
        perm = np.random.default_rng(0).permutation(7)
        base = L.full_loss_backward(emb, 0.1)
        shuffled = L.full_loss_backward(L.BatchEmbeddings(emb.x[perm], emb.y[perm], emb.z[perm]), 0.1)
        for g, gp in zip(base, shuffled):
            np.testing.assert_allclose(gp, g[perm], atol=1e-12)

    def test_tape_wrapper_matches_direct(self):
        emb = random_embeddings(13, 4, 6)
        leaves = [T.Tensor(m, requires_grad=True) for m in (emb.x, emb.y, emb.z)]
        out, report = L.loss_on_tape(*leaves, 0.1)
        out.backward()
        for leaf, g in zip(leaves, L.full_loss_backward(emb, 0.1)):
            np.testing.assert_allclose(leaf.grad, g, atol=1e-12)
        assert out.item() == pytest.approx(report.total)


class TestSingleTerms:
    def test_nt_xent_equal_pair(self):
        assert L.nt_xent(0.7, [0.7])[0] == pytest.approx(math.log(2), abs=1e-12)

    def test_nt_xent_direct_formula(self):
        loss, (dpos, dnegs) = L.nt_xent(1.0, [0.0, 0.0])
        e = math.e
        assert loss == pytest.approx(-math.log(e / (e + 2)), abs=1e-12)
        assert loss == pytest.approx(0.5514, abs=1e-4)
        assert dpos == pytest.approx(e / (e + 2) - 1, abs=1e-12)
        np.testing.assert_allclose(dnegs, [1 / (e + 2)] * 2, atol=1e-12)

    def test_nt_xent_vanishes_for_large_positive(self):
        loss, (dpos, _) = L.nt_xent(60.0, [0.0, 1.0])
        assert loss < 1e-20 and abs(dpos) < 1e-20

    @pytest.mark.parametrize("fn", [L.nt_xent, L.gnt_xent_term])
    def test_empty_negatives(self, fn):
        with pytest.raises(L.ParameterError):
            fn(1.0, [])

    def test_gnt_unbounded_below(self):
        values = [L.gnt_xent_term(gap, [0.0, 0.0, 0.0])[0] for gap in np.linspace(0, 200, 41)]
        assert all(b < a for a, b in zip(values, values[1:]))
        assert values[-1] < -190

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-100, 100), st.lists(st.floats(-100, 100), min_size=1, max_size=12))
    def test_gnt_term_invariants(self, pos, negs):
        loss, (dpos, dnegs) = L.gnt_xent_term(pos, negs)
        assert math.isfinite(loss)
        assert dpos == -1.0
        assert np.all(dnegs >= 0)
        assert abs(dnegs.sum() - 1.0) <= 1e-9

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-100, 100), st.lists(st.floats(-100, 100), min_size=1, max_size=12))
    def test_nt_term_bounded_below(self, pos, negs):
        loss, (dpos, dnegs) = L.nt_xent(pos, negs)
        assert loss >= 0.0
        assert -1.0 <= dpos <= 0.0
        assert abs(dpos + dnegs.sum()) <= 1e-9


class TestStability:
    @pytest.mark.parametrize("kind", L.LOSS_KINDS)
    def test_extreme_similarities_tau_001(self, kind):
        n, tau = 6, 0.01
        x = np.tile(np.eye(1, 4), (n, 1))
        emb = L.BatchEmbeddings(x, x.copy(), -x)  # sims are +-1/tau everywhere
        report = L.contrastive_loss(L.similarity_matrices(emb, tau), kind)
        assert math.isfinite(report.total)
        assert all(np.isfinite(g).all() for g in report.grads.values())

    def test_random_at_low_temperature(self):
        report = L.gnt_xent(L.similarity_matrices(random_embeddings(14, 16, 8), 0.01))
        emb = random_embeddings(14, 16, 8)
        assert report.total == pytest.approx(naive_three_view_loss(emb.x, emb.y, emb.z, 0.01)[0], rel=1e-9)


def test_diagnostics_use_raw_cosines():
    emb = random_embeddings(15, 5, 4)
    report = L.gnt_xent(L.similarity_matrices(emb, 0.1))
    pos = np.concatenate([np.sum(emb.x * emb.y, 1), np.sum(emb.z * emb.x, 1), np.sum(emb.z * emb.y, 1)])
    assert report.mean_pos_sim == pytest.approx(pos.mean(), abs=1e-12)
    assert -1.0 <= report.mean_neg_sim <= 1.0
    assert report.grad_pos == -1.0
    assert report.grad_neg_sum == pytest.approx(1.0, abs=1e-12)
