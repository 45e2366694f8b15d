import numpy as np
import pytest

import fashiongraph.autodiff as ad
from fashiongraph.autodiff import Tensor
from fashiongraph.dataio import SyntheticConfig, generate_synthetic, split_interactions
from fashiongraph.embed import ModelDims, init_model
from fashiongraph.graph import build_fashion_graph
from fashiongraph.propagate import forward
from fashiongraph.score import (
    OutfitMatrix,
    order_candidates,
    outfit_compat_score,
    rec_score,
    rview_attention,
    rview_compat,
    rview_result,
    rview_scores_tensor,
    score_items,
    score_outfit,
    view_scores,
)
from fashiongraph.train import TrainConfig, make_model

DIMS = ModelDims(d=8, d_v=6, d_t=4, d_h=5, heads=2, r_views=3, view_hidden=4)


def model(seed=0):
    return init_model(2, 2, 2, DIMS, seed)


def leaky(x, slope=0.2):
    return np.where(x >= 0, x, slope * x)


class TestRecScore:
    def test_orthogonal_is_zero(self):
        assert rec_score([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_unit_vector_self_dot(self):
        v = np.zeros(8)
        v[3] = 1.0
        assert rec_score(v, v) == 1.0

    def test_arithmetic(self):
        assert rec_score([1.0, 2.0], [3.0, 4.0]) == 11.0

    def test_dim_mismatch(self):
        with pytest.raises(ValueError):
            rec_score([1.0, 2.0], [1.0, 2.0, 3.0])


class TestRViewMaps:
    def test_single_item_rows_are_one(self):
        m = model()
        O = np.random.default_rng(0).normal(size=(1, 8))
        A = rview_attention(O, m)
        np.testing.assert_allclose(A, np.ones((3, 1)))

    def test_zero_outer_map_uniform(self):
        m = model()
        m.params["view_attn_out"].data[:] = 0.0
        O = np.random.default_rng(1).normal(size=(4, 8))
        A = rview_attention(O, m)
        np.testing.assert_allclose(A, np.full((3, 4), 0.25))

    def test_attention_matches_scratch(self):
        m = model(seed=2)
        O = np.random.default_rng(3).normal(size=(5, 8))
        W4 = m.params["view_attn_out"].data
        W5 = m.params["view_attn_in"].data
        logits = W4 @ leaky(W5 @ O.T)
        expected = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(rview_attention(O, m), expected, atol=1e-12)

    def test_compat_zero_outer_map(self):
        m = model()
        m.params["view_compat_out"].data[:] = 0.0
        O = np.random.default_rng(4).normal(size=(3, 8))
        np.testing.assert_array_equal(rview_compat(O, m), np.zeros((3, 3)))

    def test_compat_matches_scratch(self):
        m = model(seed=5)
        O = np.random.default_rng(6).normal(size=(4, 8))
        W6 = m.params["view_compat_out"].data
        W7 = m.params["view_compat_in"].data
        expected = np.tanh(W6 @ leaky(W7 @ O.T))
        np.testing.assert_allclose(rview_compat(O, m), expected, atol=1e-12)

    def test_compat_bounded_below_one_for_large_preactivation(self):
        m = model()
        m.params["view_compat_out"].data[:] = 1.0
        m.params["view_compat_in"].data[:] = 1.0
        O = np.full((2, 8), 0.4)
        # hidden = 3.2 each, pre-activation 12.8: large yet below the point
        # (~19) where float64 tanh rounds to exactly 1
        C = rview_compat(O, m)
        assert np.all(C < 1.0) and np.all(C > 0.999)

    def test_row_stochastic_and_bounds_random(self):
        m = model(seed=7)
        rng = np.random.default_rng(8)
        for _ in range(20):
            O = rng.normal(size=(rng.integers(1, 6), 8)) * rng.uniform(0.1, 5)
            A = rview_attention(O, m)
            C = rview_compat(O, m)
            np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-6)
            assert np.all(A >= 0)
            assert np.all(np.abs(C) <= 1.0)
            assert abs(outfit_compat_score(A, C)) < 1.0

    def test_dim_mismatch(self):
        m = model()
        with pytest.raises(ValueError):
            rview_attention(np.zeros((3, 9)), m)


class TestCompatScore:
    # Worked three-view example: per-view weighted scores and their mean.
    A_EXAMPLE = np.array([[0.6, 0.2, 0.2], [0.3, 0.5, 0.2], [0.1, 0.3, 0.6]])
    C_EXAMPLE = np.array([[0.8, 0.5, 0.2], [0.4, 0.7, 0.9], [0.3, 0.5, 0.3]])

    def test_worked_example_views(self):
        np.testing.assert_allclose(
            view_scores(self.A_EXAMPLE, self.C_EXAMPLE), [0.62, 0.65, 0.36], atol=1e-12
        )

    def test_worked_example_final(self):
        assert abs(outfit_compat_score(self.A_EXAMPLE, self.C_EXAMPLE) - 0.5433) < 1e-4

    def test_zero_compat_gives_zero(self):
        assert outfit_compat_score(self.A_EXAMPLE, np.zeros((3, 3))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            outfit_compat_score(self.A_EXAMPLE, np.zeros((2, 3)))


class TestScoreOutfit:
    def setup_method(self):
        self.ds = generate_synthetic(
            SyntheticConfig(n_users=6, n_outfits=8, n_items=20, interactions_per_user=5,
                            d_v=6, d_t=4),
            seed=9,
        )
        self.splits = split_interactions(self.ds, seed=9)
        self.graph = build_fashion_graph(self.ds, self.splits)
        self.cfg = TrainConfig(seed=9, d=8, d_h=5, view_hidden=4, r_views=3, heads=2)
        self.m = make_model(self.graph, self.ds, self.cfg)
        self.prop = forward(self.graph, self.ds, self.m)

    def test_deterministic(self):
        a = score_outfit(0, self.prop, self.m)
        b = score_outfit(0, self.prop, self.m)
        assert a == b

    def test_permutation_invariance(self):
        items = self.graph.outfit_items[0]
        fwd = score_items(items, self.prop, self.m)
        rev = score_items(list(reversed(items)), self.prop, self.m)
        np.testing.assert_allclose(fwd, rev, atol=1e-12)

    def test_bounded(self):
        for oid in self.ds.outfits:
            assert abs(score_outfit(oid, self.prop, self.m)) < 1.0

    def test_unknown_outfit(self):
        with pytest.raises(KeyError):
            score_outfit(999, self.prop, self.m)

    def test_rview_result_consistent(self):
        rows = [self.graph.item_index[i] for i in self.graph.outfit_items[2]]
        res = rview_result(OutfitMatrix(self.prop.h_item_star[rows]), self.m)
        assert res.score == pytest.approx(score_outfit(2, self.prop, self.m), abs=1e-12)

    def test_batched_tensor_path_matches_single(self):
        rows = [
            np.array([self.graph.item_index[i] for i in self.graph.outfit_items[o]])
            for o in (0, 1, 2)
        ]
        scores = rview_scores_tensor(self.m, Tensor(self.prop.h_item_star), rows).data
        for k, o in enumerate((0, 1, 2)):
            np.testing.assert_allclose(scores[k], score_outfit(o, self.prop, self.m),
                                       atol=1e-12)

    def test_view_parameter_gradients_match_finite_differences(self):
        rows = [
            np.array([self.graph.item_index[i] for i in self.graph.outfit_items[o]])
            for o in (0, 3)
        ]
        h = Tensor(self.prop.h_item_star)

        def value():
            with ad.no_grad():
                return float(ad.sum_(rview_scores_tensor(self.m, h, rows)).item())

        self.m.zero_grads()
        ad.sum_(rview_scores_tensor(self.m, h, rows)).backward()
        step = 1e-5
        for name in ("view_attn_in", "view_attn_out", "view_compat_in", "view_compat_out"):
            p = self.m.params[name]
            g = np.asarray(p.grad)
            for k in range(p.data.size):
                idx = np.unravel_index(k, p.data.shape)
                orig = p.data[idx]
                p.data[idx] = orig + step
                plus = value()
                p.data[idx] = orig - step
                minus = value()
                p.data[idx] = orig
                numeric = (plus - minus) / (2 * step)
                rel = abs(g[idx] - numeric) / max(1.0, abs(g[idx]), abs(numeric))
                assert rel < 1e-4, (name, idx)


def test_order_candidates_shift_invariance():
    rng = np.random.default_rng(0)
    ids = list(range(30))
    scores = {i: float(rng.normal()) for i in ids}
    base = order_candidates(ids, scores)
    shifted = order_candidates(ids, {i: s + 17.5 for i, s in scores.items()})
    assert base == shifted


def test_order_candidates_tie_breaks_by_id():
    scores = {5: 1.0, 2: 1.0, 9: 2.0}
    assert order_candidates(scores.keys(), scores) == [9, 2, 5]
