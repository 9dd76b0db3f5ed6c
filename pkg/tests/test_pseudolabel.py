"""Grouping, alignment, selection, agreement, and the masked loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import (
    brute_agree,
    brute_group,
    brute_select,
    brute_unsupervised_loss,
    cross_entropy_row,
)
from spikematch.objectives import softmax
from spikematch.pseudolabel import (
    CollectionSet,
    DaState,
    agreement_mask,
    build_collections,
    distribution_align,
    group_outputs,
    make_grouping,
    select_pseudo_labels,
    spread_collection_grad,
    unsupervised_loss,
    unsupervised_loss_grad,
)


class TestGrouping:
    def test_t4_m3_is_1_1_2(self):
        assert make_grouping(4, 3).segments == ((1,), (2,), (3, 4))

    def test_t8_m3_is_3_2_3(self):
        assert make_grouping(8, 3).sizes == (3, 2, 3)

    def test_m_equals_t_singletons(self):
        assert make_grouping(3, 3).segments == ((1,), (2,), (3,))

    def test_divisible_equal_blocks(self):
        assert make_grouping(8, 4).sizes == (2, 2, 2, 2)

    def test_m_greater_than_t_rejected(self):
        with pytest.raises(ValueError):
            make_grouping(3, 4)

    @given(T=st.integers(1, 16), data=st.data())
    @settings(max_examples=200)
    def test_partition_exactness(self, T, data):
        M = data.draw(st.integers(1, T))
        scheme = make_grouping(T, M)
        flat = [t for seg in scheme.segments for t in seg]
        assert flat == list(range(1, T + 1))  # contiguous, ordered, disjoint cover
        assert len(scheme.segments) == M
        if T % M == 0:
            assert set(scheme.sizes) == {T // M}


class TestGroupOutputs:
    def test_constant_rows(self):
        O = np.tile([1.0, 2.0], (4, 1))
        rows = group_outputs(O, make_grouping(4, 3))
        assert np.allclose(rows, [[1, 2]] * 3)

    def test_t2_m1_mean(self):
        rows = group_outputs(np.array([[1.0, 3.0], [3.0, 1.0]]), make_grouping(2, 1))
        assert np.allclose(rows, [[2.0, 2.0]])

    def test_t4_m3_layout(self):
        O = np.arange(8, dtype=float).reshape(4, 2)
        rows = group_outputs(O, make_grouping(4, 3))
        assert np.allclose(rows[0], O[0])
        assert np.allclose(rows[1], O[1])
        assert np.allclose(rows[2], (O[2] + O[3]) / 2)

    def test_matches_brute_force(self):
        gen = np.random.default_rng(0)
        for _ in range(50):
            T = int(gen.integers(1, 10))
            M = int(gen.integers(1, T + 1))
            O = gen.normal(size=(T, 3))
            scheme = make_grouping(T, M)
            assert np.allclose(
                group_outputs(O, scheme), brute_group(O.tolist(), scheme.segments)
            )

    def test_mismatched_steps_rejected(self):
        with pytest.raises(ValueError):
            group_outputs(np.zeros((3, 2)), make_grouping(4, 2))


class TestDistributionAlign:
    def test_identity_when_marginals_match(self):
        da = DaState.uniform(3)
        q = np.array([0.6, 0.3, 0.1])
        assert distribution_align(q, da) == pytest.approx(q, abs=1e-12)

    def test_hand_ratio(self):
        da = DaState(np.full(3, 1 / 3), np.array([0.5, 0.25, 0.25]))
        aligned = distribution_align(np.full(3, 1 / 3), da)
        assert aligned == pytest.approx([0.2, 0.4, 0.4])

    def test_update_moves_marginal(self):
        da = DaState.uniform(2, decay=0.5)
        da.update(np.array([[[1.0, 0.0]]]))
        assert da.p_model == pytest.approx([0.75, 0.25])

    def test_zero_marginal_clamped(self):
        da = DaState(np.array([0.5, 0.5]), np.array([0.0, 1.0]))
        aligned = distribution_align(np.array([0.5, 0.5]), da)
        assert np.all(np.isfinite(aligned)) and aligned.sum() == pytest.approx(1.0)

    def test_per_collection_marginals(self):
        da = DaState.uniform(2, num_collections=2, per_collection=True)
        da.update(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        assert da.p_model.shape == (2, 2)
        assert da.p_model[0, 0] > da.p_model[0, 1]
        assert da.p_model[1, 1] > da.p_model[1, 0]


class TestSelection:
    def test_picks_most_confident_peer(self):
        q = np.array(
            [
                [0.5, 0.3, 0.2],
                [0.7, 0.2, 0.1],
                [0.9, 0.05, 0.05],
            ]
        )
        q_hat, c_hat = select_pseudo_labels(q)
        assert np.allclose(q_hat[0], q[2])  # confidences of peers: 0.7 vs 0.9
        assert np.allclose(q_hat[1], q[2])
        assert np.allclose(q_hat[2], q[1])
        assert c_hat.tolist() == [0, 0, 0]

    def test_m2_swaps(self):
        q = np.array([[0.6, 0.4], [0.1, 0.9]])
        q_hat, _ = select_pseudo_labels(q)
        assert np.allclose(q_hat[0], q[1])
        assert np.allclose(q_hat[1], q[0])

    def test_tie_breaks_to_lowest_index(self):
        q = np.array(
            [
                [0.5, 0.5, 0.0],
                [0.7, 0.3, 0.0],
                [0.3, 0.7, 0.0],
            ]
        )
        q_hat, _ = select_pseudo_labels(q)
        assert np.allclose(q_hat[0], q[1])  # peers 1 and 2 tie at 0.7

    def test_m1_rejected(self):
        with pytest.raises(ValueError):
            select_pseudo_labels(np.array([[0.5, 0.5]]))

    def test_matches_brute_force(self):
        gen = np.random.default_rng(1)
        for _ in range(300):
            M = int(gen.integers(2, 6))
            C = int(gen.integers(2, 11))
            q = softmax(gen.normal(scale=2, size=(M, C)))
            q_hat, c_hat = select_pseudo_labels(q)
            bq, bc = brute_select(q.tolist())
            assert np.allclose(q_hat, bq)
            assert c_hat.tolist() == bc


class TestAgreement:
    def test_unanimous(self):
        q = np.eye(3)[[2, 2, 2]] * 0.8 + 0.1
        assert agreement_mask(q).tolist() == [1.0, 1.0, 1.0]

    def test_partial_agreement(self):
        # argmax classes (2, 1, 2): only m=2's peers {1, 3} agree.
        q = np.array(
            [
                [0.1, 0.2, 0.7],
                [0.1, 0.8, 0.1],
                [0.2, 0.2, 0.6],
            ]
        )
        assert agreement_mask(q).tolist() == [0.0, 1.0, 0.0]

    def test_m2_always_ones(self):
        gen = np.random.default_rng(2)
        for _ in range(20):
            q = softmax(gen.normal(size=(2, 5)))
            assert agreement_mask(q).tolist() == [1.0, 1.0]

    def test_m1_single_one(self):
        assert agreement_mask(np.array([[0.9, 0.1]])).tolist() == [1.0]

    def test_matches_brute_force(self):
        gen = np.random.default_rng(3)
        for _ in range(300):
            M = int(gen.integers(1, 6))
            C = int(gen.integers(2, 11))
            q = softmax(gen.normal(scale=2, size=(M, C)))
            assert agreement_mask(q).tolist() == brute_agree(q.tolist())


class TestBuildCollections:
    def _random_views(self, gen, n, m, c):
        return gen.normal(size=(n, m, c)), gen.normal(size=(n, m, c))

    def test_full_pipeline_matches_brute_force(self):
        gen = np.random.default_rng(4)
        gw, gs = self._random_views(gen, 6, 3, 4)
        cols = build_collections(gw, gs, da=None, mode="no_da")
        loss, used = unsupervised_loss(cols)
        oracle_loss, oracle_used = brute_unsupervised_loss(
            softmax(gw).tolist(), gs.tolist()
        )
        assert loss == pytest.approx(oracle_loss, abs=1e-10)
        assert used == oracle_used

    def test_fully_masked_is_zero(self):
        gw = np.zeros((2, 3, 3))
        gw[:, 0, 0] = 5.0  # collection argmaxes disagree everywhere
        gw[:, 1, 1] = 5.0
        gw[:, 2, 2] = 5.0
        cols = build_collections(gw, gw, da=None, mode="no_da")
        loss, used = unsupervised_loss(cols)
        assert loss == 0.0 and used == 0

    def test_single_sample_all_agree(self):
        gen = np.random.default_rng(5)
        gw = gen.normal(size=(1, 3, 4))
        gw[..., 2] += 10.0  # everyone agrees on class 2
        gs = gen.normal(size=(1, 3, 4))
        cols = build_collections(gw, gs, da=None, mode="no_da")
        loss, used = unsupervised_loss(cols)
        assert used == 3
        q = softmax(gw[0])
        expected = sum(
            cross_entropy_row(brute_select(q.tolist())[0][m], gs[0, m].tolist())
            for m in range(3)
        )
        assert loss == pytest.approx(expected, abs=1e-10)

    def test_threshold_gate_closes(self):
        gen = np.random.default_rng(6)
        gw = gen.normal(scale=0.01, size=(3, 3, 4))
        gw[..., 1] += 0.05  # agreement yes, confidence ~0.25 each
        gs = gen.normal(size=(3, 3, 4))
        cols = build_collections(gw, gs, da=None, mode="threshold", conf_threshold=0.8)
        loss, used = unsupervised_loss(cols)
        assert used == 0 and loss == 0.0
        assert cols.agree.sum() == 9  # masked only by the confidence gate

    def test_intra_self_labels_keep_mask(self):
        gen = np.random.default_rng(7)
        gw, gs = self._random_views(gen, 4, 3, 5)
        cols = build_collections(gw, gs, da=None, mode="intra")
        assert np.allclose(cols.q_hat, cols.q)
        assert np.array_equal(cols.agree, agreement_mask(cols.q))

    def test_averaged_mode_always_on(self):
        gen = np.random.default_rng(8)
        gw, gs = self._random_views(gen, 4, 1, 5)
        cols = build_collections(gw, gs, da=None, mode="averaged")
        assert np.all(cols.gate == 1.0)
        assert np.allclose(cols.q_hat, cols.q)

    def test_mode_m_consistency_enforced(self):
        gen = np.random.default_rng(9)
        gw, gs = self._random_views(gen, 2, 3, 4)
        with pytest.raises(ValueError):
            build_collections(gw, gs, None, mode="averaged")
        gw1, gs1 = self._random_views(gen, 2, 1, 4)
        with pytest.raises(ValueError):
            build_collections(gw1, gs1, None, mode="spikematch")

    def test_mask_soundness(self):
        # Masked sum equals literally summing only agreeing pairs.
        gen = np.random.default_rng(10)
        gw, gs = self._random_views(gen, 8, 4, 3)
        cols = build_collections(gw, gs, da=None, mode="no_da")
        loss, _ = unsupervised_loss(cols)
        manual = 0.0
        for b in range(8):
            for m in range(4):
                if cols.gate[b, m]:
                    manual += cross_entropy_row(
                        cols.q_hat[b, m].tolist(), gs[b, m].tolist()
                    )
        assert loss == pytest.approx(manual / 8, abs=1e-10)

    def test_da_with_matching_marginals_is_noop(self):
        gen = np.random.default_rng(11)
        gw, gs = self._random_views(gen, 4, 3, 5)
        da = DaState.uniform(5, decay=1.0)  # decay 1: update leaves marginal fixed
        cols_da = build_collections(gw, gs, da=da, mode="spikematch")
        cols_raw = build_collections(gw, gs, da=None, mode="no_da")
        assert np.allclose(cols_da.q, cols_raw.q, atol=1e-12)
        assert np.array_equal(cols_da.gate, cols_raw.gate)
        assert np.array_equal(cols_da.c_hat, cols_raw.c_hat)

    def test_positive_scaling_keeps_classes_and_mask(self):
        # Scaling all collection logits of one sample preserves per-row
        # argmaxes, hence c_hat and the agreement mask.
        gen = np.random.default_rng(12)
        for _ in range(100):
            gw = gen.normal(size=(1, 4, 5))
            gs = gen.normal(size=(1, 4, 5))
            scale = float(gen.uniform(0.2, 5.0))
            a = build_collections(gw, gs, None, "no_da")
            b = build_collections(gw * scale, gs, None, "no_da")
            assert np.array_equal(
                np.argmax(a.q, axis=-1), np.argmax(b.q, axis=-1)
            )
            assert np.array_equal(a.agree, b.agree)


class TestLossGradient:
    def test_matches_finite_differences(self):
        gen = np.random.default_rng(13)
        gw = gen.normal(size=(3, 3, 4))
        gs = gen.normal(size=(3, 3, 4))
        cols = build_collections(gw, gs, da=None, mode="no_da")
        grad = unsupervised_loss_grad(cols)
        h = 1e-6
        for _ in range(20):
            b, m, c = (int(gen.integers(0, s)) for s in gs.shape)
            gs_p = gs.copy()
            gs_p[b, m, c] += h
            gs_m = gs.copy()
            gs_m[b, m, c] -= h
            up, _ = unsupervised_loss(
                CollectionSet(gw, gs_p, cols.q, cols.q_hat, cols.c_hat, cols.agree, cols.gate)
            )
            down, _ = unsupervised_loss(
                CollectionSet(gw, gs_m, cols.q, cols.q_hat, cols.c_hat, cols.agree, cols.gate)
            )
            fd = (up - down) / (2 * h)
            assert grad[b, m, c] == pytest.approx(fd, abs=1e-7)

    def test_spread_divides_by_segment_size(self):
        scheme = make_grouping(4, 3)
        grad_g = np.ones((2, 3, 5))
        spread = spread_collection_grad(grad_g, scheme)
        assert spread.shape == (4, 2, 5)
        assert np.allclose(spread[0], 1.0)
        assert np.allclose(spread[1], 1.0)
        assert np.allclose(spread[2], 0.5)
        assert np.allclose(spread[3], 0.5)
