import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from fairaug.augment import (
    Perturbations,
    QuadrupleBatch,
    fake_scores,
    init_perturbations,
    inner_gradient,
    inner_loss,
    inner_step,
    sample_mask,
    sample_quadruples,
)
from fairaug.backbone import Adam, EmbeddingTable, bpr_loss
from fairaug.dataset import InteractionDataset
from fairaug.sampling import TrainIndex

from conftest import assert_grad_close, central_difference, random_table


def random_quads(rng, M, N, n):
    return QuadrupleBatch(*(rng.integers(0, hi, n) for hi in (M, N, N, M, N, N)))


class TestTrainIndex:
    def test_contains(self, toy_dataset):
        idx = TrainIndex(toy_dataset)
        u, v = toy_dataset.train.T
        assert idx.contains(u, v).all()
        train = set(map(tuple, toy_dataset.train.tolist()))
        for a in range(toy_dataset.num_users):
            for b in range(toy_dataset.num_items):
                assert idx.contains(np.array([a]), np.array([b]))[0] == ((a, b) in train)

    def test_negatives_never_positive(self, toy_dataset):
        idx = TrainIndex(toy_dataset)
        rng = np.random.default_rng(0)
        users = rng.integers(0, toy_dataset.num_users, 5000)
        assert not idx.contains(users, idx.sample_negatives(users, rng)).any()

    def test_epoch_triples_cover_train(self, toy_dataset):
        idx = TrainIndex(toy_dataset)
        t = idx.epoch_triples(np.random.default_rng(1))
        assert sorted(map(tuple, t[:, :2].tolist())) == sorted(map(tuple, toy_dataset.train.tolist()))
        assert not idx.contains(t[:, 0], t[:, 2]).any()

    def test_saturated_user_rejected(self):
        ds = InteractionDataset(2, 2, [[0, 0], [0, 1], [1, 0]], [], [], [0, 1])
        with pytest.raises(ValueError, match="every item"):
            TrainIndex(ds)


class TestSampleQuadruples:
    def test_forced_selection(self):
        ds = InteractionDataset(2, 4, [[0, 1], [1, 2]], [], [], [0, 1])
        q = sample_quadruples(TrainIndex(ds), 50, np.random.default_rng(0))
        assert (q.u0 == 0).all() and (q.i0 == 1).all()
        assert (q.u1 == 1).all() and (q.i1 == 2).all()
        assert not np.isin(q.j0, [1]).any() and not np.isin(q.j1, [2]).any()
        q.check(TrainIndex(ds))

    def test_uniform_frequencies(self):
        # user 0 (group 0) owns items {0, 1}; user 1 (group 1) owns item {3}
        ds = InteractionDataset(2, 4, [[0, 0], [0, 1], [1, 3]], [], [], [0, 1])
        n = 10**5
        q = sample_quadruples(TrainIndex(ds), n, np.random.default_rng(12345))
        for draws, support in ((q.i0, [0, 1]), (q.j0, [2, 3]), (q.j1, [0, 1, 2])):
            counts = np.bincount(draws, minlength=4)[support]
            assert counts.sum() == n
            p = 1 / len(support)
            sd = np.sqrt(n * p * (1 - p))
            assert (np.abs(counts - n * p) < 3 * sd).all()
            assert chisquare(counts).pvalue > 1e-3

    def test_membership_and_groups(self, toy_dataset):
        idx = TrainIndex(toy_dataset)
        q = sample_quadruples(idx, 2000, np.random.default_rng(4))
        q.check(idx)

    def test_check_rejects_swapped_groups(self, toy_dataset):
        idx = TrainIndex(toy_dataset)
        q = sample_quadruples(idx, 10, np.random.default_rng(4))
        swapped = QuadrupleBatch(q.u1, q.i1, q.j1, q.u0, q.i0, q.j0)
        with pytest.raises(ValueError, match="groups"):
            swapped.check(idx)

    def test_deterministic(self, toy_dataset):
        idx = TrainIndex(toy_dataset)
        a = sample_quadruples(idx, 100, np.random.default_rng(9)).as_array()
        b = sample_quadruples(idx, 100, np.random.default_rng(9)).as_array()
        np.testing.assert_array_equal(a, b)

    def test_rows_round_trip(self):
        rows = np.arange(12).reshape(2, 6)
        q = QuadrupleBatch.from_rows(rows)
        np.testing.assert_array_equal(q.as_array(), rows)
        np.testing.assert_array_equal(q.real_triples(), [[0, 1, 2], [6, 7, 8], [3, 4, 5], [9, 10, 11]])
        assert len(q[1:]) == 1


class TestPerturbations:
    def test_default_bound(self):
        p = init_perturbations(100, 64, seed=0)
        assert p.epsilon == 0.05
        assert np.abs(p.delta).max() <= 0.05
        assert p.delta.dtype == np.float32

    def test_same_seed(self):
        np.testing.assert_array_equal(init_perturbations(5, 3, 0.1, seed=2).delta,
                                      init_perturbations(5, 3, 0.1, seed=2).delta)

    def test_project(self):
        p = Perturbations(np.array([[0.3, -0.3, 0.01]]), 0.05)
        p.project()
        np.testing.assert_array_equal(p.delta, [[0.05, -0.05, 0.01]])

    def test_negative_epsilon(self):
        with pytest.raises(ValueError):
            init_perturbations(3, 2, -0.1)


class TestFakeScores:
    def test_zero_noise_gives_cross_scores(self):
        rng = np.random.default_rng(0)
        E = random_table(4, 6, 3, rng)
        q = random_quads(rng, 4, 6, 8)
        out = fake_scores(E, np.zeros((6, 3)), q)
        dot = lambda u, v: np.einsum("nd,nd->n", E.user[u], E.item[v])
        for got, want in zip(out, (dot(q.u1, q.i0), dot(q.u0, q.i1), dot(q.u1, q.j0), dot(q.u0, q.j1))):
            np.testing.assert_allclose(got, want, rtol=1e-14)

    def test_sign_trick_raises_positive(self):
        E = EmbeddingTable(np.array([[0.5, -2.0], [1.0, 1.0]]), np.array([[0.2, 0.4], [0.0, 1.0]]))
        q = QuadrupleBatch.from_rows([[1, 0, 1, 0, 1, 0]])
        eps = 0.05
        delta = np.zeros((2, 2))
        base = fake_scores(E, delta, q)[0]
        delta[0] = eps * E.user[0] / np.abs(E.user[0]).max()
        raised = fake_scores(E, delta, q)[0]
        # hand value: e_u1 . (e_i0 + delta) = (0.1 - 0.8) + 0.05 * (0.125 + 2) = -0.59375
        np.testing.assert_allclose(raised, [-0.59375])
        assert raised[0] > base[0]

    def test_scalar_loop_oracle(self):
        rng = np.random.default_rng(1)
        E = random_table(5, 7, 4, rng)
        delta = 0.05 * rng.uniform(-1, 1, (7, 4))
        q = random_quads(rng, 5, 7, 10)
        got = fake_scores(E, delta, q)
        pairs = [(q.u1, q.i0), (q.u0, q.i1), (q.u1, q.j0), (q.u0, q.j1)]
        for out, (us, vs) in zip(got, pairs):
            for n in range(len(q)):
                acc = sum(E.user[us[n], k] * (E.item[vs[n], k] + delta[vs[n], k]) for k in range(4))
                assert out[n] == pytest.approx(acc, rel=1e-12, abs=1e-14)

    def test_continuity_at_zero(self):
        rng = np.random.default_rng(2)
        E = random_table(3, 4, 2, rng)
        q = random_quads(rng, 3, 4, 5)
        unit = rng.uniform(-1, 1, (4, 2))
        base = np.array(fake_scores(E, np.zeros((4, 2)), q))
        gaps = [np.abs(np.array(fake_scores(E, eps * unit, q)) - base).max() for eps in (1e-1, 1e-3, 1e-6)]
        assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-5


class TestInnerLoss:
    def test_zero_noise_is_cross_group_bpr(self):
        rng = np.random.default_rng(0)
        E = random_table(4, 6, 3, rng)
        q = random_quads(rng, 4, 6, 9)
        triples = np.vstack([
            np.column_stack([q.u0, q.i1, q.j0]), np.column_stack([q.u1, q.i0, q.j1]),
            np.column_stack([q.u0, q.i0, q.j1]), np.column_stack([q.u1, q.i1, q.j0]),
        ])
        np.testing.assert_allclose(inner_loss(E, np.zeros((6, 3)), q), bpr_loss(E, triples), rtol=1e-13)

    def test_zero_embeddings_four_ln2(self):
        E = EmbeddingTable(np.zeros((3, 2)), np.zeros((5, 2)))
        rng = np.random.default_rng(1)
        q = random_quads(rng, 3, 5, 7)
        delta = rng.uniform(-0.05, 0.05, (5, 2))
        np.testing.assert_allclose(inner_loss(E, delta, q), 7 * 4 * np.log(2), rtol=1e-14)

    def test_hypothesis_split_adds_up(self):
        rng = np.random.default_rng(2)
        E = random_table(4, 6, 3, rng)
        q = random_quads(rng, 4, 6, 5)
        delta = rng.uniform(-0.05, 0.05, (6, 3))
        both = inner_loss(E, delta, q)
        np.testing.assert_allclose(inner_loss(E, delta, q, (True, False)) + inner_loss(E, delta, q, (False, True)),
                                   both, rtol=1e-13)

    def test_group_swap_symmetry(self):
        rng = np.random.default_rng(3)
        E = random_table(4, 6, 3, rng)
        q = random_quads(rng, 4, 6, 5)
        delta = rng.uniform(-0.05, 0.05, (6, 3))
        swapped = QuadrupleBatch(q.u1, q.i1, q.j1, q.u0, q.i0, q.j0)
        np.testing.assert_allclose(inner_loss(E, delta, swapped), inner_loss(E, delta, q), rtol=1e-13)

    def test_single_quadruple_finite_difference(self):
        rng = np.random.default_rng(4)
        E = random_table(2, 4, 2, rng)
        q = QuadrupleBatch.from_rows([[0, 0, 1, 1, 2, 3]])
        delta = rng.uniform(-0.05, 0.05, (4, 2))
        g = inner_gradient(E, delta, q)
        assert_grad_close(g, central_difference(lambda: inner_loss(E, delta, q), delta, h=1e-4))

    @pytest.mark.parametrize("hyp", [(True, True), (True, False), (False, True)])
    def test_batch_finite_difference(self, hyp):
        rng = np.random.default_rng(5)
        E = random_table(3, 5, 3, rng)
        q = random_quads(rng, 3, 5, 6)
        delta = rng.uniform(-0.05, 0.05, (5, 3))
        g = inner_gradient(E, delta, q, hyp)
        assert_grad_close(g, central_difference(lambda: inner_loss(E, delta, q, hyp), delta))

    def test_empty_batch(self):
        E = EmbeddingTable(np.zeros((1, 2)), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            inner_loss(E, np.zeros((2, 2)), QuadrupleBatch.from_rows(np.zeros((0, 6))))


class TestInnerStep:
    def test_zero_epsilon_keeps_noise_zero(self):
        rng = np.random.default_rng(0)
        E = random_table(3, 5, 2, rng, dtype=np.float32)
        pert = init_perturbations(5, 2, 0.0, seed=1)
        opt = Adam([pert.delta], lr=0.1)
        q = random_quads(rng, 3, 5, 4)
        for _ in range(5):
            inner_step(E, pert, q, opt)
        np.testing.assert_array_equal(pert.delta, np.zeros((5, 2), dtype=np.float32))

    def test_stays_in_box(self):
        rng = np.random.default_rng(1)
        E = random_table(3, 5, 2, rng, scale=3.0, dtype=np.float32)
        pert = init_perturbations(5, 2, 0.05, seed=1)
        opt = Adam([pert.delta], lr=0.5)
        q = random_quads(rng, 3, 5, 4)
        for _ in range(20):
            inner_step(E, pert, q, opt)
            assert np.abs(pert.delta).max() <= 0.05

    def test_loss_non_increasing_over_windows(self):
        rng = np.random.default_rng(2)
        E = random_table(4, 8, 3, rng)
        pert = init_perturbations(8, 3, 0.5, seed=3, dtype=np.float64)
        opt = Adam([pert.delta], lr=1e-3)
        q = random_quads(rng, 4, 8, 6)
        losses = [inner_step(E, pert, q, opt) for _ in range(300)]
        windows = losses[::50]
        assert all(b <= a for a, b in zip(windows, windows[1:]))
        assert windows[-1] < windows[0]

    def test_returns_pre_step_loss(self):
        rng = np.random.default_rng(3)
        E = random_table(3, 5, 2, rng)
        pert = init_perturbations(5, 2, 0.05, seed=0, dtype=np.float64)
        q = random_quads(rng, 3, 5, 4)
        before = inner_loss(E, pert.delta, q)
        assert inner_step(E, pert, q, Adam([pert.delta])) == before


class TestSampleMask:
    def test_zero(self):
        m = sample_mask(10, 0.0, np.random.default_rng(0))
        assert m.capacity == 0 and not m.m.any()

    def test_one(self):
        m = sample_mask(10, 1.0, np.random.default_rng(0))
        assert m.capacity == 10 and m.m.all()

    def test_default_ratio(self):
        m = sample_mask(1447, 0.3, np.random.default_rng(0))
        assert m.selected == m.capacity == 434

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            sample_mask(10, 1.5, np.random.default_rng(0))

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 500), st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_exact_count(self, n, ratio, seed):
        m = sample_mask(n, ratio, np.random.default_rng(seed))
        assert m.selected == int(np.floor(ratio * n))

    def test_item_inclusion_uniform(self):
        rng = np.random.default_rng(5)
        hits = sum(sample_mask(20, 0.25, rng).m.astype(int) for _ in range(20000))
        p = 0.25
        sd = np.sqrt(20000 * p * (1 - p))
        assert (np.abs(hits - 20000 * p) < 4 * sd).all()
