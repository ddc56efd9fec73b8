import math

import numpy as np
import pytest
from scipy.stats import ortho_group

from lesioncl import contrastive as cl
from lesioncl import numerics as nx
from lesioncl.imageops import AugmentConfig
from lesioncl.patches import BBox, PatchSpec
from oracles import brute_ntxent


@pytest.mark.parametrize("seed", range(10))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, d = [(4, 8), (2, 3), (8, 16)][seed % 3]
    tau = (0.07, 0.5)[seed % 2]
    z = rng.normal(size=(2 * n, d))
    rep = cl.ntxent_loss(z, cl.interleaved_partner(n), tau)
    ref = brute_ntxent(z, tau)
    assert rep.total == pytest.approx(ref, rel=1e-9)
    assert rep.total == pytest.approx(2 * n * rep.mean, rel=1e-15)


def test_single_pair_is_zero():
    rng = np.random.default_rng(0)
    for tau in (0.07, 1.0, 3.0):
        assert cl.ntxent_loss(rng.normal(size=(2, 5)), [1, 0], tau).total == 0.0


def test_identical_rows_closed_form():
    rep = cl.ntxent_loss(np.ones((4, 3)), cl.interleaved_partner(2), 0.07)
    assert rep.total == pytest.approx(4 * math.log(3), rel=1e-12)
    assert rep.total == pytest.approx(4.39445, abs=1e-5)


def test_strictly_positive_with_negatives():
    rng = np.random.default_rng(1)
    for _ in range(20):
        z = rng.normal(size=(6, 4))
        assert cl.ntxent_loss(z, cl.interleaved_partner(3), 0.2).total > 0


def test_float32_no_overflow_at_small_tau():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(64, 16)).astype(np.float32)
    rep = cl.ntxent_loss(z, cl.interleaved_partner(32), 0.01)
    assert np.isfinite(rep.total)


def test_errors():
    with pytest.raises(ValueError, match="temperature"):
        cl.ntxent_loss(np.ones((2, 2)), [1, 0], 0.0)
    z = np.ones((4, 2))
    z[2] = 0
    with pytest.raises(ValueError, match="zero"):
        cl.ntxent_loss(z, cl.interleaved_partner(2), 0.1)
    with pytest.raises(ValueError):
        cl.ntxent_loss(np.ones((3, 2)), [1, 0, 2], 0.1)


class TestInvariance:
    def test_orthogonal(self):
        for t in range(20):
            rng = np.random.default_rng(100 + t)
            z = rng.normal(size=(8, 6))
            q = ortho_group.rvs(6, random_state=int(rng.integers(1 << 31)))
            p = cl.interleaved_partner(4)
            assert abs(cl.ntxent_loss(z @ q, p, 0.07).total - cl.ntxent_loss(z, p, 0.07).total) < 1e-9

    def test_row_scaling(self):
        for t in range(20):
            rng = np.random.default_rng(200 + t)
            z = rng.normal(size=(8, 6))
            s = rng.uniform(0.01, 100, size=(8, 1))
            p = cl.interleaved_partner(4)
            assert abs(cl.ntxent_loss(z * s, p, 0.07).total - cl.ntxent_loss(z, p, 0.07).total) < 1e-9

    def test_patch_permutation(self):
        for t in range(20):
            rng = np.random.default_rng(300 + t)
            z = rng.normal(size=(10, 4))
            perm = rng.permutation(5)
            order = np.stack([2 * perm, 2 * perm + 1], axis=1).ravel()
            p = cl.interleaved_partner(5)
            assert abs(cl.ntxent_loss(z[order], p, 0.5).total - cl.ntxent_loss(z, p, 0.5).total) < 1e-12

    def test_arbitrary_pairing_map(self):
        rng = np.random.default_rng(4)
        z = rng.normal(size=(6, 3))
        order = rng.permutation(6)
        inv = np.argsort(order)
        partner = inv[cl.interleaved_partner(3)[order]]
        a = cl.ntxent_loss(z[order], partner, 0.3).total
        assert a == pytest.approx(cl.ntxent_loss(z, cl.interleaved_partner(3), 0.3).total, abs=1e-12)


def test_positive_similarity_monotone():
    # term 0 as a function of its positive logit, other logits fixed
    rng = np.random.default_rng(5)
    others = rng.normal(size=6)
    vals = [-(s - np.log(np.exp(s) + np.exp(others).sum())) for s in np.linspace(-3, 3, 50)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    # and on embeddings: rotating view 1 toward view 0 in the plane they span
    e = np.eye(4)
    base = np.stack([e[0], e[1], e[2], e[3]]).astype(float) + 0.1
    prev = np.inf
    for a in np.linspace(0, 1, 11):
        z = base.copy()
        z[1] = (1 - a) * base[1] + a * base[0]
        cur = brute_ntxent(z, 0.5)
        assert cur <= prev + 1e-12
        prev = cur


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(8, 5))
    p = cl.interleaved_partner(4)
    _, g = cl.ntxent_loss(z, p, 0.07, with_grad=True)
    fd = nx.finite_diff_grad(lambda a: cl.ntxent_loss(a, p, 0.07).total, z.copy(), 1e-5)
    assert np.abs(g - fd).max() / np.abs(fd).max() < 1e-4


def test_tape_node_reductions():
    rng = np.random.default_rng(6)
    zt = nx.Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    p = cl.interleaved_partner(3)
    for red, factor in (("sum", 1.0), ("mean", 1 / 6)):
        with nx.Tape() as tape:
            loss, rep = cl.ntxent(zt, p, 0.1, reduction=red)
        g = nx.backward(tape, loss, [zt])[id(zt)]
        _, gz = cl.ntxent_loss(zt.data, p, 0.1, with_grad=True)
        np.testing.assert_allclose(g, factor * gz, rtol=1e-14)
        assert float(loss.data) == pytest.approx(rep.total * factor)
    with pytest.raises(ValueError):
        cl.ntxent(zt, p, 0.1, reduction="max")


class TestAccuracy:
    def test_duplicated_orthogonal_pairs(self):
        z = np.repeat(np.eye(4), 2, axis=0)
        assert cl.contrastive_accuracy(z, cl.interleaved_partner(4)) == 1.0

    def test_adversarial(self):
        # each row equals a row of another pair; its own partner is orthogonal
        e = np.eye(4)
        z = np.stack([e[0], e[1], e[1], e[0]])
        assert cl.contrastive_accuracy(z, cl.interleaved_partner(2)) == 0.0

    def test_ties_go_to_lowest_index(self):
        z = np.ones((4, 2))
        # all rows tie; rows 0 and 1 pick each other, rows 2 and 3 pick row 0
        assert cl.contrastive_accuracy(z, cl.interleaved_partner(2)) == 0.5

    def test_chance_level(self):
        accs = [
            cl.contrastive_accuracy(np.random.default_rng(s).normal(size=(8, 256)), cl.interleaved_partner(4))
            for s in range(400)
        ]
        # mean of 400 batches of 8 rows; chance 1/7, sd of the mean about 0.0125
        assert abs(np.mean(accs) - 1 / 7) < 0.04

    def test_needs_negatives(self):
        with pytest.raises(ValueError):
            cl.contrastive_accuracy(np.ones((2, 3)), [1, 0])

    def test_report_matches(self):
        z = np.random.default_rng(7).normal(size=(8, 3))
        p = cl.interleaved_partner(4)
        assert cl.ntxent_loss(z, p, 0.5).accuracy == cl.contrastive_accuracy(z, p)


def test_cosine_sim():
    assert cl.cosine_sim([2, 3], [2, 3]) == pytest.approx(1.0)
    assert cl.cosine_sim([1, 0], [0, 5]) == 0.0
    assert cl.cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), rel=1e-15)
    with pytest.raises(ValueError):
        cl.cosine_sim([0, 0], [1, 0])


class TestViewBatch:
    src = np.random.default_rng(8).integers(0, 256, (512, 512, 3), dtype=np.uint8)
    cfg = AugmentConfig(view_size=32)

    def specs(self, n):
        out = []
        for k in range(n):
            x = 40.0 * k
            lesion = BBox(x + 50, 60, x + 60, 70)
            out.append(PatchSpec(f"p{k}", BBox(x, 0, x + 128, 128), lesion))
        return out

    def test_single_patch(self):
        b = cl.make_view_batch(self.specs(1), lambda s: self.src, self.cfg, 0)
        assert b.views.shape == (2, 32, 32, 3) and list(b.partner) == [1, 0]

    def test_involution(self):
        b = cl.make_view_batch(self.specs(3), lambda s: self.src, self.cfg, 0)
        p = b.partner
        assert b.size == 6
        assert (p[p] == np.arange(6)).all() and (p != np.arange(6)).all()
        assert b.patch_ids == ["p0", "p1", "p2"]

    def test_deterministic(self):
        a = cl.make_view_batch(self.specs(3), lambda s: self.src, self.cfg, 5, step=2)
        b = cl.make_view_batch(self.specs(3), lambda s: self.src, self.cfg, 5, step=2)
        c = cl.make_view_batch(self.specs(3), lambda s: self.src, self.cfg, 5, step=3)
        assert a.views.tobytes() == b.views.tobytes()
        assert a.views.tobytes() != c.views.tobytes()

    def test_views_depend_on_dataset_index_not_position(self):
        sp = self.specs(2)
        a = cl.make_view_batch(sp, lambda s: self.src, self.cfg, 1, patch_index=[7, 9])
        b = cl.make_view_batch(sp[::-1], lambda s: self.src, self.cfg, 1, patch_index=[9, 7])
        assert a.views[0].tobytes() == b.views[2].tobytes()

    def test_empty(self):
        with pytest.raises(ValueError):
            cl.make_view_batch([], lambda s: self.src, self.cfg, 0)
