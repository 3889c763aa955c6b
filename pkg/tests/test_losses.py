import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

from catreid.losses import (LossConfig, arcface_logits, id_loss, total_loss,
                            triplet_batch_hard)
from oracles import brute_force_triplet, grad_check

torch.manual_seed(0)


def ce_oracle(logits, labels):
    """Direct per-sample -log softmax computed with explicit loops."""
    logits = np.asarray(logits, dtype=np.float64)
    vals = []
    for row, label in zip(logits, labels):
        shifted = row - row.max()
        log_z = math.log(np.exp(shifted).sum())
        vals.append(-(shifted[label] - log_z))
    return float(np.mean(vals))


class TestIdLoss:
    def test_uniform_logits_give_ln_c(self):
        for c in (2, 3, 7):
            logits = torch.zeros(5, c)
            labels = torch.randint(0, c, (5,))
            assert torch.isclose(id_loss(logits, labels),
                                 torch.tensor(math.log(c)), atol=1e-6)

    def test_confident_one_hot_goes_to_zero(self):
        logits = torch.full((4, 3), -50.0)
        labels = torch.tensor([0, 1, 2, 1])
        logits[torch.arange(4), labels] = 50.0
        assert id_loss(logits, labels).item() < 1e-6

    def test_matches_direct_summation_oracle(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(4, 3))
        labels = [0, 2, 1, 2]
        ours = id_loss(torch.tensor(logits), torch.tensor(labels)).item()
        assert abs(ours - ce_oracle(logits, labels)) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            id_loss(torch.zeros(2, 3), torch.tensor([0, 3]))


class TestTripletBatchHard:
    def test_satisfied_triplets_zero_loss(self):
        emb = torch.tensor([[0.0, 0.0], [0.0, 0.0],
                            [10.0, 0.0], [10.0, 0.0]])
        labels = torch.tensor([0, 0, 1, 1])
        assert triplet_batch_hard(emb, labels, margin=0.3).item() == 0.0

    def test_all_identical_points_give_margin(self):
        emb = torch.ones(6, 4)
        labels = torch.tensor([0, 0, 0, 1, 1, 1])
        assert torch.isclose(triplet_batch_hard(emb, labels, 0.3),
                             torch.tensor(0.3))

    def test_matches_bruteforce_on_100_pk_batches(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            p = int(rng.integers(2, 5))
            k = int(rng.integers(2, 5))
            dim = int(rng.integers(2, 16))
            emb = rng.normal(size=(p * k, dim))
            labels = np.repeat(np.arange(p), k)
            perm = rng.permutation(p * k)
            emb, labels = emb[perm], labels[perm]
            ours = triplet_batch_hard(torch.tensor(emb),
                                      torch.tensor(labels), 0.3).item()
            assert abs(ours - brute_force_triplet(emb, labels, 0.3)) < 1e-6

    def test_permutation_invariant(self):
        rng = np.random.default_rng(2)
        emb = rng.normal(size=(8, 5))
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        base = triplet_batch_hard(torch.tensor(emb), torch.tensor(labels),
                                  0.3).item()
        for _ in range(5):
            perm = rng.permutation(8)
            val = triplet_batch_hard(torch.tensor(emb[perm]),
                                     torch.tensor(labels[perm]), 0.3).item()
            assert abs(val - base) < 1e-9

    def test_precondition_names_offending_label(self):
        emb = torch.randn(3, 4)
        with pytest.raises(ValueError, match="label 1"):
            triplet_batch_hard(emb, torch.tensor([0, 0, 1]), 0.3)
        with pytest.raises(ValueError, match="2 distinct"):
            triplet_batch_hard(emb, torch.tensor([0, 0, 0]), 0.3)


class TestArcFace:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.emb = torch.tensor(rng.normal(size=(5, 8)))
        self.weights = torch.tensor(rng.normal(size=(4, 8)))
        self.labels = torch.tensor([0, 1, 2, 3, 1])

    def test_zero_margin_is_scaled_cosine_exactly(self):
        logits = arcface_logits(self.emb, self.weights, self.labels,
                                s=30.0, m=0.0)
        normed_e = self.emb / self.emb.norm(dim=1, keepdim=True)
        normed_w = self.weights / self.weights.norm(dim=1, keepdim=True)
        expected = 30.0 * (normed_e @ normed_w.t())
        assert torch.equal(logits, expected)

    def test_aligned_embedding_analytic(self):
        # embedding parallel to its class row: theta = 0, logit = s*cos(m)
        # (up to the 1e-7 cosine clamp guarding arccos at the boundary)
        weights = torch.eye(3, 6, dtype=torch.float64)
        emb = torch.zeros(1, 6, dtype=torch.float64)
        emb[0, 0] = 2.5
        logits = arcface_logits(emb, weights, torch.tensor([0]),
                                s=30.0, m=0.5)
        assert abs(logits[0, 0].item() - 30.0 * math.cos(0.5)) < 1e-2
        assert logits[0, 0].item() < 30.0

    def test_margin_never_increases_true_logit(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            emb = torch.tensor(rng.normal(size=(6, 5)))
            weights = torch.tensor(rng.normal(size=(4, 5)))
            labels = torch.tensor(rng.integers(0, 4, size=6))
            base = arcface_logits(emb, weights, labels, s=30.0, m=0.0)
            with_m = arcface_logits(emb, weights, labels, s=30.0, m=0.4)
            idx = torch.arange(6)
            assert (with_m[idx, labels] <= base[idx, labels] + 1e-9).all()
            off = torch.ones_like(base, dtype=torch.bool)
            off[idx, labels] = False
            assert torch.equal(with_m[off], base[off])

    def test_wraparound_guard_still_penalizes(self):
        # embedding nearly opposite its class row: theta + m > pi
        weights = torch.eye(2, 4, dtype=torch.float64)
        emb = torch.zeros(1, 4, dtype=torch.float64)
        emb[0, 0] = -1.0
        emb[0, 1] = 1e-4
        base = arcface_logits(emb, weights, torch.tensor([0]), s=30.0, m=0.0)
        with_m = arcface_logits(emb, weights, torch.tensor([0]), s=30.0, m=0.5)
        assert with_m[0, 0].item() < base[0, 0].item()

    def test_scale_invariance_of_inputs(self):
        a = arcface_logits(self.emb, self.weights, self.labels, 30.0, 0.5)
        b = arcface_logits(self.emb * 10.0, self.weights, self.labels,
                           30.0, 0.5)
        assert (a - b).abs().max().item() < 1e-6

    def test_zero_norm_rejected(self):
        emb = self.emb.clone()
        emb[2] = 0.0
        with pytest.raises(ValueError, match="zero-norm"):
            arcface_logits(emb, self.weights, self.labels, 30.0, 0.5)
        weights = self.weights.clone()
        weights[0] = 0.0
        with pytest.raises(ValueError, match="zero-norm"):
            arcface_logits(self.emb, weights, self.labels, 30.0, 0.5)

    def test_finite_on_duplicate_points(self):
        emb = torch.ones(4, 3)
        weights = torch.ones(2, 3)
        labels = torch.tensor([0, 0, 1, 1])
        logits = arcface_logits(emb, weights, labels, 30.0, 0.5)
        assert torch.isfinite(logits).all()
        loss = id_loss(logits, labels)
        assert torch.isfinite(loss)


def _pk_batch(b=8, e=8, c=4, seed=5):
    rng = np.random.default_rng(seed)
    emb = SimpleNamespace(
        d_full=torch.tensor(rng.normal(size=(b, e))),
        z_ft=torch.tensor(rng.normal(size=(b, e))),
        z_fl=torch.tensor(rng.normal(size=(b, e))),
    )
    labels = torch.tensor(np.repeat(np.arange(b // 2), 2) % c)
    weights = {h: torch.tensor(rng.normal(size=(c, e)))
               for h in ("d_full", "z_ft", "z_fl")}
    return emb, labels, weights


class TestTotalLoss:
    def test_all_zero_weights_give_zero(self):
        emb, labels, weights = _pk_batch()
        config = LossConfig(head_weights={
            h: {"id": 0.0, "triplet": 0.0}
            for h in ("d_full", "z_ft", "z_fl")})
        breakdown = total_loss(emb, labels, weights, config)
        assert breakdown.total.item() == 0.0

    def test_single_head_isolation(self):
        emb, labels, weights = _pk_batch()
        config = LossConfig(head_weights={
            "d_full": {"id": 1.0, "triplet": 0.0},
            "z_ft": {"id": 0.0, "triplet": 0.0},
            "z_fl": {"id": 0.0, "triplet": 0.0}})
        breakdown = total_loss(emb, labels, weights, config)
        expected = id_loss(emb.d_full @ weights["d_full"].t(), labels)
        assert torch.isclose(breakdown.total, expected, atol=1e-9)

    def test_default_weights_match_summation_oracle(self):
        emb, labels, weights = _pk_batch(seed=6)
        config = LossConfig()
        breakdown = total_loss(emb, labels, weights, config)
        expected = 0.0
        for head in ("d_full", "z_ft", "z_fl"):
            vec = getattr(emb, head)
            logits = (vec @ weights[head].t()).numpy()
            expected += ce_oracle(logits, labels.tolist())
            expected += brute_force_triplet(vec.numpy(), labels.tolist(), 0.3)
        assert abs(breakdown.total.item() - expected) < 1e-6
        assert breakdown.scalars()["total"] == pytest.approx(expected)

    def test_arcface_toggle_changes_id_terms(self):
        emb, labels, weights = _pk_batch(seed=7)
        plain = total_loss(emb, labels, weights, LossConfig())
        arc = total_loss(emb, labels, weights, LossConfig(use_arcface=True))
        assert plain.terms["d_full_id"].item() != \
            pytest.approx(arc.terms["d_full_id"].item())
        assert plain.terms["d_full_triplet"].item() == \
            pytest.approx(arc.terms["d_full_triplet"].item())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(arcface_scale=0.0)
        with pytest.raises(ValueError):
            LossConfig(arcface_margin=2.0)
        with pytest.raises(ValueError):
            LossConfig(triplet_margin=-0.1)


class TestGradientChecks:
    """Analytic gradients vs central finite differences (double precision)."""

    def test_id_loss_gradient(self):
        logits = torch.randn(4, 3, dtype=torch.float64)
        labels = torch.tensor([0, 2, 1, 1])
        err = grad_check(lambda: id_loss(logits, labels), logits)
        assert err < 1e-4

    def test_triplet_gradient(self):
        emb = torch.randn(6, 5, dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1, 2, 2])
        err = grad_check(lambda: triplet_batch_hard(emb, labels, 0.3), emb)
        assert err < 1e-4

    def test_arcface_gradient_wrt_embeddings_and_weights(self):
        torch.manual_seed(1)
        emb = torch.randn(4, 6, dtype=torch.float64)
        weights = torch.randn(3, 6, dtype=torch.float64)
        labels = torch.tensor([0, 1, 2, 0])
        probe = torch.randn(4, 3, dtype=torch.float64)

        def fn():
            return (arcface_logits(emb, weights, labels, 30.0, 0.5)
                    * probe).sum()

        assert grad_check(fn, emb) < 1e-4
        weights.requires_grad_(False)
        emb = emb.detach()
        assert grad_check(fn, weights) < 1e-4

    def test_total_loss_gradient(self):
        torch.manual_seed(2)
        emb, labels, weights = _pk_batch(b=6, e=8, c=3, seed=8)
        config = LossConfig(use_arcface=True)

        def fn():
            return total_loss(emb, labels, weights, config).total

        assert grad_check(fn, emb.d_full) < 1e-4
        emb.d_full = emb.d_full.detach()
        assert grad_check(fn, weights["z_fl"]) < 1e-4
