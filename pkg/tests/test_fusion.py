"""The fusion head and batch loss carry the numeric core, so these tests
lean on independently coded scalar oracles (plain python loops and math.*)
rather than re-deriving values with torch."""

import math

import numpy as np
import pytest
import torch

from unicir.errors import NumericDomainError, ShapeError, ValidationError
from unicir.fusion import (
    FusionParams,
    LossConfig,
    batch_classification_loss,
    composed_loss,
    compute_lambda,
    cosine_similarity_matrix,
    fuse,
    fused_queries,
)


def params_from(rng, dim, hidden, dtype=torch.float64, scale=0.5):
    return FusionParams(
        torch.tensor(rng.normal(scale=scale, size=(hidden, 2 * dim)), dtype=dtype),
        torch.tensor(rng.normal(scale=scale, size=hidden), dtype=dtype),
        torch.tensor(rng.normal(scale=scale, size=(1, hidden)), dtype=dtype),
        torch.tensor(rng.normal(scale=scale, size=1), dtype=dtype),
    )


def lambda_oracle(p: FusionParams, ft, fv) -> float:
    """Scalar re-implementation of the gate with no tensor ops."""
    x = [float(v) for v in ft] + [float(v) for v in fv]
    hidden = []
    for r in range(p.hidden):
        s = float(p.b1[r]) + sum(float(p.W1[r, c]) * x[c] for c in range(len(x)))
        hidden.append(max(0.0, s))
    z = float(p.b2[0]) + sum(float(p.W2[0, r]) * hidden[r] for r in range(p.hidden))
    return 1.0 / (1.0 + math.exp(-z))


def loss_oracle(FQ, FT, tau) -> float:
    def cos(a, b):
        num = sum(x * y for x, y in zip(a, b))
        return num / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    total = 0.0
    for i in range(len(FQ)):
        logits = [cos(FQ[i], FT[j]) / tau for j in range(len(FT))]
        m = max(logits)
        total += m + math.log(sum(math.exp(v - m) for v in logits)) - logits[i]
    return total / len(FQ)


class TestComputeLambda:
    def test_zero_params_give_half(self):
        p = FusionParams(
            torch.zeros(4, 8), torch.zeros(4), torch.zeros(1, 4), torch.zeros(1)
        )
        lam = compute_lambda(p, torch.ones(4), torch.ones(4))
        assert float(lam) == 0.5

    def test_large_bias_saturates(self):
        p = FusionParams(
            torch.zeros(4, 8, dtype=torch.float64),
            torch.zeros(4, dtype=torch.float64),
            torch.zeros(1, 4, dtype=torch.float64),
            torch.full((1,), 20.0, dtype=torch.float64),
        )
        lam = float(compute_lambda(p, torch.zeros(4, dtype=torch.float64), torch.zeros(4, dtype=torch.float64)))
        assert lam == pytest.approx(1.0 / (1.0 + math.exp(-20.0)), abs=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(7)
        p = params_from(rng, dim=4, hidden=4)
        ft = torch.tensor(rng.normal(size=4), dtype=torch.float64)
        fv = torch.tensor(rng.normal(size=4), dtype=torch.float64)
        lam = float(compute_lambda(p, ft, fv))
        assert lam == pytest.approx(lambda_oracle(p, ft, fv), abs=1e-12)

    def test_bounded_on_random_inputs(self):
        rng = np.random.default_rng(21)
        p = params_from(rng, dim=6, hidden=5)
        for _ in range(1000):
            ft = torch.tensor(rng.normal(scale=3.0, size=6), dtype=torch.float64)
            fv = torch.tensor(rng.normal(scale=3.0, size=6), dtype=torch.float64)
            lam = float(compute_lambda(p, ft, fv))
            assert 0.0 < lam < 1.0

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        p = params_from(rng, dim=5, hidden=4)
        FT = torch.tensor(rng.normal(size=(6, 5)), dtype=torch.float64)
        FV = torch.tensor(rng.normal(size=(6, 5)), dtype=torch.float64)
        batched = compute_lambda(p, FT, FV)
        singles = torch.stack([compute_lambda(p, FT[i], FV[i]) for i in range(6)])
        assert torch.allclose(batched, singles, atol=1e-14)

    def test_dim_mismatch(self):
        rng = np.random.default_rng(0)
        p = params_from(rng, dim=4, hidden=4)
        with pytest.raises(ShapeError):
            compute_lambda(p, torch.ones(3), torch.ones(3))


class TestFuse:
    def test_endpoint_lambda_one(self):
        ft, fv = torch.tensor([1.0, 2.0]), torch.tensor([5.0, -3.0])
        out = fuse(ft, fv, 1.0)
        assert torch.equal(out_vec(out), ft)

    def test_midpoint(self):
        out = fuse(torch.tensor([2.0, 0.0]), torch.tensor([0.0, 2.0]), 0.5)
        assert torch.equal(out_vec(out), torch.tensor([1.0, 1.0]))

    def test_quarter(self):
        out = fuse(torch.tensor([4.0, 0.0]), torch.tensor([0.0, 4.0]), 0.25)
        assert torch.equal(out_vec(out), torch.tensor([1.0, 3.0]))

    def test_convexity_componentwise(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            ft = torch.tensor(rng.normal(size=8))
            fv = torch.tensor(rng.normal(size=8))
            lam = float(rng.uniform())
            v = out_vec(fuse(ft, fv, lam))
            lo = torch.minimum(ft, fv) - 1e-12
            hi = torch.maximum(ft, fv) + 1e-12
            assert bool(((lo <= v) & (v <= hi)).all())

    def test_lambda_outside_unit_interval_rejected(self):
        with pytest.raises(ValidationError):
            fuse(torch.ones(2), torch.ones(2), 1.2)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            fuse(torch.ones(2), torch.ones(3), 0.5)


def out_vec(fused) -> torch.Tensor:
    v = fused.vector
    return v if isinstance(v, torch.Tensor) else torch.as_tensor(v)


class TestBatchLoss:
    def test_single_element_batch_is_exactly_zero(self):
        fq = torch.tensor([[0.3, -1.2, 0.5]], dtype=torch.float64)
        ft = torch.tensor([[1.0, 0.2, 0.0]], dtype=torch.float64)
        loss = batch_classification_loss(fq, ft, LossConfig(tau=0.1))
        assert float(loss) == 0.0

    def test_identical_targets_give_ln_b(self):
        rng = np.random.default_rng(4)
        B = 5
        fq = torch.tensor(rng.normal(size=(B, 6)), dtype=torch.float64)
        ft = torch.tensor(rng.normal(size=6), dtype=torch.float64).expand(B, 6)
        loss = float(batch_classification_loss(fq, ft, LossConfig(tau=0.07)))
        assert abs(loss - math.log(B)) <= 1e-12

    def test_orthogonal_pair_case(self):
        fq = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        loss = float(batch_classification_loss(fq, fq.clone(), LossConfig(tau=1.0)))
        assert loss == pytest.approx(math.log(1.0 + math.exp(-1.0)), abs=1e-9)

    def test_matches_scalar_oracle_on_random_batches(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            B = int(rng.integers(2, 7))
            fq = rng.normal(size=(B, 5))
            ft = rng.normal(size=(B, 5))
            got = float(
                batch_classification_loss(
                    torch.tensor(fq, dtype=torch.float64),
                    torch.tensor(ft, dtype=torch.float64),
                    LossConfig(tau=0.3),
                )
            )
            assert got == pytest.approx(loss_oracle(fq.tolist(), ft.tolist(), 0.3), abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(14)
        for _ in range(25):
            fq = torch.tensor(rng.normal(size=(4, 3)), dtype=torch.float64)
            ft = torch.tensor(rng.normal(size=(4, 3)), dtype=torch.float64)
            assert float(batch_classification_loss(fq, ft, LossConfig(tau=0.5))) >= 0.0

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(15)
        fq = torch.tensor(rng.normal(size=(6, 4)), dtype=torch.float64)
        ft = torch.tensor(rng.normal(size=(6, 4)), dtype=torch.float64)
        perm = torch.tensor(rng.permutation(6))
        a = float(batch_classification_loss(fq, ft, LossConfig(tau=0.2)))
        b = float(batch_classification_loss(fq[perm], ft[perm], LossConfig(tau=0.2)))
        assert abs(a - b) <= 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(16)
        fq = torch.tensor(rng.normal(size=(5, 4)), dtype=torch.float64)
        ft = torch.tensor(rng.normal(size=(5, 4)), dtype=torch.float64)
        a = float(batch_classification_loss(fq, ft, LossConfig(tau=0.2)))
        fq2 = fq.clone()
        fq2[2] *= 37.5
        b = float(batch_classification_loss(fq2, ft, LossConfig(tau=0.2)))
        assert abs(a - b) <= 1e-9

    def test_zero_norm_row_named(self):
        fq = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=torch.float64)
        ft = torch.eye(2, dtype=torch.float64)
        with pytest.raises(NumericDomainError, match="row 1"):
            batch_classification_loss(fq, ft, LossConfig(tau=1.0))

    def test_batch_size_mismatch(self):
        with pytest.raises(ShapeError):
            batch_classification_loss(torch.ones(2, 3), torch.ones(3, 3), LossConfig(tau=1.0))

    def test_tau_validation(self):
        with pytest.raises(ValidationError):
            LossConfig(tau=0.0)


class TestGradients:
    def test_composed_gradients_match_finite_differences(self):
        # smaller sibling of the acceptance-gate check (5 instances here)
        rng = np.random.default_rng(99)
        for _ in range(5):
            rel = composed_fd_relative_error(rng, B=4, dim=8, hidden=8, step=1e-5)
            assert rel <= 1e-5

    def test_gradients_flow_to_all_parameters(self):
        rng = np.random.default_rng(5)
        p = params_from(rng, dim=4, hidden=3).requires_grad_(True)
        FT = torch.tensor(rng.normal(size=(3, 4)), dtype=torch.float64, requires_grad=True)
        FV = torch.tensor(rng.normal(size=(3, 4)), dtype=torch.float64, requires_grad=True)
        tgt = torch.tensor(rng.normal(size=(3, 4)), dtype=torch.float64)
        loss, _ = composed_loss(p, FT, FV, tgt, LossConfig(tau=0.2))
        loss.backward()
        for t in p.parameters() + [FT, FV]:
            assert t.grad is not None
            assert torch.isfinite(t.grad).all()


def composed_fd_relative_error(rng, B, dim, hidden, step) -> float:
    """Max relative disagreement between autograd and central differences."""
    p = params_from(rng, dim, hidden).requires_grad_(True)
    FT = torch.tensor(rng.normal(size=(B, dim)), dtype=torch.float64, requires_grad=True)
    FV = torch.tensor(rng.normal(size=(B, dim)), dtype=torch.float64, requires_grad=True)
    TGT = torch.tensor(rng.normal(size=(B, dim)), dtype=torch.float64, requires_grad=True)
    cfg = LossConfig(tau=0.2)
    leaves = p.parameters() + [FT, FV, TGT]

    loss, _ = composed_loss(p, FT, FV, TGT, cfg)
    grads = torch.autograd.grad(loss, leaves)

    worst = 0.0
    for leaf, grad in zip(leaves, grads):
        flat = leaf.detach().reshape(-1)
        fd = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + step
            up, _ = composed_loss(p, FT, FV, TGT, cfg)
            flat[i] = orig - step
            down, _ = composed_loss(p, FT, FV, TGT, cfg)
            flat[i] = orig
            fd[i] = (float(up.detach()) - float(down.detach())) / (2.0 * step)
        ga = grad.reshape(-1)
        denom = max(float(torch.linalg.vector_norm(ga)), float(torch.linalg.vector_norm(fd)), 1e-12)
        worst = max(worst, float(torch.linalg.vector_norm(ga - fd)) / denom)
    return worst


class TestFusionParams:
    def test_initialize_starts_at_half(self):
        p = FusionParams.initialize(dim=16, seed=0)
        assert torch.equal(p.W2, torch.zeros(1, 16))
        assert torch.equal(p.b2, torch.zeros(1))
        lam = compute_lambda(p, torch.randn(16), torch.randn(16))
        assert float(lam) == 0.5

    def test_initialize_seeded(self):
        a = FusionParams.initialize(8, seed=3)
        b = FusionParams.initialize(8, seed=3)
        assert torch.equal(a.W1, b.W1)
        assert not torch.equal(a.W1, FusionParams.initialize(8, seed=4).W1)

    def test_hidden_defaults_to_dim(self):
        p = FusionParams.initialize(dim=12)
        assert p.hidden == 12 and p.dim == 12

    def test_shape_validation(self):
        with pytest.raises(ShapeError):
            FusionParams(torch.zeros(4, 7), torch.zeros(4), torch.zeros(1, 4), torch.zeros(1))
        with pytest.raises(ShapeError):
            FusionParams(torch.zeros(4, 8), torch.zeros(5), torch.zeros(1, 4), torch.zeros(1))

    def test_nonfinite_rejected(self):
        W1 = torch.zeros(2, 4)
        W1[0, 0] = float("inf")
        with pytest.raises(NumericDomainError):
            FusionParams(W1, torch.zeros(2), torch.zeros(1, 2), torch.zeros(1))

    def test_clone_is_detached(self):
        p = FusionParams.initialize(4, seed=1).requires_grad_(True)
        c = p.clone()
        assert not c.W1.requires_grad
        c.W1 += 1.0
        assert not torch.equal(c.W1, p.W1)


def test_fused_queries_exact_combination():
    rng = np.random.default_rng(31)
    p = params_from(rng, dim=6, hidden=4)
    FT = torch.tensor(rng.normal(size=(5, 6)), dtype=torch.float64)
    FV = torch.tensor(rng.normal(size=(5, 6)), dtype=torch.float64)
    fq, lam = fused_queries(p, FT, FV)
    expected = lam.unsqueeze(1) * FT + (1 - lam).unsqueeze(1) * FV
    assert torch.allclose(fq, expected, atol=1e-14)
    assert bool(((lam > 0) & (lam < 1)).all())


def test_cosine_matrix_against_numpy():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(4, 7))
    B = rng.normal(size=(6, 7))
    got = cosine_similarity_matrix(
        torch.tensor(A, dtype=torch.float64), torch.tensor(B, dtype=torch.float64)
    ).numpy()
    na = A / np.linalg.norm(A, axis=1, keepdims=True)
    nb = B / np.linalg.norm(B, axis=1, keepdims=True)
    np.testing.assert_allclose(got, na @ nb.T, atol=1e-12)
