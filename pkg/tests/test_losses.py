import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from attnda.attention import TransformSpec
from attnda.losses import (
    ABSTAIN,
    RegularizerParams,
    TrainingAbort,
    adversarial_loss,
    assign_pseudo_labels,
    attention_consistency_loss,
    attention_separability_loss,
    classification_loss,
    entropy,
    entropy_weight,
    foreground_mask,
    prediction_records,
    pseudo_loss,
    separability_sample,
    total_objective,
)

import oracles

FLIP = TransformSpec("flip")
P = RegularizerParams()


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def dirichlet(rng, n, k, conc=0.5):
    return rng.dirichlet(np.full(k, conc), size=n)


# -- classification / pseudo ------------------------------------------------------


def test_classification_certain_is_zero():
    assert float(classification_loss(t([[1.0, 0.0, 0.0]]), [0])) == pytest.approx(0.0, abs=1e-12)


def test_classification_half():
    assert float(classification_loss(t([[0.5, 0.5]]), [1])) == pytest.approx(math.log(2), rel=1e-12)


def test_classification_mean_invariance():
    one = classification_loss(t([[0.2, 0.8]]), [0])
    two = classification_loss(t([[0.2, 0.8], [0.2, 0.8]]), [0, 0])
    assert float(one) == pytest.approx(float(two), rel=1e-15)


def test_classification_clamps_zero_probability():
    assert float(classification_loss(t([[1.0, 0.0]]), [1])) == pytest.approx(-math.log(1e-12))


def test_classification_rejects_bad_input():
    with pytest.raises(ValueError):
        classification_loss(torch.zeros(0, 3), torch.zeros(0, dtype=torch.long))
    with pytest.raises(ValueError):
        classification_loss(t([[0.5, 0.5]]), [2])


def test_pseudo_labels_examples():
    out = assign_pseudo_labels(t([[0.9, 0.1], [0.6, 0.4], [0.85, 0.15]]), 0.85)
    assert out.tolist() == [0, ABSTAIN, ABSTAIN]


def test_pseudo_labels_tie_break_lowest_index():
    assert assign_pseudo_labels(t([[0.45, 0.45, 0.1]]), 0.4).tolist() == [0]


def test_pseudo_loss_all_abstain_zero():
    p = t([[0.5, 0.5], [0.6, 0.4]]).requires_grad_()
    loss = pseudo_loss(p, torch.tensor([ABSTAIN, ABSTAIN]))
    assert loss.item() == 0.0
    loss.backward()
    assert torch.all(p.grad == 0)


def test_pseudo_loss_single():
    assert float(pseudo_loss(t([[0.9, 0.1]]), torch.tensor([0]))) == pytest.approx(-math.log(0.9), rel=1e-12)
    assert -math.log(0.9) == pytest.approx(0.1054, abs=1e-4)


def test_pseudo_loss_mixed_equals_subset_mean():
    rng = np.random.default_rng(0)
    probs = dirichlet(rng, 8, 4, 0.3)
    pl = oracles.pseudo_labels(probs.tolist(), 0.7)
    assert any(v == -1 for v in pl) and any(v != -1 for v in pl)
    got = float(pseudo_loss(t(probs), assign_pseudo_labels(t(probs), 0.7)))
    keep = [i for i, v in enumerate(pl) if v != -1]
    assert got == pytest.approx(oracles.cross_entropy([probs[i] for i in keep], [pl[i] for i in keep]), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.99), st.floats(0.0, 0.99))
def test_gate_monotone_in_tau(seed, t1, t2):
    lo, hi = sorted((t1, t2))
    probs = t(dirichlet(np.random.default_rng(seed), 16, 5, 0.4))
    n_lo = int((assign_pseudo_labels(probs, lo) != ABSTAIN).sum())
    n_hi = int((assign_pseudo_labels(probs, hi) != ABSTAIN).sum())
    assert n_hi <= n_lo


# -- adversarial --------------------------------------------------------------


def test_adversarial_half():
    v = float(adversarial_loss(t([0.5, 0.5]), t([0.5, 0.5, 0.5])))
    assert v == pytest.approx(2 * math.log(0.5), rel=1e-12)
    assert v == pytest.approx(-1.3863, abs=1e-4)


def test_adversarial_perfect_discriminator_limit():
    v = float(adversarial_loss(t([1 - 1e-9]), t([1e-9])))
    assert -1e-8 < v < 0


def test_adversarial_permutation_invariant():
    rng = np.random.default_rng(2)
    s, d = rng.uniform(0.01, 0.99, 7), rng.uniform(0.01, 0.99, 5)
    a = float(adversarial_loss(t(s), t(d)))
    b = float(adversarial_loss(t(rng.permutation(s)), t(rng.permutation(d))))
    assert a == pytest.approx(b, rel=1e-14)


# -- consistency --------------------------------------------------------------


def test_consistency_equivariant_is_zero():
    a = torch.rand(3, 2, 4, 4, dtype=torch.float64)
    loss = attention_consistency_loss(a, torch.flip(a, dims=(-1,)), t([0.9, 0.9, 0.9]), P, FLIP)
    assert float(loss) == 0.0


def test_consistency_hand_example():
    original = t([[[[1, 0], [0, 0]]]])  # T(A) = [[0, 1], [0, 0]]
    abar = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
    assert float(attention_consistency_loss(original, abar, t([0.99]), P, FLIP)) == pytest.approx(0.25)


def test_consistency_gate():
    a, b = torch.rand(2, 3, 4, 4), torch.rand(2, 3, 4, 4)
    assert float(attention_consistency_loss(a, b, t([0.5, 0.85]), P, FLIP)) == 0.0
    assert float(attention_consistency_loss(a, b, t([0.5, 0.85]), P, FLIP, gate_all=True)) > 0


def test_consistency_gradient_flows_to_both_maps():
    a = torch.rand(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    b = torch.rand(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    attention_consistency_loss(a, b, t([0.9, 0.9]), P, FLIP).backward()
    assert a.grad.abs().sum() > 0 and b.grad.abs().sum() > 0


def test_consistency_mse_variant():
    original = t([[[[1, 0], [0, 0]]]])
    abar = t([[[[0, 0], [0, 3]]]])
    # T(A) - Abar = [[0, 1], [0, -3]] -> squared norm 10
    v = attention_consistency_loss(original, abar, t([0.99]), P, FLIP, distance="mse")
    assert float(v) == pytest.approx(10 / 4)


def test_consistency_shape_mismatch():
    with pytest.raises(ValueError):
        attention_consistency_loss(torch.rand(2, 3, 4, 4), torch.rand(2, 2, 4, 4), t([1, 1]), P, FLIP)


# -- mask / separability / entropy weight ---------------------------------------


def test_mask_midpoint():
    a = t([[0.0, 0.55], [1.0, 0.2]])
    m = foreground_mask(a, 100.0, 0.55)
    assert float(m[0, 1]) == pytest.approx(0.5, abs=1e-15)


def test_mask_extremes():
    a = t([[0.0, 1.0]])
    m = foreground_mask(a, 100.0, 0.55)
    assert abs(float(m[0, 1]) - 1.0) < 1e-12
    assert float(m[0, 0]) < 1e-12
    # analytic values
    assert float(m[0, 1]) == pytest.approx(1 / (1 + math.exp(-45)), rel=1e-15)
    assert float(m[0, 0]) == pytest.approx(1 / (1 + math.exp(55)), rel=1e-12)


def test_mask_all_zero_map_is_half():
    m = foreground_mask(torch.zeros(3, 3, dtype=torch.float64), 100.0, 0.55)
    assert torch.all(m == 0.5)


def test_separability_disjoint_zero():
    a = t([[1.0, 0.0], [0.5, 0.0]])
    b = t([[0.0, 2.0], [0.0, 1.0]])
    assert float(separability_sample(a, b, torch.ones_like(a))) == 0.0


def test_separability_identical_unit_mask_is_one():
    a = torch.rand(5, 5, dtype=torch.float64) + 0.1
    assert float(separability_sample(a, a.clone(), torch.ones_like(a))) == pytest.approx(1.0, abs=1e-15)


def test_separability_both_zero_guard():
    z = torch.zeros(3, 3)
    assert float(separability_sample(z, z, torch.ones_like(z))) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_separability_scale_invariant(seed, c):
    rng = np.random.default_rng(seed)
    a, b = t(rng.random((5, 5))), t(rng.random((5, 5)))
    v1 = separability_sample(a, b, foreground_mask(a, 100.0, 0.55))
    v2 = separability_sample(c * a, c * b, foreground_mask(c * a, 100.0 / c, 0.55))
    assert float(v1) == pytest.approx(float(v2), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_separability_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = t(rng.random((4, 6))), t(rng.random((4, 6)))
    v = float(separability_sample(a, b, foreground_mask(a, 100.0, 0.55)))
    assert 0.0 <= v <= 1.0


def test_separability_tie_gradient_goes_to_first_argument():
    a = t([[1.0, 2.0]]).requires_grad_()
    b = t([[1.0, 3.0]]).requires_grad_()
    separability_sample(a, b, torch.ones(1, 2, dtype=torch.float64)).backward()
    # numerator gradient at the tie lands on a only
    assert float(b.grad[0, 0]) < 0 and float(a.grad[0, 0]) > float(b.grad[0, 0])


def test_entropy_weight_values():
    assert float(entropy_weight(t([0.0, 1.0, 0.0]))) == 2.0
    assert float(entropy_weight(t([0.5, 0.5]))) == 1.5


def test_entropy_weight_closed_form():
    p = t([0.2, 0.3, 0.5])
    assert float(entropy_weight(p)) == pytest.approx(1 + float(torch.prod(p**p)), rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_entropy_weight_monotone(seed):
    rng = np.random.default_rng(seed)
    p1, p2 = dirichlet(rng, 2, 4, 0.7)
    h1, h2 = float(entropy(t(p1))), float(entropy(t(p2)))
    w1, w2 = float(entropy_weight(t(p1))), float(entropy_weight(t(p2)))
    if h1 < h2:
        assert w1 > w2
    elif h2 < h1:
        assert w2 > w1
    assert 1.0 < w1 <= 2.0


def test_separability_loss_gate_and_disjoint():
    pd = torch.rand(2, 3, 3)
    cf = torch.rand(2, 3, 3)
    assert float(attention_separability_loss(t([[0.5, 0.5], [0.6, 0.4]]), pd, cf, P)) == 0.0
    a = t([[[1.0, 0.0], [0.0, 0.0]]])
    b = t([[[0.0, 0.0], [0.0, 1.0]]])
    assert float(attention_separability_loss(t([[0.99, 0.01]]), a, b, P)) == 0.0


def test_separability_loss_two_confident_matches_loop():
    rng = np.random.default_rng(5)
    probs = np.array([[0.9, 0.06, 0.04], [0.02, 0.95, 0.03]])
    pd, cf = rng.normal(size=(2, 4, 4)), rng.normal(size=(2, 4, 4))
    got = float(attention_separability_loss(t(probs), t(pd), t(cf), P))
    ref = oracles.separability_loss(probs.tolist(), pd.tolist(), cf.tolist(), 0.85, 100.0, 0.55)
    assert got == pytest.approx(ref, rel=1e-9)
    assert got > 0


# -- total objective --------------------------------------------------------------


def test_total_reduces_without_regularizers():
    one = torch.tensor(1.0)
    b = total_objective(one, one, one, one, one, RegularizerParams(mu=0.0, lam=0.0))
    assert float(b.total) == 3.0


def test_total_arithmetic():
    one = torch.tensor(1.0, dtype=torch.float64)
    b = total_objective(one, one, one, one, one, RegularizerParams(mu=0.1, lam=0.2))
    assert float(b.total) == pytest.approx(3.3, rel=1e-15)


def test_total_independent_of_weights_when_terms_zero():
    one, zero = torch.tensor(1.0), torch.tensor(0.0)
    a = total_objective(one, one, one, zero, zero, RegularizerParams(mu=0.1, lam=0.2)).total
    b = total_objective(one, one, one, zero, zero, RegularizerParams(mu=5.0, lam=9.0)).total
    assert float(a) == float(b)


def test_total_aborts_on_nonfinite_component():
    one = torch.tensor(1.0)
    with pytest.raises(TrainingAbort) as info:
        total_objective(one, one, one, torch.tensor(float("nan")), one, P)
    assert info.value.component == "l_ac"


def test_backward_objective_flips_adversarial_sign():
    one = torch.tensor(1.0)
    b = total_objective(one, one, torch.tensor(-2.0), one, one, P)
    assert float(b.total) - float(b.backward_objective) == pytest.approx(-4.0)


def test_regularizer_params_defaults_and_validation():
    assert (P.tau, P.mu, P.lam, P.alpha, P.beta_fraction) == (0.85, 0.1, 0.2, 100.0, 0.55)
    d = RegularizerParams.digits()
    assert (d.tau, d.mu, d.lam) == (0.95, 0.3, 0.005)
    with pytest.raises(ValueError):
        RegularizerParams(beta_fraction=1.5)


def test_prediction_records():
    recs = prediction_records(t([[0.7, 0.2, 0.1], [0.1, 0.3, 0.6]]), 0.65)
    assert recs[0].pseudo_label == 0 and recs[0].confusing_label == 1
    assert recs[1].pseudo_label == ABSTAIN and recs[1].confusing_label == 1
    assert recs[0].confidence == pytest.approx(0.7)
    assert recs[0].entropy == pytest.approx(oracles.entropy([0.7, 0.2, 0.1]))
