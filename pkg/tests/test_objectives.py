import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from msalign import tensor_core as tc
from msalign.config import LossConfig
from msalign.errors import ContractError, NumericalError
from msalign.objectives import (cma_directions, cma_loss, csmmc_loss, mmc_loss, mscma_loss,
                                total_loss, triplet_from_similarity, triplet_loss)
from msalign.tensor_core import GradTape, Tensor, backward

scores = st.floats(-1, 1, allow_nan=False)


def random_stack(rng, n, b):
    return [np.tanh(rng.normal(size=(b, b)) * 2) for _ in range(n)]


# ---------------------------------------------------------------- triplet

def test_triplet_hand_value_from_vectors():
    # cos(v1,t1)=cos(v2,t2)=0.3 and cos(v1,t2)=cos(v2,t1)=0.4
    image = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    r = math.sqrt(0.75)
    text = np.array([[0.3, 0.4, r], [0.4, 0.3, r]])
    loss = triplet_loss(image, text, LossConfig(margin=0.2)).item()
    assert loss == pytest.approx(4 * 0.3, abs=1e-14)


def test_triplet_zero_when_margins_hold():
    sim = np.array([[0.9, 0.1, -0.2], [0.0, 0.8, 0.3], [0.2, 0.1, 0.7]])
    for strategy in ("hardest", "sum_all"):
        assert triplet_from_similarity(sim, 0.2, strategy).item() == 0.0


def test_triplet_strategies_agree_for_two_pairs():
    sim = np.array([[0.3, 0.45], [0.1, 0.2]])
    assert triplet_from_similarity(sim, 0.2, "hardest").item() == \
        triplet_from_similarity(sim, 0.2, "sum_all").item()


def test_triplet_needs_two_pairs():
    with pytest.raises(ContractError):
        triplet_loss(np.ones((1, 3)), np.ones((1, 3)), LossConfig())


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 4), elements=scores))
def test_triplet_nonnegative_and_zero_iff_hinges_inactive(sim):
    for strategy in ("hardest", "sum_all"):
        loss = triplet_from_similarity(sim, 0.2, strategy).item()
        off = ~np.eye(4, dtype=bool)
        gaps = np.concatenate([(0.2 - np.diag(sim)[:, None] + sim)[off],
                               (0.2 - np.diag(sim)[None, :] + sim)[off]])
        assert loss >= 0
        assert (loss == 0) == bool(np.all(gaps <= 0))


# ---------------------------------------------------------------- contrastive

def test_cma_identity_hand_value():
    want = -math.log(math.e / (math.e + 1))
    assert cma_loss(np.eye(2), 1.0).item() == pytest.approx(want, abs=1e-15)
    assert cma_loss(np.eye(2), 1.0).item() == pytest.approx(0.31326, abs=1e-5)


def test_cma_saturated_diagonal():
    assert cma_loss(np.eye(4), 1e-3).item() < 1e-12


def test_cma_constant_matrix_is_log_b():
    assert cma_loss(np.full((8, 8), 0.37), 0.1).item() == pytest.approx(math.log(8), abs=1e-9)


def test_cma_rejects_non_square():
    with pytest.raises(ContractError, match="square"):
        cma_loss(np.zeros((2, 3)), 0.1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (5, 5), elements=scores), arrays(np.float64, 5, elements=st.floats(-3, 3)))
def test_cma_direction_shift_invariance(m, c):
    i2t, t2i = (x.item() for x in cma_directions(m, 0.1))
    assert cma_directions(m + c[:, None], 0.1)[0].item() == pytest.approx(i2t, abs=1e-9)
    assert cma_directions(m + c[None, :], 0.1)[1].item() == pytest.approx(t2i, abs=1e-9)


def test_mscma_additivity():
    rng = np.random.default_rng(0)
    m = random_stack(rng, 1, 6)[0]
    assert mscma_loss([m], 0.1).item() == cma_loss(m, 0.1).item()
    assert mscma_loss([m] * 3, 0.1).item() == pytest.approx(3 * cma_loss(m, 0.1).item(), rel=1e-14)


def _cma_numpy(m, tau):
    z = m / tau
    rows = z - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True)) - z.max(1, keepdims=True)
    cols = z - np.log(np.exp(z - z.max(0, keepdims=True)).sum(0, keepdims=True)) - z.max(0, keepdims=True)
    return -0.5 * (np.diag(rows).mean() + np.diag(cols).mean())


def test_mscma_matches_independent_evaluation():
    stack = random_stack(np.random.default_rng(1), 4, 6)
    want = sum(_cma_numpy(m, 0.1) for m in stack)
    assert mscma_loss(stack, 0.1).item() == pytest.approx(want, rel=1e-13)


def test_mscma_rejects_empty_stack():
    with pytest.raises(ContractError):
        mscma_loss([], 0.1)


# ---------------------------------------------------------------- consistency

def test_csmmc_identical_scales_zero():
    m = random_stack(np.random.default_rng(2), 1, 6)[0]
    assert abs(csmmc_loss([m, m, m, m], 1.0).item()) <= 1e-12


def test_mmc_two_outcome_hand_value():
    p = np.array([math.e, 1.0]) / (math.e + 1)
    want = float(np.sum(p * (np.log(p) - np.log(p[::-1]))))
    got = csmmc_loss([np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])], 1.0).item()
    assert got == pytest.approx(want, abs=1e-15)
    assert got == pytest.approx(0.4622, abs=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(1, 6))
def test_csmmc_nonnegative(seed, n, b):
    assert csmmc_loss(random_stack(np.random.default_rng(seed), n, b), 0.7).item() >= 0.0


def test_csmmc_needs_two_scales():
    with pytest.raises(ContractError):
        csmmc_loss([np.eye(3)], 1.0)


def test_csmmc_is_sum_of_row_kls_to_last_scale():
    stack = random_stack(np.random.default_rng(3), 3, 4)
    want = sum(mmc_loss(m, stack[-1], 0.5).item() for m in stack[:-1])
    assert csmmc_loss(stack, 0.5).item() == pytest.approx(want, rel=1e-14)


def test_detached_teacher_gets_no_gradient():
    stack = random_stack(np.random.default_rng(4), 3, 5)
    for detached, expect_zero in ((True, True), (False, False)):
        tape = GradTape()
        live = [tape.watch(m) for m in stack]
        grads = backward(csmmc_loss(live, 1.0, teacher_detached=detached))
        g_teacher = grads[live[-1].tape_id].data
        assert np.all(g_teacher == 0.0) == expect_zero
        assert np.any(grads[live[0].tape_id].data)


# ---------------------------------------------------------------- total and invariances

def test_total_loss_values():
    assert total_loss(0.7, 5.0, 9.0, 0.0, 0.0).item() == 0.7
    assert total_loss(1.0, 2.0, 3.0, 15.0, 10.0).item() == 61.0
    assert total_loss(0.0, 0.0, 0.0, 15.0, 10.0).item() == 0.0


@pytest.mark.parametrize("bad", ["L_tri", "L_MSCMA", "L_CSMMC"])
def test_total_loss_names_non_finite_component(bad):
    parts = {"L_tri": 1.0, "L_MSCMA": 1.0, "L_CSMMC": 1.0, bad: float("nan")}
    with pytest.raises(NumericalError, match=bad):
        total_loss(parts["L_tri"], parts["L_MSCMA"], parts["L_CSMMC"], 1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_losses_invariant_under_joint_permutation(seed):
    rng = np.random.default_rng(seed)
    b = 5
    perm = rng.permutation(b)
    stack = random_stack(rng, 3, b)
    pstack = [m[np.ix_(perm, perm)] for m in stack]
    image, text = rng.normal(size=(b, 4)), rng.normal(size=(b, 4))
    for strategy in ("hardest", "sum_all"):
        cfg = LossConfig(negative_strategy=strategy)
        assert triplet_loss(image[perm], text[perm], cfg).item() == \
            pytest.approx(triplet_loss(image, text, cfg).item(), abs=1e-12)
    assert cma_loss(pstack[0], 0.1).item() == pytest.approx(cma_loss(stack[0], 0.1).item(), abs=1e-12)
    assert mscma_loss(pstack, 0.1).item() == pytest.approx(mscma_loss(stack, 0.1).item(), abs=1e-12)
    assert csmmc_loss(pstack, 1.0).item() == pytest.approx(csmmc_loss(stack, 1.0).item(), abs=1e-12)


def test_loss_gradients_match_finite_differences():
    stack = random_stack(np.random.default_rng(5), 3, 4)

    def f(ms):
        return total_loss(triplet_from_similarity(ms[0], 0.2, "sum_all"), mscma_loss(ms, 0.1),
                          csmmc_loss(ms, 1.0, teacher_detached=False), 15.0, 10.0)

    assert tc.grad_check(f, stack, probes=48) < 1e-6
