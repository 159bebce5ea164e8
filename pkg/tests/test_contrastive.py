import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from lak.contrastive import (ContrastiveConfig, beta_coefficients, contrastive_loss, label_similarity,
                             pairwise_distance, total_loss)


def test_label_similarity_examples():
    Y = torch.tensor([[1, 1, 1, 0], [1, 1, 1, 0], [0, 0, 0, 1]])
    sim = label_similarity(Y)
    assert sim[0, 1] == 3 and sim[0, 2] == 0
    assert torch.equal(sim, sim.T)


def test_label_similarity_loop_oracle():
    rng = np.random.default_rng(0)
    Y = rng.integers(0, 2, (4, 6))
    sim = label_similarity(torch.from_numpy(Y))
    for i in range(4):
        for j in range(4):
            assert sim[i, j] == sum(int(Y[i, t] and Y[j, t]) for t in range(6))


def test_beta_three_vector_fixture():
    Y = torch.tensor([[1, 1, 0], [1, 0, 0], [0, 1, 0]])
    beta = beta_coefficients(label_similarity(Y))
    assert beta[0, 1].item() == pytest.approx(0.5, abs=1e-12)
    assert beta[0, 2].item() == pytest.approx(0.5, abs=1e-12)


def test_beta_zero_rows_and_single_pair():
    Y = torch.tensor([[0, 0], [1, 0], [1, 0], [0, 1]])
    beta = beta_coefficients(label_similarity(Y))
    assert not beta[0].any() and not beta[3].any()
    assert beta[1, 2] == 1 and beta[2, 1] == 1
    assert not beta.diagonal().any()


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(1, 6), st.integers(0, 10_000))
def test_beta_rows_sum_to_one_or_zero(b, l, seed):
    Y = torch.from_numpy(np.random.default_rng(seed).integers(0, 2, (b, l)))
    sim = label_similarity(Y)
    sums = beta_coefficients(sim).sum(1)
    shares = (sim.sum(1) - sim.diagonal()) > 0
    assert torch.allclose(sums, shares.double(), atol=1e-12)


def test_identical_batch_three_ln2():
    Z = torch.ones(3, 5, dtype=torch.float64)
    Y = torch.tensor([[1, 0, 1]] * 3)
    assert contrastive_loss(Z, Y).item() == pytest.approx(3 * math.log(2), abs=1e-6)


def test_no_shared_labels_zero_loss():
    Z = torch.randn(3, 4, dtype=torch.float64)
    Y = torch.tensor([[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    assert contrastive_loss(Z, Y).item() == 0.0


def test_batch_of_one_contributes_zero():
    Z = torch.randn(1, 4, requires_grad=True)
    loss = contrastive_loss(Z, torch.tensor([[1, 1]]))
    assert loss.item() == 0.0
    loss.backward()


@pytest.mark.parametrize("squared", [False, True])
@pytest.mark.parametrize("seed", range(5))
def test_loop_oracle(seed, squared):
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((4, 3))
    Y = rng.integers(0, 2, (4, 5))
    tau = rng.uniform(0.3, 3.0)
    ours = contrastive_loss(torch.from_numpy(Z), torch.from_numpy(Y), tau, squared).item()
    assert abs(ours - oracles.contrastive_loops(Z, Y, tau, squared)) < 1e-8


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_nonnegative_and_translation_invariant(b, seed):
    rng = np.random.default_rng(seed)
    Z = torch.from_numpy(rng.standard_normal((b, 4)))
    Y = torch.from_numpy(rng.integers(0, 2, (b, 3)))
    loss = contrastive_loss(Z, Y, 0.7)
    assert loss.item() >= 0
    shift = torch.from_numpy(rng.standard_normal(4) * 10)
    assert contrastive_loss(Z + shift, Y, 0.7).item() == pytest.approx(loss.item(), abs=1e-9)


def test_gradient_check():
    rng = np.random.default_rng(3)
    Z = torch.from_numpy(rng.standard_normal((5, 4))).requires_grad_()
    Y = torch.from_numpy(rng.integers(0, 2, (5, 3)))
    for squared in (False, True):
        (err,) = oracles.gradient_errors(lambda: contrastive_loss(Z, Y, 0.8, squared), [Z])
        assert err < 1e-4


def test_coincident_points_gradient_finite():
    Z = torch.zeros(3, 2, dtype=torch.float64, requires_grad=True)
    contrastive_loss(Z, torch.tensor([[1], [1], [1]])).backward()
    assert torch.isfinite(Z.grad).all()
    assert pairwise_distance(Z).sum().item() == 0


@pytest.mark.parametrize("seed", range(10))
def test_one_step_pulls_positive_pair(seed):
    Z = torch.randn(3, 8, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)).requires_grad_()
    Y = torch.tensor([[1, 0], [1, 0], [0, 1]])

    def gap(z):
        d = pairwise_distance(z.detach())
        return (d[0, 1] - d[0, 2]).item()

    before = gap(Z)
    opt = torch.optim.SGD([Z], lr=1e-3)
    contrastive_loss(Z, Y).backward()
    opt.step()
    assert gap(Z) < before


def test_one_step_on_synthetic_representations(synth200):
    from lak.model import LabelAttentionClassifier, ModelSpec
    from lak.training import TrainConfig, build_vocabulary

    Y = synth200.label_matrix()
    shared = Y @ Y.T
    i, j = next((i, j) for i in range(len(Y)) for j in range(i + 1, len(Y)) if shared[i, j] > 0)
    k = next(k for k in range(len(Y)) if shared[i, k] == 0 and shared[j, k] == 0 and Y[k].any())
    model = LabelAttentionClassifier(build_vocabulary(synth200, TrainConfig()), synth200.categories,
                                     ModelSpec(dtype="float64"))
    texts = synth200.texts()
    Z = model.represent([texts[i], texts[j], texts[k]]).clone().requires_grad_()
    labels = torch.from_numpy(Y[[i, j, k]])

    def gap():
        d = pairwise_distance(Z.detach())
        return (d[0, 1] - d[0, 2]).item()

    before = gap()
    opt = torch.optim.SGD([Z], lr=1e-3)
    contrastive_loss(Z, labels).backward()
    opt.step()
    assert gap() < before


def test_total_loss():
    bce, con = torch.tensor(2.0), torch.tensor(0.5)
    assert total_loss(bce, con, 0.0).item() == 2.0
    assert total_loss(bce, con, 0.2).item() == pytest.approx(2.1)
    assert total_loss(bce, torch.tensor(0.0), 1.0).item() == 2.0


def test_config_validation():
    with pytest.raises(ValueError):
        ContrastiveConfig(temperature=0)
    with pytest.raises(ValueError):
        contrastive_loss(torch.zeros(2, 2), torch.ones(2, 1), temperature=-1)
