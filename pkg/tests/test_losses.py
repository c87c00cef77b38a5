import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from distillkit.errors import ContractError, DegenerateStatisticsError, NumericError
from distillkit.losses import (
    ClassCovariance,
    DMBase,
    LossWeights,
    cc_loss,
    class_covariance,
    cm_loss,
    combined_loss,
    covariances_by_class,
    dm_loss,
    get_base_loss,
)

from oracles import (
    cc_loss_ref,
    central_difference,
    cm_loss_ref,
    covariance_ref,
    dm_loss_ref,
    relative_error,
)


def t64(x):
    return torch.tensor(np.asarray(x), dtype=torch.float64)


def random_instance(rng):
    C = int(rng.integers(1, 4))
    K = int(rng.integers(2, 6))
    B = int(rng.integers(2, 7))
    d = int(rng.integers(1, 5))
    hw = int(rng.integers(1, 7))
    return C, K, B, d, hw


# --- hand examples -------------------------------------------------------------------


def test_dm_identical_sets_is_zero():
    f = {0: t64([[1.0, 2.0], [3.0, 4.0]]), 1: t64([[0.5, 0.0]])}
    assert dm_loss(f, f).item() == 0.0


def test_dm_hand_example():
    real = {0: t64([[1.0, 0.0]])}
    syn = {0: t64([[0.0, 1.0]])}
    assert dm_loss(real, syn).item() == pytest.approx(2.0, abs=1e-12)


def test_cc_single_sample_class_is_zero_for_beta_one():
    f = {0: t64([[3.0, -1.0]]), 1: t64([[0.2, 7.0]])}
    assert cc_loss(f, alpha=1.0, beta=1.0).item() == 0.0


def test_cc_hand_example_two_e():
    f = {0: t64([[0.0], [2.0]])}
    assert cc_loss(f, alpha=1.0, beta=0.0).item() == pytest.approx(2 * math.e, abs=1e-9)
    assert cc_loss_ref({0: [[0.0], [2.0]]}, 1.0, 0.0) == pytest.approx(2 * math.e, abs=1e-12)


def test_covariance_identical_samples_is_zero():
    x = t64([[[1.0, 2.0], [0.5, -1.0]]] * 2)
    assert torch.count_nonzero(class_covariance(x).matrix) == 0


def test_covariance_hand_example():
    cov = class_covariance(t64([[[1.0, 0.0]], [[0.0, 1.0]]]))
    assert cov.matrix.shape == (1, 1)
    assert cov.matrix.item() == pytest.approx(0.5, abs=1e-12)
    assert cov.sample_count == 2


def test_cm_chained_hand_example():
    syn = class_covariance(t64([[[1.0, 0.0]], [[0.0, 1.0]]]), 0)
    real = class_covariance(t64([[[2.0, 0.0]], [[0.0, 2.0]]]), 0)
    assert real.matrix.item() == pytest.approx(2.0, abs=1e-12)
    assert cm_loss([real], [syn]).item() == pytest.approx(2.25, abs=1e-9)
    assert cm_loss_ref({0: real.matrix.numpy()}, {0: syn.matrix.numpy()}) == pytest.approx(2.25, abs=1e-12)


def test_combined_zero_weights_returns_base_exactly():
    base = torch.tensor(0.123456789, dtype=torch.float64)
    out = combined_loss(base, torch.tensor(5.0), torch.tensor(7.0), LossWeights(0.0, 0.0, 1.0, 0.0))
    assert out.item() == base.item()


def test_combined_default_weights_example():
    out = combined_loss(torch.tensor(1.0, dtype=torch.float64), torch.tensor(2.0, dtype=torch.float64),
                        torch.tensor(3.0, dtype=torch.float64), LossWeights(0.05, 0.01))
    assert out.item() == pytest.approx(1.13, abs=1e-12)


def test_combined_is_linear():
    w = LossWeights(0.05, 0.01)
    args = [torch.tensor(v, dtype=torch.float64) for v in (0.7, 1.9, 4.2)]
    single = combined_loss(*args, w).item()
    double = combined_loss(*(2 * a for a in args), w).item()
    assert double == pytest.approx(2 * single, rel=1e-12)


@pytest.mark.parametrize("bad", ["base", "cc", "cm"])
def test_combined_rejects_non_finite_component(bad):
    vals = {"base": torch.tensor(1.0), "cc": torch.tensor(1.0), "cm": torch.tensor(1.0)}
    vals[bad] = torch.tensor(float("nan"))
    with pytest.raises(NumericError) as info:
        combined_loss(vals["base"], vals["cc"], vals["cm"], LossWeights())
    assert info.value.component == bad


# --- contract errors -------------------------------------------------------------------


def test_dm_class_on_one_side_only():
    with pytest.raises(ContractError):
        dm_loss({0: t64([[1.0]]), 1: t64([[1.0]])}, {0: t64([[1.0]])})


def test_cc_empty_group():
    with pytest.raises(ContractError):
        cc_loss({0: torch.zeros(0, 3)}, 1.0, 0.0)


def test_covariance_needs_two_samples():
    with pytest.raises(DegenerateStatisticsError):
        class_covariance(torch.zeros(1, 3, 4))


def test_cm_dimension_mismatch():
    a = ClassCovariance(torch.zeros(2, 2), 0, 3)
    b = ClassCovariance(torch.zeros(3, 3), 0, 3)
    with pytest.raises(ContractError):
        cm_loss([a], [b])


def test_dm_base_rejects_single_image_classes():
    with pytest.raises(DegenerateStatisticsError):
        DMBase()({0: torch.zeros(4, 2)}, {0: torch.zeros(1, 2)})


def test_idm_base_is_documented_unavailable():
    from distillkit.errors import ConfigError

    with pytest.raises(ConfigError, match="IDM"):
        get_base_loss("idm")


def test_cc_exponent_clamp_keeps_loss_finite():
    f = {0: t64([[0.0], [100.0]])}
    assert math.isfinite(cc_loss(f, alpha=1.0, beta=0.0).item())


# --- oracle equivalence over random small instances --------------------------------------


def test_oracle_equivalence_random_instances():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        C, K, B, d, hw = random_instance(rng)
        real_maps = {c: rng.normal(size=(B, d, hw)) for c in range(C)}
        syn_maps = {c: rng.normal(size=(K, d, hw)) for c in range(C)}
        real_vec = {c: m.mean(axis=2) for c, m in real_maps.items()}
        syn_vec = {c: m.mean(axis=2) for c, m in syn_maps.items()}
        alpha = float(rng.uniform(0.05, 1.0))
        beta = float(rng.uniform(0.0, 2.0))

        got = dm_loss({c: t64(v) for c, v in real_vec.items()}, {c: t64(v) for c, v in syn_vec.items()}).item()
        assert relative_error(got, dm_loss_ref(real_vec, syn_vec)) < 1e-6

        got = cc_loss({c: t64(v) for c, v in syn_vec.items()}, alpha, beta).item()
        want = cc_loss_ref(syn_vec, alpha, beta)
        assert abs(got - want) <= 1e-6 * max(abs(want), 1e-12)

        real_cov = {c: class_covariance(t64(m), c) for c, m in real_maps.items()}
        syn_cov = {c: class_covariance(t64(m), c) for c, m in syn_maps.items()}
        for c in range(C):
            assert relative_error(real_cov[c].matrix.numpy(), covariance_ref(real_maps[c])) < 1e-6
            assert relative_error(syn_cov[c].matrix.numpy(), covariance_ref(syn_maps[c])) < 1e-6

        got = cm_loss(real_cov, syn_cov).item()
        want = cm_loss_ref({c: covariance_ref(m) for c, m in real_maps.items()},
                           {c: covariance_ref(m) for c, m in syn_maps.items()})
        assert relative_error(got, want) < 1e-6


# --- gradients against central differences ---------------------------------------------------


def _fd_check(loss_of_numpy, x0):
    x = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    loss_of_numpy(x).backward()
    numeric = central_difference(lambda a: loss_of_numpy(torch.tensor(a)).item(), x0, eps=1e-5)
    return relative_error(x.grad.numpy(), numeric)


def test_dm_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    real = {c: t64(rng.normal(size=(6, 4))) for c in range(3)}
    syn0 = rng.normal(size=(3, 5, 4))
    err = _fd_check(lambda s: dm_loss(real, {c: s[c] for c in range(3)}), syn0)
    assert err < 1e-4


def test_cc_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    syn0 = rng.normal(scale=0.5, size=(3, 5, 4))
    err = _fd_check(lambda s: cc_loss({c: s[c] for c in range(3)}, alpha=0.7, beta=1.5), syn0)
    assert err < 1e-4


def test_cm_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    real = covariances_by_class({c: t64(rng.normal(size=(6, 3, 2, 3))) for c in range(2)})
    syn0 = rng.normal(size=(2, 4, 3, 2, 3))
    err = _fd_check(lambda s: cm_loss(real, covariances_by_class({c: s[c] for c in range(2)})), syn0)
    assert err < 1e-4


# --- properties -----------------------------------------------------------------------------------

arrays = st.integers(min_value=0, max_value=2**31 - 1)


@settings(max_examples=40, deadline=None)
@given(seed=arrays, b1=st.floats(0, 3), b2=st.floats(0, 3))
def test_cc_non_increasing_in_beta(seed, b1, b2):
    rng = np.random.default_rng(seed)
    f = {c: t64(rng.normal(scale=0.6, size=(4, 3))) for c in range(2)}
    lo, hi = min(b1, b2), max(b1, b2)
    assert cc_loss(f, 1.0, lo).item() >= cc_loss(f, 1.0, hi).item()


@settings(max_examples=40, deadline=None)
@given(seed=arrays)
def test_cm_zero_on_self_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = covariances_by_class({c: t64(rng.normal(size=(5, 3, 2, 2))) for c in range(2)})
    b = covariances_by_class({c: t64(rng.normal(size=(4, 3, 2, 2))) for c in range(2)})
    assert cm_loss(a, a).item() == 0.0
    assert cm_loss(a, b).item() == pytest.approx(cm_loss(b, a).item(), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=arrays, n=st.integers(2, 6), d=st.integers(1, 4), hw=st.integers(1, 6))
def test_covariance_is_symmetric_psd(seed, n, d, hw):
    rng = np.random.default_rng(seed)
    m = class_covariance(t64(rng.normal(size=(n, d, hw)))).matrix
    assert torch.allclose(m, m.T, atol=1e-6)
    assert torch.linalg.eigvalsh(m).min().item() >= -1e-6


@settings(max_examples=30, deadline=None)
@given(seed=arrays)
def test_losses_invariant_to_sample_order(seed):
    rng = np.random.default_rng(seed)
    real = {c: t64(rng.normal(size=(6, 3, 2, 2))) for c in range(2)}
    syn = {c: t64(rng.normal(size=(5, 3, 2, 2))) for c in range(2)}
    perm_real = {c: m[torch.from_numpy(rng.permutation(m.shape[0]))] for c, m in real.items()}
    perm_syn = {c: m[torch.from_numpy(rng.permutation(m.shape[0]))] for c, m in syn.items()}
    pool = lambda g: {c: m.mean(dim=(2, 3)) for c, m in g.items()}  # noqa: E731
    pairs = [
        (dm_loss(pool(real), pool(syn)), dm_loss(pool(perm_real), pool(perm_syn))),
        (cc_loss(pool(syn), 0.8, 1.2), cc_loss(pool(perm_syn), 0.8, 1.2)),
        (cm_loss(covariances_by_class(real), covariances_by_class(syn)),
         cm_loss(covariances_by_class(perm_real), covariances_by_class(perm_syn))),
    ]
    for a, b in pairs:
        assert abs(a.item() - b.item()) <= 1e-9 * max(1.0, abs(a.item()))
