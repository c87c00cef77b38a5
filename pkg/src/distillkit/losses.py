"""Distribution-matching objective and the two statistical constraints.

Feature groupings are mappings ``class_id -> tensor`` whose first axis indexes
samples. Every function is pure and differentiable in its tensor arguments.

* :func:`dm_loss` - squared distance between per-class feature means.
* :func:`cc_loss` - hinge on ``exp(alpha * ||f - mean||^2)`` pulling each
  synthetic embedding towards its class centre; ``beta`` is the threshold.
* :func:`class_covariance` / :func:`cm_loss` - local covariance of
  ``(d, hw)`` descriptor matrices and the squared Frobenius gap between the
  real and synthetic class covariances.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch

from .errors import ConfigError, ContractError, DegenerateStatisticsError, NumericError

# exp(80) ~ 5.5e34: far outside any useful penalty but still finite in float32.
EXPONENT_CLAMP = 80.0


@dataclass(frozen=True)
class LossWeights:
    lambda_cc: float = 0.05
    lambda_cm: float = 0.01
    alpha: float = 1.0
    beta: float = 0.1

    def __post_init__(self):
        if self.lambda_cc < 0:
            raise ConfigError("lambda_cc must be >= 0", field="weights.lambda_cc")
        if self.lambda_cm < 0:
            raise ConfigError("lambda_cm must be >= 0", field="weights.lambda_cm")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0", field="weights.alpha")
        if self.beta < 0:
            raise ConfigError("beta must be >= 0", field="weights.beta")

    def to_dict(self):
        return asdict(self)


@dataclass
class ClassCovariance:
    matrix: torch.Tensor
    class_id: int
    sample_count: int


def _groups(features) -> dict[int, torch.Tensor]:
    if isinstance(features, Mapping):
        return dict(features)
    return dict(enumerate(features))


def _same_classes(a: dict, b: dict, what: str):
    if set(a) != set(b):
        only = sorted(set(a) ^ set(b))
        raise ContractError(f"{what}: classes {only} present on one side only")


def dm_loss(real_features_per_class, syn_features_per_class) -> torch.Tensor:
    """Sum over classes of ``||mean(real_c) - mean(syn_c)||^2`` on pooled vectors."""
    real, syn = _groups(real_features_per_class), _groups(syn_features_per_class)
    _same_classes(real, syn, "dm_loss")
    total = None
    for c in sorted(real):
        r, s = real[c], syn[c]
        if r.shape[0] == 0 or s.shape[0] == 0:
            raise ContractError(f"dm_loss: class {c} has an empty feature group")
        diff = r.mean(dim=0) - s.mean(dim=0)
        term = (diff * diff).sum()
        total = term if total is None else total + term
    if total is None:
        raise ContractError("dm_loss: no classes given")
    return total


def cc_exponents(syn_embeddings_per_class, alpha: float) -> dict[int, torch.Tensor]:
    """``alpha * ||f_j - mean||^2`` per sample, before clamping; the class mean keeps its gradient."""
    out = {}
    for c, f in _groups(syn_embeddings_per_class).items():
        if f.shape[0] == 0:
            raise ContractError(f"cc_loss: class {c} has no embeddings")
        centred = f - f.mean(dim=0, keepdim=True)
        out[c] = alpha * (centred * centred).flatten(1).sum(dim=1)
    return out


def cc_loss(syn_embeddings_per_class, alpha: float, beta: float) -> torch.Tensor:
    """Class centralization: ``sum_c sum_j max(0, exp(alpha * ||f_j - mean_c||^2) - beta)``."""
    if alpha <= 0:
        raise ContractError("alpha must be > 0")
    exps = cc_exponents(syn_embeddings_per_class, alpha)
    if not exps:
        raise ContractError("cc_loss: no classes given")
    total = None
    for c in sorted(exps):
        term = torch.clamp(torch.exp(torch.clamp(exps[c], max=EXPONENT_CLAMP)) - beta, min=0.0).sum()
        total = term if total is None else total + term
    return total


def class_covariance(descriptors, class_id: int = 0) -> ClassCovariance:
    """Biased (1/n) covariance of local descriptor matrices.

    ``descriptors`` is ``(n, d, hw)`` (or a list of ``(d, hw)`` matrices);
    the result is ``(1/n) sum_i (D_i - D_bar)(D_i - D_bar)^T`` of shape ``(d, d)``.
    """
    if isinstance(descriptors, (list, tuple)):
        shapes = {tuple(x.shape) for x in descriptors}
        if len(shapes) > 1:
            raise ContractError(f"descriptor matrices disagree in shape: {sorted(shapes)}")
        descriptors = torch.stack(list(descriptors)) if descriptors else torch.empty(0, 0, 0)
    if descriptors.ndim != 3:
        raise ContractError(f"descriptors must be (n, d, hw), got {tuple(descriptors.shape)}")
    n = descriptors.shape[0]
    if n < 2:
        raise DegenerateStatisticsError(f"class {class_id}: covariance needs at least 2 samples, got {n}")
    dev = descriptors - descriptors.mean(dim=0, keepdim=True)
    matrix = torch.einsum("nij,nkj->ik", dev, dev) / n
    return ClassCovariance(matrix, int(class_id), int(n))


def covariances_by_class(feature_maps_per_class) -> dict[int, ClassCovariance]:
    """Reshape ``(n, d, h, w)`` feature maps to ``(n, d, hw)`` and take per-class covariances."""
    return {c: class_covariance(f.flatten(2), c) for c, f in _groups(feature_maps_per_class).items()}


def _cov_groups(covs) -> dict[int, ClassCovariance]:
    if isinstance(covs, Mapping):
        return dict(covs)
    return {cov.class_id: cov for cov in covs}


def cm_loss(real_cov_by_class, syn_cov_by_class) -> torch.Tensor:
    """Sum over classes of ``||Sigma_syn - Sigma_real||_F^2``."""
    real, syn = _cov_groups(real_cov_by_class), _cov_groups(syn_cov_by_class)
    _same_classes(real, syn, "cm_loss")
    total = None
    for c in sorted(real):
        a, b = syn[c].matrix, real[c].matrix
        if a.shape != b.shape:
            raise ContractError(f"cm_loss: class {c} covariance shapes {tuple(a.shape)} vs {tuple(b.shape)}")
        diff = a - b
        term = (diff * diff).sum()
        total = term if total is None else total + term
    if total is None:
        raise ContractError("cm_loss: no classes given")
    return total


def combined_loss(base, l_cc, l_cm, weights: LossWeights):
    """``base + lambda_cc * l_cc + lambda_cm * l_cm``; zero-weighted terms are dropped."""
    for name, value in (("base", base), ("cc", l_cc), ("cm", l_cm)):
        if value is None:
            continue
        v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
        if not math.isfinite(v):
            raise NumericError(f"non-finite {name} loss component: {v}", component=name)
    total = base
    if weights.lambda_cc != 0 and l_cc is not None:
        total = total + weights.lambda_cc * l_cc
    if weights.lambda_cm != 0 and l_cm is not None:
        total = total + weights.lambda_cm * l_cm
    return total


class DMBase:
    """Pluggable base objective: plain per-class mean matching.

    Any callable with the same signature ``(real_pooled, syn_pooled) -> scalar``
    can replace it in the engine.
    """

    name = "dm"
    min_ipc = 2

    def __call__(self, real_pooled: Mapping[int, torch.Tensor], syn_pooled: Mapping[int, torch.Tensor]):
        for c, f in syn_pooled.items():
            if f.shape[0] < self.min_ipc:
                raise DegenerateStatisticsError(
                    f"DM base needs at least {self.min_ipc} synthetic samples per class; class {c} has {f.shape[0]}"
                )
        return dm_loss(real_pooled, syn_pooled)


BASE_LOSSES = {"dm": DMBase}


def get_base_loss(name: str):
    if name == "idm":
        raise ConfigError("the IDM base objective is not available in this toolkit", field="base")
    try:
        return BASE_LOSSES[name]()
    except KeyError:
        raise ConfigError(f"unknown base loss {name!r}", field="base") from None
