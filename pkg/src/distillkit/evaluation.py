"""Evaluation harness: train-from-scratch accuracy, coreset baselines,
cross-architecture tests, ablation sweeps, continual learning and
feature-space diagnostics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from . import augment as aug
from .datasets import LabeledImageSet, SyntheticDataset, from_selection
from .engine import DistillConfig, Embedder, distill
from .errors import ConfigError, ContractError, DegenerateStatisticsError
from .io import config_hash
from .losses import class_covariance
from .models import ExtractorSpec, TrainRecipe, accuracy, extract, sample_params, train_classifier

log = logging.getLogger(__name__)


@dataclass
class EvalReport:
    top1_mean: float
    top1_std: float
    repeats: int
    trained_on: str
    arch: str
    config_hash: str
    accuracies: list[float] = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _seed(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**62))
    return int(rng)


def _train_arrays(data) -> tuple[torch.Tensor, torch.Tensor, str]:
    if isinstance(data, SyntheticDataset):
        return (
            data.pixels.detach().float().clone(),
            torch.from_numpy(np.array(data.labels)),
            str(data.provenance.get("method", "synthetic")),
        )
    return torch.from_numpy(data.images), torch.from_numpy(data.labels), "full"


def evaluate_from_scratch(
    syn,
    arch: ExtractorSpec,
    test: LabeledImageSet,
    repeats: int = 5,
    rng=0,
    recipe: TrainRecipe | None = None,
    augment_policy: aug.AugmentPolicy | None = None,
) -> EvalReport:
    """Train ``repeats`` freshly initialized ``arch`` classifiers on ``syn`` and test each.

    ``syn`` may be a SyntheticDataset (distilled or coreset) or a full
    LabeledImageSet. The standard deviation is the population std over repeats.
    """
    if repeats < 1:
        raise ConfigError("repeats must be >= 1", field="eval.repeats")
    recipe = recipe or TrainRecipe()
    policy = augment_policy if augment_policy is not None else aug.AugmentPolicy()
    x, y, kind = _train_arrays(syn)
    n_classes = int(y.max()) + 1
    if test.num_classes != n_classes:
        raise ContractError(f"test set has {test.num_classes} classes, training data has {n_classes}")
    x_test, y_test = torch.from_numpy(test.images), torch.from_numpy(test.labels)
    base_seed = _seed(rng)
    accs = []
    for r in range(repeats):
        seed = int(np.random.SeedSequence(entropy=base_seed, spawn_key=(r,)).generate_state(1, np.uint64)[0] >> 2)
        model = train_classifier(arch, x, y, n_classes, recipe, seed, augment_policy=policy)
        accs.append(accuracy(model, x_test, y_test))
    h = config_hash({"arch": arch.to_dict(), "recipe": recipe.to_dict(), "augment": policy.to_dict(), "seed": base_seed})
    return EvalReport(float(np.mean(accs)), float(np.std(accs)), repeats, kind, arch.family, h, accs)


# --- coreset baselines ---------------------------------------------------------


@torch.no_grad()
def _embed_numpy(embedder: Embedder, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    outs = []
    for start in range(0, len(images), batch_size):
        x = torch.from_numpy(images[start:start + batch_size]).to(next(iter(embedder.params.tensors.values())).dtype)
        outs.append(embedder.embed(x).double().numpy())
    return np.concatenate(outs)


def _check_class_sizes(data: LabeledImageSet, K: int):
    if K < 1:
        raise ConfigError("K must be >= 1")
    for c, idx in data.class_index.items():
        if len(idx) < K:
            raise ConfigError(f"class {c} has {len(idx)} samples, fewer than K={K}")


def herding_order(features: np.ndarray, K: int) -> list[int]:
    """Greedy picks making the running mean of the selection track the full mean."""
    mu = features.mean(axis=0)
    chosen: list[int] = []
    running = np.zeros_like(mu)
    available = np.ones(len(features), dtype=bool)
    for k in range(1, K + 1):
        candidate_means = (running[None, :] + features) / k
        dist = np.sum((candidate_means - mu) ** 2, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        available[i] = False
        running += features[i]
    return chosen


def kcenter_order(features: np.ndarray, K: int) -> list[int]:
    """Farthest-point traversal started from the sample nearest the mean."""
    mu = features.mean(axis=0)
    first = int(np.argmin(np.sum((features - mu) ** 2, axis=1)))
    chosen = [first]
    min_dist = np.sum((features - features[first]) ** 2, axis=1)
    min_dist[first] = -np.inf
    for _ in range(K - 1):
        i = int(np.argmax(min_dist))
        chosen.append(i)
        min_dist = np.minimum(min_dist, np.sum((features - features[i]) ** 2, axis=1))
        min_dist[chosen] = -np.inf
    return chosen


def coreset_random(data: LabeledImageSet, K: int, embed=None, rng=0) -> SyntheticDataset:
    _check_class_sizes(data, K)
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    picks = [data.class_index[c][gen.choice(len(data.class_index[c]), K, replace=False)] for c in range(data.num_classes)]
    return from_selection(data, picks, "coreset-random")


def coreset_herding(data: LabeledImageSet, K: int, embed: Embedder, rng=None) -> SyntheticDataset:
    _check_class_sizes(data, K)
    picks = []
    for c in range(data.num_classes):
        idx = data.class_index[c]
        picks.append(idx[herding_order(_embed_numpy(embed, data.images[idx]), K)])
    return from_selection(data, picks, "coreset-herding")


def coreset_kcenter(data: LabeledImageSet, K: int, embed: Embedder, rng=None) -> SyntheticDataset:
    _check_class_sizes(data, K)
    picks = []
    for c in range(data.num_classes):
        idx = data.class_index[c]
        picks.append(idx[kcenter_order(_embed_numpy(embed, data.images[idx]), K)])
    return from_selection(data, picks, "coreset-kcenter")


CORESETS = {"random": coreset_random, "herding": coreset_herding, "kcenter": coreset_kcenter}


def cross_architecture(syn, arch_list: Sequence[ExtractorSpec], test, repeats=5, rng=0, recipe=None,
                       augment_policy=None) -> list[EvalReport]:
    seed = _seed(rng)
    return [evaluate_from_scratch(syn, arch, test, repeats, seed, recipe, augment_policy) for arch in arch_list]


# --- diagnostics -----------------------------------------------------------------


@dataclass
class DiagnosticsRecord:
    dispersion: list[float]
    covariance_gap: list[float]
    inter_intra_ratio: float
    projection_syn: list[tuple[float, float, int]] = field(default_factory=list, repr=False)
    projection_real: list[tuple[float, float, int]] = field(default_factory=list, repr=False)

    @property
    def mean_dispersion(self) -> float:
        return float(np.mean(self.dispersion))

    @property
    def mean_covariance_gap(self) -> float:
        return float(np.mean(self.covariance_gap))

    def summary(self) -> dict:
        return {
            "dispersion": self.dispersion,
            "covariance_gap": self.covariance_gap,
            "inter_intra_ratio": self.inter_intra_ratio,
            "mean_dispersion": self.mean_dispersion,
            "mean_covariance_gap": self.mean_covariance_gap,
        }


def class_dispersion(features: np.ndarray, labels: np.ndarray) -> tuple[list[float], float]:
    """Per-class mean squared distance to the class mean, and between/within ratio."""
    classes = np.unique(labels)
    intra, means = [], []
    for c in classes:
        f = features[labels == c]
        m = f.mean(axis=0)
        means.append(m)
        intra.append(float(np.mean(np.sum((f - m) ** 2, axis=1))))
    means = np.stack(means)
    inter = float(np.mean(np.sum((means - means.mean(axis=0)) ** 2, axis=1)))
    within = float(np.mean(intra))
    ratio = inter / within if within > 0 else math.inf
    return intra, ratio


@torch.no_grad()
def covariance_gaps(syn_images: np.ndarray, syn_labels: np.ndarray, real: LabeledImageSet,
                    spec: ExtractorSpec, extractor_seed: int, max_real: int = 256) -> list[float]:
    """Per-class Frobenius distance between synthetic and real local covariances
    under one seeded random extractor. At most ``max_real`` real samples per class."""
    params = sample_params(spec, extractor_seed)
    gaps = []
    for c in range(real.num_classes):
        s = torch.from_numpy(syn_images[syn_labels == c])
        r = torch.from_numpy(real.images[real.class_index[c][:max_real]])
        cov_s = class_covariance(extract(spec, params, s).flatten(2), c).matrix
        cov_r = class_covariance(extract(spec, params, r).flatten(2), c).matrix
        gaps.append(float(torch.linalg.matrix_norm(cov_s - cov_r).double()))
    return gaps


def diagnostics(syn: SyntheticDataset, real: LabeledImageSet, embedder: Embedder, extractor_seed: int,
                extractor_spec: ExtractorSpec | None = None) -> DiagnosticsRecord:
    if syn.ipc < 2:
        raise DegenerateStatisticsError("diagnostics need at least 2 synthetic images per class")
    images, labels = syn.as_arrays()
    spec = extractor_spec or ExtractorSpec("convnet", real.image_shape[0], real.image_shape[1])
    syn_feat = _embed_numpy(embedder, images)
    dispersion, ratio = class_dispersion(syn_feat, labels)
    gaps = covariance_gaps(images, labels, real, spec, extractor_seed)

    real_feat = _embed_numpy(embedder, real.images)
    centre = real_feat.mean(axis=0)
    _, _, vt = np.linalg.svd(real_feat - centre, full_matrices=False)
    axes = vt[:2].T
    proj_s = (syn_feat - centre) @ axes
    proj_r = (real_feat - centre) @ axes
    return DiagnosticsRecord(
        dispersion,
        gaps,
        ratio,
        [(float(a), float(b), int(c)) for (a, b), c in zip(proj_s, labels)],
        [(float(a), float(b), int(c)) for (a, b), c in zip(proj_r, real.labels)],
    )


# --- sweeps -------------------------------------------------------------------------


@dataclass
class SweepContext:
    """Everything a sweep needs besides the distillation config."""

    real: LabeledImageSet
    test: LabeledImageSet
    embedder: Embedder | None
    eval_arch: ExtractorSpec
    repeats: int = 5
    recipe: TrainRecipe | None = None
    eval_seed: int = 0
    diag_seed: int = 0


SWEEP_FIELDS = ["value", "top1_mean", "top1_std", "dispersion", "status"]


def _score(syn, ctx: SweepContext, config: DistillConfig, value) -> dict:
    report = evaluate_from_scratch(syn, ctx.eval_arch, ctx.test, ctx.repeats, ctx.eval_seed, ctx.recipe, config.augment)
    disp = math.nan
    if ctx.embedder is not None and syn.ipc >= 2:
        disp = diagnostics(syn, ctx.real, ctx.embedder, ctx.diag_seed, config.extractor).mean_dispersion
    return {"value": value, "top1_mean": report.top1_mean, "top1_std": report.top1_std, "dispersion": disp, "status": "ok"}


def _sweep(config: DistillConfig, values, ctx: SweepContext, make_config) -> list[dict]:
    if not values:
        raise ConfigError("sweep values must be nonempty")
    rows = []
    for v in values:
        try:
            cfg = make_config(v)
        except ConfigError as exc:
            rows.append({"value": v, "top1_mean": math.nan, "top1_std": math.nan, "dispersion": math.nan,
                         "status": f"rejected: {exc}"})
            continue
        syn, _ = distill(cfg, ctx.real, ctx.embedder)
        rows.append(_score(syn, ctx, cfg, v))
    return sorted(rows, key=lambda r: r["value"])


def sweep_beta(config: DistillConfig, beta_values, ctx: SweepContext) -> list[dict]:
    from .losses import LossWeights

    def make(beta):
        w = config.weights
        return config.replace(weights=LossWeights(w.lambda_cc, w.lambda_cm, w.alpha, float(beta)))

    return _sweep(config, list(beta_values), ctx, make)


def sweep_lambda(config: DistillConfig, axis: str, values, ctx: SweepContext) -> list[dict]:
    from .losses import LossWeights

    if axis not in ("lambda_cc", "lambda_cm"):
        raise ConfigError(f"unknown lambda axis {axis!r}", field="sweep.axis")

    def make(v):
        w = config.weights.to_dict()
        w[axis] = float(v)
        return config.replace(weights=LossWeights(**w))

    return _sweep(config, list(values), ctx, make)


def sweep_ipc(config: DistillConfig, ipc_values, ctx: SweepContext) -> list[dict]:
    return _sweep(config, [int(v) for v in ipc_values], ctx, lambda k: config.replace(ipc=k))


def sweep_iterations(config: DistillConfig, probes, ctx: SweepContext) -> list[dict]:
    """One run to ``max(probes)`` iterations, scoring snapshots at each probe (0 = initialization)."""
    probes = sorted({int(p) for p in probes})
    if not probes:
        raise ConfigError("sweep values must be nonempty")
    snapshots = {}

    def grab(t, syn):
        if t + 1 in probes:
            snapshots[t + 1] = SyntheticDataset(syn.pixels.detach().clone(), syn.labels, syn.ipc, dict(syn.provenance))

    distill(config.replace(iterations=max(probes)), ctx.real, ctx.embedder, callback=grab)
    return [_score(snapshots[p], ctx, config, p) for p in probes]


SWEEPS = {"beta": sweep_beta, "ipc": sweep_ipc, "iterations": sweep_iterations}


def run_sweep(axis: str, config: DistillConfig, values, ctx: SweepContext) -> list[dict]:
    if axis in ("lambda_cc", "lambda_cm"):
        return sweep_lambda(config, axis, values, ctx)
    if axis not in SWEEPS:
        raise ConfigError(f"unknown sweep axis {axis!r}", field="sweep.axis")
    return SWEEPS[axis](config, values, ctx)


# --- continual learning ---------------------------------------------------------------


@dataclass
class ContinualResult:
    method: str
    steps: int
    curves: list[list[float]]  # one accuracy curve per class order
    orders: list[list[int]]

    @property
    def mean(self) -> list[float]:
        return np.mean(self.curves, axis=0).tolist()

    @property
    def std(self) -> list[float]:
        return np.std(self.curves, axis=0).tolist()

    def rows(self) -> list[dict]:
        return [{"step": s + 1, "mean": m, "std": d} for s, (m, d) in enumerate(zip(self.mean, self.std))]


def continual_learning(
    real: LabeledImageSet,
    test: LabeledImageSet,
    steps: int,
    buffer_per_class: int,
    method: str,
    rng=0,
    config: DistillConfig | None = None,
    embedder: Embedder | None = None,
    arch: ExtractorSpec | None = None,
    recipe: TrainRecipe | None = None,
    n_orders: int = 5,
    n_nets: int = 3,
) -> ContinualResult:
    """Class-incremental protocol with a fixed per-class buffer.

    At each step the new classes' buffer is distilled (or selected), then
    ``n_nets`` fresh networks are trained on the whole buffer and tested on
    all classes seen so far. Repeated over ``n_orders`` random class orders.
    """
    C = real.num_classes
    if steps < 1 or C % steps:
        raise ConfigError(f"steps={steps} must divide the class count {C}", field="continual.steps")
    if method not in ("distill", "herding", "random"):
        raise ConfigError(f"unknown continual method {method!r}", field="continual.method")
    if method == "distill":
        if config is None:
            raise ConfigError("distill method needs a DistillConfig")
        if buffer_per_class < 2:
            raise ConfigError("distillation buffers need >= 2 images per class", field="continual.buffer_per_class")
    if method == "herding" and embedder is None:
        raise ConfigError("herding needs an embedder")
    arch = arch or (config.extractor if config is not None else ExtractorSpec("convnet", *real.image_shape[:2]))
    policy = config.augment if config is not None else aug.AugmentPolicy()
    base_seed = _seed(rng)
    per_step = C // steps
    curves, orders = [], []
    for o in range(n_orders):
        order_rng = np.random.default_rng(np.random.SeedSequence(entropy=base_seed, spawn_key=(o,)))
        order = order_rng.permutation(C).tolist()
        orders.append(order)
        buf_x, buf_y = [], []
        curve = []
        for s in range(steps):
            new = order[s * per_step:(s + 1) * per_step]
            seen = order[:(s + 1) * per_step]
            sub = real.subset(new, relabel=True)
            step_seed = int(order_rng.integers(0, 2**31))
            if method == "distill":
                cfg = config.replace(ipc=buffer_per_class, seed=step_seed)
                picked, _ = distill(cfg, sub, embedder)
            elif method == "herding":
                picked = coreset_herding(sub, buffer_per_class, embedder)
            else:
                picked = coreset_random(sub, buffer_per_class, rng=step_seed)
            x, y_local = picked.as_arrays()
            buf_x.append(x)
            buf_y.append(np.array([seen.index(new[int(k)]) for k in y_local]))
            x_all = torch.from_numpy(np.concatenate(buf_x))
            y_all = torch.from_numpy(np.concatenate(buf_y).astype(np.int64))
            test_sub = test.subset(seen, relabel=True)
            accs = []
            for n in range(n_nets):
                seed = int(order_rng.integers(0, 2**31))
                model = train_classifier(arch, x_all, y_all, len(seen), recipe or TrainRecipe(), seed, policy)
                accs.append(accuracy(model, torch.from_numpy(test_sub.images), torch.from_numpy(test_sub.labels)))
            curve.append(float(np.mean(accs)))
            log.info("continual %s order %d step %d: %.3f", method, o, s + 1, curve[-1])
        curves.append(curve)
    return ContinualResult(method, steps, curves, orders)
