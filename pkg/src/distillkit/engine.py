"""The distillation loop.

Each iteration draws a fresh random extractor, one real batch per class and one
augmentation instance, scores the synthetic set with
``base + lambda_cc * cc + lambda_cm * cm`` and takes one SGD step on the
synthetic pixels. All randomness of iteration ``t`` is derived from
``(seed, t)``, so a run resumed from a checkpoint replays exactly the stream an
uninterrupted run would have produced.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import augment as aug
from .datasets import LabeledImageSet, SyntheticDataset, init_synthetic_from_real, sample_class_batch
from .errors import ConfigError, IntegrityError, NumericError
from .io import file_sha256, write_npz
from .losses import LossWeights, cc_exponents, cc_loss, cm_loss, combined_loss, covariances_by_class, get_base_loss
from .models import ExtractorParams, ExtractorSpec, extract, load_params, sample_params

log = logging.getLogger(__name__)

RECORD_FIELDS = ("iter", "loss_base", "loss_cc", "loss_cm", "loss_total", "grad_norm", "ms")


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1.0
    momentum: float = 0.5

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0", field="optimizer.lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)", field="optimizer.momentum")


@dataclass(frozen=True)
class DistillConfig:
    dataset: str = "gaussian10"
    ipc: int = 10
    batch_real: int = 256
    iterations: int = 1000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    augment: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy)
    extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    embedder_checkpoint: str | None = None
    base: str = "dm"
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0", field="distill.iterations")
        if self.batch_real < 2:
            raise ConfigError("batch_real must be >= 2", field="distill.batch_real")
        if self.ipc < 1:
            raise ConfigError("ipc must be >= 1", field="distill.ipc")
        if self.ipc < 2 and (self.base == "dm" or self.weights.lambda_cm > 0):
            raise ConfigError(
                "ipc must be >= 2 when the DM base or covariance matching is enabled", field="distill.ipc"
            )
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0", field="distill.checkpoint_every")

    def replace(self, **changes) -> "DistillConfig":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return DistillConfig(**values)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


@dataclass
class IterationRecord:
    iter: int
    loss_base: float
    loss_cc: float
    loss_cm: float
    loss_total: float
    grad_norm: float
    ms: float
    cc_max_exponent: float = 0.0

    def to_row(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_FIELDS}


@dataclass
class Embedder:
    """A frozen, pretrained network used only for the centralization term."""

    spec: ExtractorSpec
    params: ExtractorParams

    @classmethod
    def load(cls, path) -> "Embedder":
        spec, params = load_params(path)
        return cls(spec, params)

    def embed(self, images: torch.Tensor) -> torch.Tensor:
        return extract(self.spec, self.params, images, mode="pooled_vector")


def iteration_rngs(seed: int, t: int):
    """(extractor seed, batch rng, augmentation rng) for iteration ``t``."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(t,))
    ext, batch, augm = ss.spawn(3)
    return (
        int(ext.generate_state(1, np.uint64)[0] >> 2),
        np.random.default_rng(batch),
        np.random.default_rng(augm),
    )


# --- checkpoints ---------------------------------------------------------------


def checkpoint(syn: SyntheticDataset, path, iteration: int = 0, seed: int = 0, name: str | None = None,
               momentum: torch.Tensor | None = None) -> list[Path]:
    """Write ``<path>.npz`` with float32 pixels / int32 labels and a ``<path>.json`` manifest."""
    path = Path(path)
    pixels, labels = syn.as_arrays()
    arrays = {"pixels": pixels.astype(np.float32), "labels": labels.astype(np.int32)}
    if momentum is not None:
        arrays["momentum"] = momentum.detach().cpu().numpy().astype(np.float32)
    npz = write_npz(path.with_suffix(".npz"), arrays)
    manifest = {
        "name": name or syn.provenance.get("dataset", "synthetic"),
        "ipc": syn.ipc,
        "C": syn.num_classes,
        "seed": seed,
        "iteration": iteration,
        "provenance": syn.provenance,
        "arrays_sha256": file_sha256(npz),
    }
    js = path.with_suffix(".json")
    js.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return [npz, js]


def _read_checkpoint(path):
    path = Path(path)
    npz, js = path.with_suffix(".npz"), path.with_suffix(".json")
    try:
        manifest = json.loads(js.read_text())
        for key in ("name", "ipc", "C", "seed", "iteration", "arrays_sha256"):
            manifest[key]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IntegrityError(f"corrupt checkpoint manifest {js}: {exc}") from exc
    if file_sha256(npz) != manifest["arrays_sha256"]:
        raise IntegrityError(f"checkpoint arrays {npz} do not match the manifest hash")
    with np.load(npz) as arrays:
        data = {k: arrays[k].copy() for k in arrays.files}
    if data["pixels"].shape[0] != manifest["C"] * manifest["ipc"]:
        raise IntegrityError(f"checkpoint {npz}: pixel count disagrees with C * ipc in the manifest")
    return manifest, data


def resume(path) -> tuple[SyntheticDataset, int]:
    manifest, data = _read_checkpoint(path)
    syn = SyntheticDataset(
        torch.from_numpy(data["pixels"]).requires_grad_(True),
        data["labels"].astype(np.int64),
        ipc=int(manifest["ipc"]),
        provenance=dict(manifest.get("provenance") or {}, dataset=manifest["name"]),
    )
    return syn, int(manifest["iteration"])


def load_momentum(path) -> torch.Tensor | None:
    _, data = _read_checkpoint(path)
    return torch.from_numpy(data["momentum"]) if "momentum" in data else None


# --- the loop ------------------------------------------------------------------------


def _check_compat(config: DistillConfig, real: LabeledImageSet):
    c, h, w = real.image_shape
    spec = config.extractor
    if spec.in_channels != c or spec.image_size != h or h != w:
        raise ConfigError(
            f"extractor expects ({spec.in_channels}, {spec.image_size}, {spec.image_size}) images, data has {(c, h, w)}",
            field="extractor",
        )
    for cls, idx in real.class_index.items():
        if len(idx) < config.ipc:
            raise ConfigError(f"class {cls} has {len(idx)} samples, fewer than ipc={config.ipc}", field="distill.ipc")


def distill(
    config: DistillConfig,
    real: LabeledImageSet,
    embedder: Embedder | None = None,
    *,
    init: SyntheticDataset | None = None,
    resume_from=None,
    out_dir=None,
    callback: Callable[[int, SyntheticDataset], None] | None = None,
    dtype: torch.dtype = torch.float32,
) -> tuple[SyntheticDataset, list[IterationRecord]]:
    """Optimize a synthetic set against ``real``; returns it with per-iteration records.

    ``callback(t, syn)`` runs after the update of iteration ``t`` (0-based), and
    once with ``t = -1`` before the first update.
    """
    _check_compat(config, real)
    base_loss = get_base_loss(config.base)
    weights = config.weights
    if embedder is None and config.embedder_checkpoint:
        embedder = Embedder.load(config.embedder_checkpoint)
    if embedder is not None:
        trained_on = embedder.params.info.get("dataset")
        if trained_on is not None and trained_on != real.name:
            raise ConfigError(
                f"embedder was trained on {trained_on!r}, distilling {real.name!r}", field="embedder_checkpoint"
            )
        embedder = Embedder(embedder.spec, embedder.params.to(dtype))
    elif weights.lambda_cc > 0:
        raise ConfigError("lambda_cc > 0 requires a pretrained embedder", field="embedder_checkpoint")

    start = 0
    momentum = None
    if resume_from is not None:
        syn, start = resume(resume_from)
        momentum = load_momentum(resume_from)
    elif init is not None:
        syn = init
    else:
        syn = init_synthetic_from_real(real, config.ipc, seed=config.seed)
    syn.provenance.setdefault("dataset", real.name)
    if syn.provenance.get("method") != "distill":
        syn.provenance["init"] = syn.provenance.get("method")
        syn.provenance["method"] = "distill"
    syn.provenance.update(base=config.base, iterations=config.iterations)
    if syn.ipc != config.ipc or syn.num_classes != real.num_classes:
        raise ConfigError("initial synthetic set does not match ipc / class count of the run")

    pixels = syn.pixels.detach().to(dtype).clone().requires_grad_(True)
    syn.pixels = pixels
    opt = torch.optim.SGD([pixels], lr=config.optimizer.lr, momentum=config.optimizer.momentum)
    if momentum is not None and config.optimizer.momentum > 0:
        opt.state[pixels]["momentum_buffer"] = momentum.to(dtype).clone()

    out_dir = Path(out_dir) if out_dir is not None else None
    C, K, B = real.num_classes, config.ipc, config.batch_real
    image_shape = real.image_shape
    records: list[IterationRecord] = []
    if callback is not None and start == 0:
        callback(-1, syn)

    for t in range(start, config.iterations):
        tick = time.perf_counter()
        ext_seed, batch_rng, aug_rng = iteration_rngs(config.seed, t)
        params = sample_params(config.extractor, ext_seed)
        if dtype != torch.float32:
            params = params.to(dtype)
        real_batch = np.concatenate([sample_class_batch(real, c, B, batch_rng).images for c in range(C)])
        instance = aug.sample_augmentation(config.augment, aug_rng, image_shape)

        with torch.no_grad():
            real_x = aug.apply(instance, torch.from_numpy(real_batch).to(dtype))
            real_maps = extract(config.extractor, params, real_x, mode="feature_map")
        syn_x = aug.apply(instance, pixels)
        syn_maps = extract(config.extractor, params, syn_x, mode="feature_map")

        real_groups = {c: real_maps[c * B:(c + 1) * B] for c in range(C)}
        syn_groups = {c: syn_maps[c * K:(c + 1) * K] for c in range(C)}
        base = base_loss(
            {c: m.mean(dim=(2, 3)) for c, m in real_groups.items()},
            {c: m.mean(dim=(2, 3)) for c, m in syn_groups.items()},
        )

        with torch.set_grad_enabled(weights.lambda_cm > 0):
            l_cm = cm_loss(covariances_by_class(real_groups), covariances_by_class(syn_groups))

        l_cc, max_exp = None, 0.0
        if embedder is not None:
            with torch.set_grad_enabled(weights.lambda_cc > 0):
                emb = embedder.embed(syn_x)
                emb_groups = {c: emb[c * K:(c + 1) * K] for c in range(C)}
                l_cc = cc_loss(emb_groups, weights.alpha, weights.beta)
                max_exp = max(float(e.detach().max()) for e in cc_exponents(emb_groups, weights.alpha).values())

        try:
            total = combined_loss(base, l_cc, l_cm, weights)
        except NumericError as exc:
            raise NumericError(f"iteration {t}: {exc}", component=exc.component, iteration=t) from exc

        opt.zero_grad()
        total.backward()
        grad_norm = float(pixels.grad.norm()) if pixels.grad is not None else 0.0
        opt.step()
        if not bool(torch.isfinite(pixels).all()):
            raise NumericError(f"iteration {t}: synthetic pixels became non-finite", component="pixels", iteration=t)

        rec = IterationRecord(
            iter=t,
            loss_base=float(base.detach()),
            loss_cc=float(l_cc.detach()) if l_cc is not None else 0.0,
            loss_cm=float(l_cm.detach()),
            loss_total=float(total.detach()),
            grad_norm=grad_norm,
            ms=(time.perf_counter() - tick) * 1000.0,
            cc_max_exponent=max_exp,
        )
        records.append(rec)
        if callback is not None:
            callback(t, syn)
        done = t + 1
        if out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
            checkpoint(syn, out_dir / f"checkpoint_{done:06d}", iteration=done, seed=config.seed,
                       name=real.name, momentum=opt.state[pixels].get("momentum_buffer"))
        if t % 100 == 0:
            log.debug("iter %d total %.5g base %.5g cc %.5g cm %.5g", t, rec.loss_total, rec.loss_base, rec.loss_cc, rec.loss_cm)

    syn.pixels = pixels.detach().requires_grad_(True)
    if out_dir is not None:
        checkpoint(syn, out_dir / "synthetic", iteration=config.iterations, seed=config.seed,
                   name=real.name, momentum=opt.state[pixels].get("momentum_buffer"))
    return syn, records
