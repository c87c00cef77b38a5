"""Feature extractors, parameter sampling and classifier training.

Networks are ordinary ``nn.Module`` skeletons; their weights live outside in
:class:`ExtractorParams` and are bound at call time with
``torch.func.functional_call``. That keeps a freshly sampled extractor per
distillation iteration cheap and makes parameters trivially hashable,
serializable and comparable.

All families use instance normalization (eps 1e-5), so a constant channel normalizes to exactly zero.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .errors import ConfigError, ContractError, IntegrityError, TrainingError

log = logging.getLogger(__name__)

FAMILIES = ("convnet", "resnet18", "alexnet", "vgg11")
MODES = ("feature_map", "pooled_vector")
NORM_EPS = 1e-5


@dataclass(frozen=True)
class ExtractorSpec:
    family: str = "convnet"
    in_channels: int = 3
    image_size: int = 32
    width: int = 128
    depth: int = 3  # convnet only
    bias: bool = True
    output: str = "feature_map"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown extractor family {self.family!r}", field="family")
        if self.output not in MODES:
            raise ConfigError(f"unknown output mode {self.output!r}", field="output")
        if min(self.in_channels, self.image_size, self.width, self.depth) < 1:
            raise ConfigError("extractor dimensions must be positive")

    def to_dict(self):
        return asdict(self)


class InstanceNorm(nn.Module):
    """Per-sample, per-channel normalization with an affine map.

    Written out rather than using ``nn.GroupNorm``, which refuses 1x1 maps;
    here a constant channel (including a single pixel) normalizes to zero.
    """

    def __init__(self, channels: int, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        var, mean = torch.var_mean(x, dim=(2, 3), keepdim=True, correction=0)
        x = (x - mean) * torch.rsqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def _norm(channels: int) -> InstanceNorm:
    return InstanceNorm(channels)


class ConvNet(nn.Module):
    """``depth`` blocks of 3x3 conv, instance norm, ReLU, 3x3 average pool stride 2."""

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        layers = []
        cin = spec.in_channels
        for _ in range(spec.depth):
            layers += [
                nn.Conv2d(cin, spec.width, 3, padding=1, bias=spec.bias),
                _norm(spec.width),
                nn.ReLU(),
                nn.AvgPool2d(3, stride=2, padding=1, count_include_pad=False),
            ]
            cin = spec.width
        self.features = nn.Sequential(*layers)
        self.out_channels = spec.width

    def forward(self, x):
        return self.features(x)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, bias):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=bias)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=bias)
        self.norm2 = _norm(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=bias), _norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    """Four stages of two basic blocks; 3x3 stride-1 stem and no stem pooling."""

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        w = spec.width
        self.stem = nn.Sequential(nn.Conv2d(spec.in_channels, w, 3, padding=1, bias=spec.bias), _norm(w), nn.ReLU())
        stages = []
        cin = w
        for i, mult in enumerate((1, 2, 4, 8)):
            cout = w * mult
            stride = 1 if i == 0 else 2
            stages += [BasicBlock(cin, cout, stride, spec.bias), BasicBlock(cout, cout, 1, spec.bias)]
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.out_channels = cin

    def forward(self, x):
        return self.stages(self.stem(x))


def _maybe_pool(x):
    # A 1x1 map would make every following instance norm output its bias; stop pooling at 2x2.
    return F.max_pool2d(x, 2) if min(x.shape[-2:]) >= 4 else x


class AlexNet(nn.Module):
    """Small-image AlexNet: five convs, three max pools, channel ratios 1 : 1.5 : 2 : 1.5 : 1.5."""

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        w = spec.width
        chans = [w, w * 3 // 2, w * 2, w * 3 // 2, w * 3 // 2]
        kernels = [5, 5, 3, 3, 3]
        self.pool_after = {0, 1, 4}
        self.convs = nn.ModuleList()
        self.norms = nn.ModuleList()
        cin = spec.in_channels
        for cout, k in zip(chans, kernels):
            self.convs.append(nn.Conv2d(cin, cout, k, padding=k // 2, bias=spec.bias))
            self.norms.append(_norm(cout))
            cin = cout
        self.out_channels = cin

    def forward(self, x):
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            x = F.relu(norm(conv(x)))
            if i in self.pool_after:
                x = _maybe_pool(x)
        return x


class VGG11(nn.Module):
    """VGG-11 layout with widths scaled by ``width``; pools are skipped once the map is 2x2."""

    CFG = (1, "M", 2, "M", 4, 4, "M", 8, 8, "M", 8, 8, "M")

    def __init__(self, spec: ExtractorSpec):
        super().__init__()
        self.layers = nn.ModuleList()
        self.plan = []
        cin = spec.in_channels
        for item in self.CFG:
            if item == "M":
                self.plan.append("M")
                continue
            cout = spec.width * item
            self.layers.append(nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=spec.bias), _norm(cout)))
            self.plan.append(len(self.layers) - 1)
            cin = cout
        self.out_channels = cin

    def forward(self, x):
        for step in self.plan:
            x = _maybe_pool(x) if step == "M" else F.relu(self.layers[step](x))
        return x


_BUILDERS = {"convnet": ConvNet, "resnet18": ResNet18, "alexnet": AlexNet, "vgg11": VGG11}


def build_network(spec: ExtractorSpec) -> nn.Module:
    return _BUILDERS[spec.family](spec)


@lru_cache(maxsize=64)
def _skeleton(spec: ExtractorSpec) -> nn.Module:
    net = build_network(spec)
    net.requires_grad_(False)
    return net


class Classifier(nn.Module):
    """Extractor followed by spatial mean pooling and one affine map."""

    def __init__(self, spec: ExtractorSpec, num_classes: int):
        super().__init__()
        self.spec = spec
        self.features = build_network(spec)
        self.head = nn.Linear(self.features.out_channels, num_classes)

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


@dataclass
class ExtractorParams:
    tensors: dict[str, torch.Tensor]
    init_seed: int
    trained: bool = False
    info: dict = field(default_factory=dict)

    def to(self, dtype) -> "ExtractorParams":
        return ExtractorParams({k: v.to(dtype) for k, v in self.tensors.items()}, self.init_seed, self.trained, dict(self.info))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(self.tensors[k].detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def _seed_from(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(0, 2**62))
    return int(rng)


def init_module_(module: nn.Module, generator: torch.Generator) -> None:
    """He-normal conv/linear weights (std = sqrt(2 / fan_in)), zero biases, unit norm scales."""
    for name, p in module.named_parameters():
        with torch.no_grad():
            if p.ndim >= 2:
                fan_in = p[0].numel()
                p.copy_(torch.randn(p.shape, generator=generator, dtype=p.dtype) * math.sqrt(2.0 / fan_in))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()


def sample_params(spec: ExtractorSpec, rng) -> ExtractorParams:
    """One draw from the random-initialization distribution; ``rng`` is an int seed or a Generator."""
    seed = _seed_from(rng)
    net = build_network(spec)
    init_module_(net, torch.Generator().manual_seed(seed))
    tensors = {k: v.detach().clone() for k, v in net.state_dict().items()}
    return ExtractorParams(tensors, init_seed=seed, trained=False)


def extract(spec: ExtractorSpec, params: ExtractorParams, batch: torch.Tensor, mode: str | None = None) -> torch.Tensor:
    """Run the extractor. ``feature_map`` gives ``(N, d, h, w)``; ``pooled_vector`` its spatial mean ``(N, d)``."""
    mode = mode or spec.output
    if mode not in MODES:
        raise ContractError(f"unknown output mode {mode!r}")
    if batch.ndim != 4 or batch.shape[1] != spec.in_channels or tuple(batch.shape[2:]) != (spec.image_size,) * 2:
        raise ContractError(
            f"batch shape {tuple(batch.shape)} does not match extractor input "
            f"(N, {spec.in_channels}, {spec.image_size}, {spec.image_size})"
        )
    fmap = functional_call(_skeleton(spec), params.tensors, (batch,))
    return fmap if mode == "feature_map" else fmap.mean(dim=(2, 3))


def feature_shape(spec: ExtractorSpec) -> tuple[int, int, int]:
    with torch.no_grad():
        out = _skeleton(spec)(torch.zeros(1, spec.in_channels, spec.image_size, spec.image_size))
    return tuple(out.shape[1:])


# --- training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainRecipe:
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 256
    augment: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", field="epochs")
        if self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive and batch_size >= 1")

    def to_dict(self):
        return asdict(self)


PRETRAIN_RECIPE = TrainRecipe(epochs=30, lr=0.01, momentum=0.9, weight_decay=5e-4, batch_size=64, augment=False)


def train_classifier(
    spec: ExtractorSpec,
    images: torch.Tensor,
    labels: torch.Tensor,
    num_classes: int,
    recipe: TrainRecipe,
    seed: int,
    augment_policy=None,
) -> Classifier:
    """Momentum SGD with cosine decay on a fresh random init. Deterministic given ``seed``."""
    from . import augment as aug

    gen = torch.Generator().manual_seed(seed)
    model = Classifier(spec, num_classes)
    init_module_(model, gen)
    opt = torch.optim.SGD(model.parameters(), lr=recipe.lr, momentum=recipe.momentum, weight_decay=recipe.weight_decay)
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=recipe.epochs * steps_per_epoch)
    rng = np.random.default_rng(seed)
    use_aug = recipe.augment and augment_policy is not None and augment_policy.enabled
    step = 0
    model.train()
    for epoch in range(recipe.epochs):
        order = torch.from_numpy(rng.permutation(n))
        for start in range(0, n, recipe.batch_size):
            idx = order[start:start + recipe.batch_size]
            x, y = images[idx], labels[idx]
            if use_aug:
                x = aug.apply(aug.sample_augmentation(augment_policy, rng, tuple(x.shape[1:])), x)
            loss = F.cross_entropy(model(x), y)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}, step {step}", iteration=step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
    model.eval()
    return model


@torch.no_grad()
def accuracy(model: nn.Module, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 512) -> float:
    correct = 0
    for start in range(0, len(labels), batch_size):
        logits = model(images[start:start + batch_size])
        correct += int((logits.argmax(1) == labels[start:start + batch_size]).sum())
    return correct / max(len(labels), 1)


def pretrain_embedder(spec: ExtractorSpec, data, epochs: int, rng, recipe: TrainRecipe | None = None) -> ExtractorParams:
    """Train ``spec`` plus a linear head with cross-entropy; return the extractor weights only."""
    if epochs < 1:
        raise ConfigError("epochs must be >= 1", field="embedder.epochs")
    if data.num_classes < 2:
        raise ConfigError("pretraining needs at least two classes")
    recipe = recipe or PRETRAIN_RECIPE
    recipe = TrainRecipe(**{**recipe.to_dict(), "epochs": epochs})
    seed = _seed_from(rng)
    images = torch.from_numpy(data.images)
    labels = torch.from_numpy(data.labels)
    model = train_classifier(spec, images, labels, data.num_classes, recipe, seed)
    acc = accuracy(model, images, labels)
    log.info("pretrained %s embedder on %s: train accuracy %.3f", spec.family, data.name, acc)
    tensors = {k: v.detach().clone() for k, v in model.features.state_dict().items()}
    return ExtractorParams(
        tensors,
        init_seed=seed,
        trained=True,
        info={"dataset": data.name, "epochs": epochs, "seed": seed, "train_accuracy": acc, "recipe": recipe.to_dict()},
    )


# --- persistence -------------------------------------------------------------


def save_params(path, spec: ExtractorSpec, params: ExtractorParams) -> list[Path]:
    """Write ``<path>.npz`` (arrays) and ``<path>.json`` (manifest)."""
    from .io import write_npz, file_sha256

    path = Path(path)
    npz = path.with_suffix(".npz")
    write_npz(npz, {k: v.detach().cpu().numpy() for k, v in params.tensors.items()})
    manifest = {
        "family": spec.family,
        "spec": spec.to_dict(),
        "dataset": params.info.get("dataset"),
        "epochs": params.info.get("epochs"),
        "seed": params.init_seed,
        "train_accuracy": params.info.get("train_accuracy"),
        "recipe": params.info.get("recipe"),
        "trained": params.trained,
        "arrays_sha256": file_sha256(npz),
    }
    js = path.with_suffix(".json")
    js.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return [npz, js]


def load_params(path) -> tuple[ExtractorSpec, ExtractorParams]:
    from .io import file_sha256

    path = Path(path)
    npz, js = path.with_suffix(".npz"), path.with_suffix(".json")
    try:
        manifest = json.loads(js.read_text())
        spec = ExtractorSpec(**manifest["spec"])
        expected = manifest["arrays_sha256"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise IntegrityError(f"corrupt embedder manifest {js}: {exc}") from exc
    if file_sha256(npz) != expected:
        raise IntegrityError(f"embedder arrays {npz} do not match manifest hash")
    with np.load(npz) as arrays:
        tensors = {k: torch.from_numpy(arrays[k].copy()) for k in arrays.files}
    info = {k: manifest.get(k) for k in ("dataset", "epochs", "train_accuracy", "recipe")}
    return spec, ExtractorParams(tensors, init_seed=manifest["seed"], trained=manifest["trained"], info=info)
