"""Source-class classifier: pre-training, head replacement, few-shot fine-tuning.

The backbone is a small residual conv net with GroupNorm (batch-independent,
so feature extraction is deterministic row-for-row). During few-shot
fine-tuning only the "head" parameter group is updated.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ArrayBatch, AugmentationSpec, AugmentedSet, augment_batch
from .losses import mixup_batch
from .models import init_parameters, to_tensor

REGIME_KINDS = ("baseline", "baseline+aug", "mixup", "gan", "gan+semi")
_CROP_KINDS = ("baseline+aug", "mixup", "gan", "gan+semi")


@dataclass(frozen=True)
class FinetuneRegime:
    """How the few-shot classifier is trained; fields unused by `kind` are
    ignored but still recorded in experiment rows."""

    kind: str
    min_scale: float = 0.8
    mixup_beta: float = 0.2
    n_s: int = 0
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in REGIME_KINDS:
            raise ValueError(f"kind must be one of {REGIME_KINDS}, got {self.kind!r}")


@dataclass
class ClassifierConfig:
    """Pre-training configuration (paper defaults: ADAM 1e-4, betas (.9,.999),
    crops 70-100%, rotations +-10 deg, internal 95/5 early-stopping split)."""

    width: int = 32
    n_blocks: int = 4
    learning_rate: float = 1e-4
    adam_betas: tuple = (0.9, 0.999)
    batch_size: int = 64
    max_steps: int = 20000
    eval_every: int = 200
    patience: int = 10
    holdout_fraction: float = 0.05
    min_scale: float = 0.7
    max_rotation_degrees: float = 10.0
    seed: int = 0


@dataclass
class HeadFinetuneConfig:
    """Few-shot fine-tuning configuration (paper: lr 2e-5, 30k steps, model
    selection snapshots; cadence every 50 steps). patience=0 disables early stop."""

    learning_rate: float = 2e-5
    adam_betas: tuple = (0.9, 0.999)
    batch_size: int = 64
    max_steps: int = 30000
    eval_every: int = 50
    patience: int = 0
    seed: int = 0


class ClsBlock(nn.Module):
    def __init__(self, channels: int, down: bool):
        super().__init__()
        groups = min(8, channels)
        self.down = down
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.gn1 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.gn2 = nn.GroupNorm(groups, channels)

    def forward(self, h):
        t = F.relu(self.gn1(self.conv1(h)))
        t = self.gn2(self.conv2(t))
        h = F.relu(t + h)
        return F.avg_pool2d(h, 2) if self.down else h


class ConvClassifier(nn.Module):
    """Residual conv classifier; `features` is the penultimate (pooled) layer."""

    def __init__(self, image_shape, n_classes: int, width: int = 32, n_blocks: int = 4,
                 init_seed: int = 0):
        super().__init__()
        c, h, w = image_shape
        self.image_shape = tuple(image_shape)
        self.width = width
        self.conv_in = nn.Conv2d(c, width, 3, padding=1)
        blocks, side = [], h
        for _ in range(n_blocks):
            down = side > 4
            blocks.append(ClsBlock(width, down=down))
            if down:
                side //= 2
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Linear(width, n_classes)
        init_parameters(self, init_seed)

    @property
    def feature_dim(self) -> int:
        return self.width

    @property
    def n_classes(self) -> int:
        return self.head.out_features

    def param_group(self, name: str) -> str:
        return "head" if name.startswith("head.") else "backbone"

    def features(self, x):
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        return h.mean(dim=(2, 3))

    def forward(self, x):
        return self.head(self.features(x))

    @property
    def fingerprint(self) -> str:
        digest = hashlib.sha1()
        for name, p in sorted(self.named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().numpy().tobytes())
        return digest.hexdigest()[:12]


def _as_batch(labeled_set) -> ArrayBatch:
    if isinstance(labeled_set, ArrayBatch):
        return labeled_set
    images, labels = labeled_set
    return ArrayBatch(np.asarray(images), np.asarray(labels, dtype=np.int64))


def evaluate_accuracy(params: ConvClassifier, labeled_set, batch_size: int = 512) -> float:
    """Fraction of argmax-correct predictions; deterministic."""
    batch = _as_batch(labeled_set)
    if len(batch) == 0:
        raise ValueError("empty evaluation set")
    if batch.labels.max() >= params.n_classes or batch.labels.min() < 0:
        raise IndexError(f"label outside head range [0, {params.n_classes})")
    params.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(batch), batch_size):
            pred = params(to_tensor(batch.images[start:start + batch_size])).argmax(dim=1)
            correct += int((pred.numpy() == batch.labels[start:start + batch_size]).sum())
    return correct / len(batch)


def pretrain_classifier(train_split: ArrayBatch, config: ClassifierConfig) -> ConvClassifier:
    """Train on the source classes with crop/rotation augmentation; early-stop on
    an internal 95/5 holdout and return the best-accuracy parameters."""
    images, labels = _as_batch(train_split)
    n_classes = int(labels.max()) + 1
    if n_classes < 2:
        raise ValueError("classifier pre-training needs at least 2 source classes")

    rng = np.random.default_rng(config.seed)
    holdout_mask = np.zeros(len(images), dtype=bool)
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_hold = max(1, int(round(config.holdout_fraction * len(idx))))
        holdout_mask[idx[:n_hold]] = True
    tr_idx = np.flatnonzero(~holdout_mask)
    ho = ArrayBatch(images[holdout_mask], labels[holdout_mask])

    model = ConvClassifier(images.shape[1:], n_classes, width=config.width,
                           n_blocks=config.n_blocks, init_seed=config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate,
                           betas=config.adam_betas)
    spec = AugmentationSpec(config.min_scale, config.max_rotation_degrees)

    best_acc = evaluate_accuracy(model, ho)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for step in range(1, config.max_steps + 1):
        idx = tr_idx[rng.integers(0, len(tr_idx), size=config.batch_size)]
        x = augment_batch(images[idx], spec, rng).astype(np.float32)
        model.train()
        logits = model(torch.from_numpy(x))
        loss = F.cross_entropy(logits, torch.from_numpy(labels[idx]))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % config.eval_every == 0:
            acc = evaluate_accuracy(model, ho)
            if acc > best_acc:
                best_acc, best_state, stale = acc, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
    model.load_state_dict(best_state)
    return model


def replace_head(params: ConvClassifier, n_classes: int, seed: int) -> ConvClassifier:
    """Fresh N(0, 0.01^2) head over n_classes; backbone copied bit-for-bit."""
    if n_classes < 2:
        raise ValueError("head needs at least 2 classes")
    out = copy.deepcopy(params)
    g = torch.Generator().manual_seed(seed)
    head = nn.Linear(out.feature_dim, n_classes)
    with torch.no_grad():
        head.weight.normal_(0.0, 0.01, generator=g)
        head.bias.zero_()
    out.head = head
    return out


def finetune_classifier(params: ConvClassifier, train_set: AugmentedSet,
                        regime: FinetuneRegime, model_selection_set,
                        config: HeadFinetuneConfig):
    """Head-only fine-tuning under a regime; returns (model, best selection accuracy).

    The regime applies its on-the-fly augmentation (random-resized crop at
    min_scale for every non-baseline kind, plus input mixup for kind "mixup");
    the head snapshot with maximal model-selection accuracy wins.
    """
    selection = _as_batch(model_selection_set)
    if len(selection) == 0:
        raise ValueError("model_selection_set must be nonempty")
    model = copy.deepcopy(params)
    n_classes = model.n_classes
    if train_set.labels.max() >= n_classes or train_set.labels.min() < 0:
        raise IndexError(f"train label outside head range [0, {n_classes})")

    for name, p in model.named_parameters():
        p.requires_grad_(model.param_group(name) == "head")
    opt = torch.optim.Adam(model.head.parameters(), lr=config.learning_rate,
                           betas=config.adam_betas)
    rng = np.random.default_rng(config.seed)
    spec = AugmentationSpec(regime.min_scale, 0.0) if regime.kind in _CROP_KINDS else None

    images, labels = train_set.images, train_set.labels
    eye = np.eye(n_classes, dtype=np.float64)
    best_acc = evaluate_accuracy(model, selection)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for step in range(1, config.max_steps + 1):
        idx = rng.choice(len(images), size=min(config.batch_size, len(images)),
                         replace=False)
        x = images[idx]
        if spec is not None:
            x = augment_batch(x, spec, rng)
        if regime.kind == "mixup":
            mixed = mixup_batch(x, eye[labels[idx]], regime.mixup_beta, rng)
            logits = model(torch.from_numpy(mixed.images.astype(np.float32)))
            target = torch.from_numpy(mixed.labels)
            loss = -(target * F.log_softmax(logits.double(), dim=1)).sum(dim=1).mean()
        else:
            logits = model(torch.from_numpy(x.astype(np.float32)))
            loss = F.cross_entropy(logits, torch.from_numpy(labels[idx]))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if step % config.eval_every == 0:
            acc = evaluate_accuracy(model, selection)
            if acc > best_acc:
                best_acc, best_state, stale = acc, copy.deepcopy(model.state_dict()), 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    break
    model.load_state_dict(best_state)
    return model, best_acc


def save_classifier(path, model: ConvClassifier):
    from .params_io import save_container

    tensors = {name: p.detach().numpy() for name, p in model.state_dict().items()}
    groups = {name: model.param_group(name) for name in tensors}
    meta = {
        "kind": "classifier",
        "image_shape": list(model.image_shape),
        "n_classes": model.n_classes,
        "width": model.width,
        "n_blocks": len(model.blocks),
    }
    save_container(path, tensors, groups, meta)


def load_classifier(path) -> ConvClassifier:
    from .params_io import load_container

    tensors, _, meta = load_container(path)
    model = ConvClassifier(tuple(meta["image_shape"]), meta["n_classes"],
                           width=meta["width"], n_blocks=meta["n_blocks"])
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return model
