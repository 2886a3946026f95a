"""GAN optimization: pre-training, mask-based fine-tuning (supervised and
semi-supervised), FID early stopping, and augmented-set generation.

A "step" is one generator update preceded by ``d_steps_per_g_step``
discriminator updates. FID is evaluated at step 0 and every ``fid_every``
steps against a reference subsample drawn once per run; the checkpoint with
the minimum FID is returned.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import ArrayBatch, AugmentedSet, SupportSet
from .losses import (LossBreakdown, d_loss_semi, d_loss_supervised, g_loss_semi,
                     g_loss_supervised, infogan_loss)
from .metrics import extract_features, fit_gaussian, frechet_distance, warn_if_undersampled
from .models import Discriminator, GanArch, Generator, TrainableMask


class GanDivergenceError(RuntimeError):
    """Raised when a loss goes non-finite; carries a diagnostics snapshot."""

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class GanTrainConfig:
    """Paper defaults: ADAM betas (0.0, 0.9), lr 2e-4, gamma=100, G:D ratio 1:5,
    N=5000 FID samples. alpha=0 selects the purely supervised objective."""

    learning_rate: float = 2e-4
    adam_betas: tuple = (0.0, 0.9)
    d_steps_per_g_step: int = 5
    gamma: float = 100.0
    alpha: float = 0.0
    batch_size: int = 64
    fid_every: int = 500
    fid_sample_count: int = 5000
    patience: int = 10
    max_steps: int = 20000
    seed: int = 0
    p_ada: float = 0.0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.d_steps_per_g_step < 1:
            raise ValueError("d_steps_per_g_step must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.p_ada <= 1.0:
            raise ValueError("p_ada must be in [0, 1]")

    def fingerprint(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True, default=list)
        return hashlib.sha1(payload.encode()).hexdigest()[:12]


@dataclass
class Checkpoint:
    """GAN snapshot: both networks, optimizer moments, step counter, best FID."""

    generator: Generator
    discriminator: Discriminator
    arch: GanArch
    n_train_classes: int
    step: int
    best_fid: float
    config_fingerprint: str
    opt_state: dict = field(default_factory=dict)
    trace: list = field(default_factory=list)

    def save(self, path):
        from .params_io import save_container

        tensors, groups = {}, {}
        for prefix, net in (("generator", self.generator), ("discriminator", self.discriminator)):
            for name, p in net.state_dict().items():
                key = f"{prefix}.{name}"
                tensors[key] = p.detach().numpy()
                groups[key] = net.param_group(name)
        for key, arr in _flatten_opt_state(self.opt_state).items():
            tensors[key] = arr
        meta = {
            "kind": "gan",
            "arch": self.arch.to_dict(),
            "n_train_classes": self.n_train_classes,
            "step": self.step,
            "best_fid": self.best_fid,
            "config_fingerprint": self.config_fingerprint,
        }
        save_container(path, tensors, groups, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        from .params_io import load_container

        tensors, _, meta = load_container(path)
        arch = GanArch.from_dict(meta["arch"])
        gen, disc = Generator(arch), Discriminator(arch)
        for prefix, net in (("generator", gen), ("discriminator", disc)):
            state = {name[len(prefix) + 1:]: torch.from_numpy(arr)
                     for name, arr in tensors.items() if name.startswith(prefix + ".")}
            net.load_state_dict(state)
        opt_state = {name[len("opt."):]: arr for name, arr in tensors.items()
                     if name.startswith("opt.")}
        return cls(generator=gen, discriminator=disc, arch=arch,
                   n_train_classes=meta["n_train_classes"], step=meta["step"],
                   best_fid=meta["best_fid"],
                   config_fingerprint=meta["config_fingerprint"], opt_state=opt_state)


def _flatten_opt_state(opt_state: dict) -> dict:
    flat = {}
    for net_key, named in (opt_state or {}).items():
        for pname, moments in named.items():
            for mkey, arr in moments.items():
                flat[f"opt.{net_key}.{pname}.{mkey}"] = np.asarray(arr)
    return flat


def _collect_opt_state(opt: torch.optim.Adam, names: list) -> dict:
    named = {}
    params = [p for group in opt.param_groups for p in group["params"]]
    for pname, p in zip(names, params):
        st = opt.state.get(p)
        if st:
            named[pname] = {
                "exp_avg": st["exp_avg"].numpy().copy(),
                "exp_avg_sq": st["exp_avg_sq"].numpy().copy(),
                "step": np.asarray(float(st["step"])),
            }
    return named


def sample_latent(n: int, z_dim: int, sigma: float, generator: torch.Generator) -> torch.Tensor:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    return torch.randn(n, z_dim, generator=generator) * sigma


class AdaAugment:
    """Stochastic flips/rotations/translations applied to every D input with
    fixed probability p (non-adaptive). Differentiable in the image argument."""

    ROTATE_MAX_DEG = 15.0
    TRANSLATE_MAX = 0.125

    def __init__(self, p: float, seed: int):
        self.p = p
        self.gen = torch.Generator().manual_seed(seed)

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self.p <= 0:
            return x
        n = x.shape[0]
        apply = torch.rand(n, generator=self.gen) < self.p
        kind = torch.randint(0, 3, (n,), generator=self.gen)
        angle = (torch.rand(n, generator=self.gen) * 2 - 1) * math.radians(self.ROTATE_MAX_DEG)
        shift = (torch.rand(n, 2, generator=self.gen) * 2 - 1) * self.TRANSLATE_MAX
        theta = torch.zeros(n, 2, 3, dtype=x.dtype)
        theta[:, 0, 0] = 1.0
        theta[:, 1, 1] = 1.0
        flip = apply & (kind == 0)
        theta[flip, 0, 0] = -1.0
        rot = apply & (kind == 1)
        theta[rot, 0, 0] = torch.cos(angle[rot]).to(x.dtype)
        theta[rot, 0, 1] = -torch.sin(angle[rot]).to(x.dtype)
        theta[rot, 1, 0] = torch.sin(angle[rot]).to(x.dtype)
        theta[rot, 1, 1] = torch.cos(angle[rot]).to(x.dtype)
        trans = apply & (kind == 2)
        theta[trans, :, 2] = shift[trans].to(x.dtype)
        grid = F.affine_grid(theta, list(x.shape), align_corners=False)
        return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros",
                             align_corners=False)


def compute_d_losses(gen: Generator, disc: Discriminator, x_real, y_real, z, y_fake,
                     gamma: float, alpha: float = 0.0, x_unlabeled=None,
                     ada: AdaAugment | None = None) -> LossBreakdown:
    """Discriminator-side objective on one batch; fake images are detached.

    The fake batch is shared between the conditional (supervised) terms and,
    when alpha > 0, the unconditional-head terms. The latent-reconstruction
    term is weighted by gamma.
    """
    with torch.no_grad():
        x_fake = gen(z, y_fake)
    if ada is not None:
        x_real, x_fake = ada(x_real), ada(x_fake)
        if x_unlabeled is not None:
            x_unlabeled = ada(x_unlabeled)
    cond_r, _, _ = disc(x_real, y_real)
    cond_f, uncond_f, z_pred = disc(x_fake, y_fake)
    info = infogan_loss(z_pred, z)
    bd = LossBreakdown(
        d_real=F.softplus(-cond_r).mean(), d_fake=F.softplus(cond_f).mean(), info=info)
    if alpha > 0:
        if x_unlabeled is None:
            raise ValueError("alpha > 0 requires an unlabeled batch")
        _, uncond_u, _ = disc(x_unlabeled, torch.zeros(len(x_unlabeled), dtype=torch.long))
        bd.d_unsup_real = F.softplus(-uncond_u).mean()
        bd.d_unsup_fake = F.softplus(uncond_f).mean()
        bd.total_d = d_loss_semi(cond_r, cond_f, uncond_u, uncond_f, alpha) + gamma * info
    else:
        bd.total_d = d_loss_supervised(cond_r, cond_f) + gamma * info
    return bd


def compute_g_losses(gen: Generator, disc: Discriminator, z, y_fake, gamma: float,
                     alpha: float = 0.0, ada: AdaAugment | None = None) -> LossBreakdown:
    """Generator-side objective; gradients flow through D into G."""
    x_fake = gen(z, y_fake)
    if ada is not None:
        x_fake = ada(x_fake)
    cond_f, uncond_f, z_pred = disc(x_fake, y_fake)
    info = infogan_loss(z_pred, z)
    bd = LossBreakdown(g_adv=F.softplus(-cond_f).mean(), info=info)
    if alpha > 0:
        bd.g_unsup = F.softplus(-uncond_f).mean()
        bd.total_g = g_loss_semi(cond_f, uncond_f, alpha) + gamma * info
    else:
        bd.total_g = g_loss_supervised(cond_f) + gamma * info
    return bd


def generate_images(gen: Generator, slots: np.ndarray, sigma: float,
                    generator: torch.Generator, batch_size: int = 256) -> np.ndarray:
    """Conditional samples for the given label slots, rescaled from [-1,1] to [0,1]."""
    from .models import to_tensor

    gen.eval()
    out = []
    with torch.no_grad():
        for start in range(0, len(slots), batch_size):
            y = to_tensor(slots[start:start + batch_size])
            z = sample_latent(len(y), gen.arch.z_dim, sigma, generator)
            out.append(((gen(z, y) + 1.0) / 2.0).numpy())
    return np.concatenate(out) if out else np.empty((0,) + (gen.arch.image_channels,
                                                            gen.arch.image_size,
                                                            gen.arch.image_size))


class FidEvaluator:
    """FID against a reference subsample fixed once per run.

    Labels are copied from the sampled reference examples; z is fresh per
    evaluation but comes from a dedicated deterministic stream.
    """

    def __init__(self, feature_net, reference: ArrayBatch, n: int, seed: int):
        rng = np.random.default_rng(seed)
        n_eff = min(n, len(reference))
        idx = rng.choice(len(reference), size=n_eff, replace=False)
        self.feature_net = feature_net
        self.images = reference.images[idx]
        self.slots = reference.labels[idx]
        warn_if_undersampled(n_eff, feature_net.feature_dim)
        self.real_stats = fit_gaussian(extract_features(feature_net, self.images))
        self.z_stream = torch.Generator().manual_seed(seed + 1)

    def evaluate(self, gen: Generator, sigma: float = 1.0) -> float:
        fakes = generate_images(gen, self.slots, sigma, self.z_stream)
        stats = fit_gaussian(extract_features(self.feature_net, fakes))
        return frechet_distance(self.real_stats, stats)


def _real_batch(rng, images: np.ndarray, labels: np.ndarray, batch: int):
    idx = rng.integers(0, len(images), size=batch)
    x = torch.from_numpy(images[idx] * np.float32(2.0) - np.float32(1.0))
    return x, torch.from_numpy(labels[idx])


def _scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _breakdown_floats(bd: LossBreakdown) -> dict:
    return {f.name: _scalar(getattr(bd, f.name)) for f in dataclasses.fields(bd)}


def _run_gan_loop(gen, disc, opt_g, opt_d, sup_images, sup_labels, fake_slots,
                  config: GanTrainConfig, fid_eval: FidEvaluator, n_train_classes: int,
                  unlabeled_images: np.ndarray | None = None,
                  batch_size_sup: int | None = None) -> Checkpoint:
    # streams: config.seed / seed+1 belong to the FID evaluator; training gets +2/+3
    rng = np.random.default_rng(config.seed + 2)
    z_stream = torch.Generator().manual_seed(config.seed + 3)
    ada = AdaAugment(config.p_ada, config.seed + 97) if config.p_ada > 0 else None
    batch_sup = batch_size_sup or config.batch_size
    arch = gen.arch

    def snapshot(step, fid):
        return {
            "step": step, "fid": fid,
            "g": copy.deepcopy(gen.state_dict()), "d": copy.deepcopy(disc.state_dict()),
            "opt": {
                "g": _collect_opt_state(opt_g, _trainable_names(gen)),
                "d": _collect_opt_state(opt_d, _trainable_names(disc)),
            },
        }

    trace = []
    fid0 = fid_eval.evaluate(gen)
    best = snapshot(0, fid0)
    trace.append({"step": 0, "fid": fid0})
    stale = 0
    last_d = last_g = None
    for step in range(1, config.max_steps + 1):
        for _ in range(config.d_steps_per_g_step):
            x_r, y_r = _real_batch(rng, sup_images, sup_labels, batch_sup)
            y_f = torch.from_numpy(rng.choice(fake_slots, size=config.batch_size))
            z = sample_latent(config.batch_size, arch.z_dim, 1.0, z_stream)
            x_u = None
            if config.alpha > 0:
                u_idx = rng.integers(0, len(unlabeled_images), size=config.batch_size)
                x_u = torch.from_numpy(unlabeled_images[u_idx] * np.float32(2.0)
                                       - np.float32(1.0))
            bd = compute_d_losses(gen, disc, x_r, y_r, z, y_f, config.gamma,
                                  config.alpha, x_u, ada)
            opt_d.zero_grad(set_to_none=True)
            bd.total_d.backward()
            opt_d.step()
            last_d = bd
        y_f = torch.from_numpy(rng.choice(fake_slots, size=config.batch_size))
        z = sample_latent(config.batch_size, arch.z_dim, 1.0, z_stream)
        bd_g = compute_g_losses(gen, disc, z, y_f, config.gamma, config.alpha, ada)
        opt_g.zero_grad(set_to_none=True)
        bd_g.total_g.backward()
        opt_g.step()
        last_g = bd_g

        entry = {"step": step, "total_d": _scalar(last_d.total_d),
                 "total_g": _scalar(bd_g.total_g), "info": _scalar(bd_g.info)}
        if not (np.isfinite(entry["total_d"]) and np.isfinite(entry["total_g"])):
            raise GanDivergenceError(
                f"non-finite loss at step {step}",
                diagnostics={"step": step, "d": _breakdown_floats(last_d),
                             "g": _breakdown_floats(bd_g), "trace": trace})
        if step % config.fid_every == 0:
            fid = fid_eval.evaluate(gen)
            entry["fid"] = fid
            if fid < best["fid"]:
                best, stale = snapshot(step, fid), 0
            else:
                stale += 1
        trace.append(entry)
        if stale >= config.patience:
            break

    gen.load_state_dict(best["g"])
    disc.load_state_dict(best["d"])
    return Checkpoint(generator=gen, discriminator=disc, arch=arch,
                      n_train_classes=n_train_classes, step=best["step"],
                      best_fid=best["fid"], config_fingerprint=config.fingerprint(),
                      opt_state=best["opt"], trace=trace)


def _trainable_names(net) -> list:
    return [name for name, p in net.named_parameters() if p.requires_grad]


def pretrain_gan(train_split: ArrayBatch, arch: GanArch, config: GanTrainConfig,
                 feature_net) -> Checkpoint:
    """Train both networks from scratch on the source classes (slot labels).

    p(y) for fakes is uniform over the source slots; early stopping minimises
    FID against a fixed subsample of the training split.
    """
    images, labels = train_split
    if len(images) == 0:
        raise ValueError("empty training split")
    n_train = int(labels.max()) + 1
    gen = Generator(arch, init_seed=config.seed)
    disc = Discriminator(arch, init_seed=config.seed + 1)
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.learning_rate,
                             betas=config.adam_betas)
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.learning_rate,
                             betas=config.adam_betas)
    fid_eval = FidEvaluator(feature_net, train_split, config.fid_sample_count, config.seed)
    slots = np.arange(n_train, dtype=np.int64)
    return _run_gan_loop(gen, disc, opt_g, opt_d, images, labels, slots, config,
                         fid_eval, n_train)


def finetune_gan(checkpoint: Checkpoint, support: SupportSet,
                 unlabeled_pool: np.ndarray | None, mask: TrainableMask,
                 config: GanTrainConfig, feature_net,
                 reference_valid_split: ArrayBatch) -> Checkpoint:
    """Fine-tune on the support set with mask-based freezing.

    p(y) is uniform over the target slots only; optimizer moments start fresh;
    parameters outside the mask are verified bit-identical afterwards. With
    alpha > 0 the unconditional head plays an extra game on the unlabeled pool.
    """
    if config.alpha > 0 and (unlabeled_pool is None or len(unlabeled_pool) == 0):
        raise ValueError("semi-supervised fine-tuning (alpha > 0) needs an unlabeled pool")
    n_train = checkpoint.n_train_classes
    n_target = len(support.classes)
    if checkpoint.arch.class_budget < n_train + n_target:
        raise ValueError(
            f"class budget {checkpoint.arch.class_budget} below "
            f"{n_train}+{n_target}; extend_embeddings first")

    gen = copy.deepcopy(checkpoint.generator)
    disc = copy.deepcopy(checkpoint.discriminator)
    gen.set_trainable_groups(mask.g_groups)
    disc.set_trainable_groups(mask.d_groups)
    frozen = {
        "g": {n: p.detach().clone() for n, p in gen.named_parameters() if not p.requires_grad},
        "d": {n: p.detach().clone() for n, p in disc.named_parameters() if not p.requires_grad},
    }
    opt_g = torch.optim.Adam(gen.group_parameters(mask.g_groups), lr=config.learning_rate,
                             betas=config.adam_betas)
    opt_d = torch.optim.Adam(disc.group_parameters(mask.d_groups), lr=config.learning_rate,
                             betas=config.adam_betas)

    sup_images = support.images
    sup_slots = support.slot_labels(n_train)
    slots = np.arange(n_train, n_train + n_target, dtype=np.int64)
    batch_sup = min(config.batch_size, len(sup_images))
    fid_eval = FidEvaluator(feature_net, reference_valid_split, config.fid_sample_count,
                            config.seed)
    ckpt = _run_gan_loop(gen, disc, opt_g, opt_d, sup_images, sup_slots, slots, config,
                         fid_eval, n_train, unlabeled_images=unlabeled_pool,
                         batch_size_sup=batch_sup)
    for key, net in (("g", ckpt.generator), ("d", ckpt.discriminator)):
        params = dict(net.named_parameters())
        for name, saved in frozen[key].items():
            if not torch.equal(params[name], saved):
                raise RuntimeError(f"frozen parameter {key}.{name} changed during fine-tuning")
    return ckpt


def generate_class_samples(checkpoint: Checkpoint, n_classes: int, n_per_class: int,
                           sigma: float, seed: int):
    """(images in [0,1], head labels) for n_per_class samples of each target class."""
    slots = np.repeat(np.arange(checkpoint.n_train_classes,
                                checkpoint.n_train_classes + n_classes, dtype=np.int64),
                      n_per_class)
    stream = torch.Generator().manual_seed(seed)
    images = generate_images(checkpoint.generator, slots, sigma, stream)
    head = slots - checkpoint.n_train_classes
    return images, head


def generate_augmented_set(checkpoint: Checkpoint, support: SupportSet, n_s: int,
                           sigma: float, seed: int) -> AugmentedSet:
    """Support set plus n_s generated samples per class (labels in head space)."""
    if n_s < 0:
        raise ValueError("n_s must be >= 0")
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    base = AugmentedSet.from_support(support)
    if n_s == 0:
        return base
    images, head = generate_class_samples(checkpoint, len(support.classes), n_s, sigma, seed)
    return base.with_generated(images, head, n_s)
