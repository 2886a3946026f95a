"""Pipeline orchestration: seeded runs, hyperparameter sweeps, records, reports.

Protocol: per dataset seed the classes are split, the classifier and GAN are
pre-trained on the source classes, the GAN is fine-tuned per (dfm, gfm, alpha,
p_ada) cell and the per-seed winner is selected by validation FID; classifier
fine-tuning cells are model-selected on the validation split, and the test
split is evaluated exactly once per (seed, regime) at the valid-selected cell.

Records are append-only CSV rows guarded by a lock file; re-running a crashed
sweep skips completed cells (keyed by cell_id).
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from . import data as data_mod
from .classifier import (ClassifierConfig, FinetuneRegime, HeadFinetuneConfig,
                         evaluate_accuracy, finetune_classifier, load_classifier,
                         pretrain_classifier, replace_head, save_classifier)
from .data import ArrayBatch, ClassPartition, Dataset, sample_support, split_classes
from .metrics import extract_features, fake_validation_accuracy, knn_precision_recall
from .models import GanArch, expand_trainable_mask
from .train_gan import (Checkpoint, GanTrainConfig, finetune_gan,
                        generate_augmented_set, generate_images, pretrain_gan)

ARTIFACT_ROOT_ENV = "FEWGAN_ARTIFACT_ROOT"

COLUMNS = [
    "cell_id", "dataset_seed", "k", "regime", "stage", "status", "hyperparameters",
    "valid_accuracy", "test_accuracy", "fid", "precision", "recall",
    "fake_valid_accuracy", "wall_time", "artifacts", "error", "extractor",
]

_GAN_REGIMES = ("gan", "gan+semi")


# ---------------------------------------------------------------------------
# configuration tree
# ---------------------------------------------------------------------------

@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | idx | image_dir
    n_classes: int = 14
    per_class: int = 160
    image_side: int = 16
    seed: int = 0
    image_file: str = ""
    label_file: str = ""
    root: str = ""
    image_size: int = 0       # image_dir only; 0 = native resolution
    cap_per_class: int = 0    # 0 = no cap


@dataclass
class GanSection:
    width: int = 32
    n_blocks: int = 3
    z_dim: int = 64
    embed_dim: int = 16
    feat_dim: int = 0
    pretrain: GanTrainConfig = field(default_factory=GanTrainConfig)
    finetune: GanTrainConfig = field(
        default_factory=lambda: GanTrainConfig(max_steps=2000, fid_every=100))


@dataclass
class ClassifierSection:
    pretrain: ClassifierConfig = field(default_factory=ClassifierConfig)
    finetune: HeadFinetuneConfig = field(default_factory=HeadFinetuneConfig)


@dataclass
class MetricsSection:
    knn_k: int = 3
    pr_sample_count: int = 256
    fake_valid_per_class: int = 32
    selection: str = "fid"   # "fid" | "pr" (weighted precision/recall, optional)
    pr_weight: float = 0.5


@dataclass
class SweepGrids:
    n_s: tuple = (2, 5, 10, 20)
    min_scale: tuple = (0.2, 0.4, 0.6, 0.8)
    mixup_beta: tuple = (0.1, 0.2, 0.5, 1.0)
    alpha: tuple = (0.0, 0.1, 1.0, 5.0, 50.0, 100.0)
    dfm: tuple = ("all",)
    gfm: tuple = ("embed",)
    p_ada: tuple = (0.0, 0.5)
    sigma: tuple = (1.0, 1.5)


@dataclass
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    output_dir: str = "runs/exp"
    dataset_seeds: tuple = (0,)
    k: int = 5
    regimes: tuple = ("baseline", "baseline+aug", "mixup", "gan", "gan+semi")
    n_train_classes: int = 10
    n_target_classes: int = 4
    valid_fraction: float = 0.8
    gan: GanSection = field(default_factory=GanSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    grids: SweepGrids = field(default_factory=SweepGrids)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def config_from_dict(cls, payload: dict):
    """Build a (possibly nested) config dataclass, keeping defaults for absent keys.

    Config dataclasses are fully defaulted, so field types are taken from a
    default instance; JSON lists become tuples where the default is a tuple.
    """
    defaults = cls()
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in payload:
            continue
        value = payload[f.name]
        current = getattr(defaults, f.name)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            kwargs[f.name] = config_from_dict(type(current), value)
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def apply_overrides(payload: dict, assignments) -> dict:
    """Apply --set key.path=value overrides (values parsed as JSON when possible)."""
    for item in assignments or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ValueError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = payload
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return payload


def load_run_config(path=None, assignments=None) -> RunConfig:
    payload = json.loads(Path(path).read_text()) if path else {}
    payload = apply_overrides(payload, assignments)
    return config_from_dict(RunConfig, payload)


def resolve_output_dir(output_dir: str) -> Path:
    p = Path(output_dir).expanduser()
    root = os.environ.get(ARTIFACT_ROOT_ENV)
    if not p.is_absolute() and root:
        p = Path(root) / p
    return p


def load_dataset(spec: DatasetSpec) -> Dataset:
    if spec.kind == "synthetic":
        ds = data_mod.make_synthetic(spec.n_classes, spec.per_class, spec.image_side,
                                     spec.seed)
    elif spec.kind == "idx":
        ds = data_mod.load_idx_dataset(spec.image_file, spec.label_file)
    elif spec.kind == "image_dir":
        ds = data_mod.load_image_directory(spec.root, image_size=spec.image_size or None)
    else:
        raise ValueError(f"unknown dataset kind {spec.kind!r}")
    if spec.cap_per_class:
        ds = data_mod.cap_per_class(ds, spec.cap_per_class)
    return ds


# ---------------------------------------------------------------------------
# experiment records
# ---------------------------------------------------------------------------

@dataclass
class ExperimentRecord:
    cell_id: str
    dataset_seed: int
    k: int
    regime: str
    stage: str
    status: str = "done"
    hyperparameters: dict = field(default_factory=dict)
    valid_accuracy: float | None = None
    test_accuracy: float | None = None
    fid: float | None = None
    precision: float | None = None
    recall: float | None = None
    fake_valid_accuracy: float | None = None
    wall_time: float | None = None
    artifacts: str = ""
    error: str = ""
    extractor: str = ""

    def to_row(self) -> list:
        def num(v):
            return "" if v is None else repr(float(v))
        return [
            self.cell_id, str(self.dataset_seed), str(self.k), self.regime, self.stage,
            self.status, json.dumps(self.hyperparameters, sort_keys=True),
            num(self.valid_accuracy), num(self.test_accuracy), num(self.fid),
            num(self.precision), num(self.recall), num(self.fake_valid_accuracy),
            num(self.wall_time), self.artifacts, self.error, self.extractor,
        ]

    @classmethod
    def from_row(cls, row: dict) -> "ExperimentRecord":
        def num(v):
            return None if v == "" else float(v)
        return cls(
            cell_id=row["cell_id"], dataset_seed=int(row["dataset_seed"]),
            k=int(row["k"]), regime=row["regime"], stage=row["stage"],
            status=row["status"], hyperparameters=json.loads(row["hyperparameters"]),
            valid_accuracy=num(row["valid_accuracy"]), test_accuracy=num(row["test_accuracy"]),
            fid=num(row["fid"]), precision=num(row["precision"]), recall=num(row["recall"]),
            fake_valid_accuracy=num(row["fake_valid_accuracy"]), wall_time=num(row["wall_time"]),
            artifacts=row["artifacts"], error=row["error"], extractor=row["extractor"],
        )


def cell_identifier(dataset_seed: int, k: int, regime: str, stage: str, hp: dict) -> str:
    return f"{dataset_seed}:{k}:{regime}:{stage}:" + json.dumps(hp, sort_keys=True)


class RecordStore:
    """Append-only CSV of experiment records, guarded by a lock file."""

    def __init__(self, path):
        self.path = Path(path)
        self.lock = FileLock(str(self.path) + ".lock")

    def append(self, record: ExperimentRecord):
        with self.lock:
            fresh = not self.path.exists()
            with open(self.path, "a", newline="") as fh:
                writer = csv.writer(fh)
                if fresh:
                    writer.writerow(COLUMNS)
                writer.writerow(record.to_row())
                fh.flush()

    def read_all(self) -> list:
        if not self.path.exists():
            return []
        with open(self.path, newline="") as fh:
            return [ExperimentRecord.from_row(row) for row in csv.DictReader(fh)]

    def completed(self) -> dict:
        return {r.cell_id: r for r in self.read_all() if r.status == "done"}


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _support_seed(dataset_seed: int) -> int:
    return 1000 + dataset_seed


def _gen_seed(dataset_seed: int, n_s: int, sigma: float) -> int:
    return (dataset_seed * 1_000_003 + n_s * 101 + int(round(sigma * 16))) % (2 ** 31)


def _gan_arch(config: RunConfig, dataset: Dataset, partition: ClassPartition) -> GanArch:
    c, h, _ = dataset.image_shape
    return GanArch(class_budget=partition.class_budget, image_size=h, image_channels=c,
                   n_blocks=config.gan.n_blocks, width=config.gan.width,
                   z_dim=config.gan.z_dim, embed_dim=config.gan.embed_dim,
                   feat_dim=config.gan.feat_dim)


def run_pipeline(config: RunConfig):
    """Execute the full pipeline; returns (records path, all_cells_succeeded)."""
    out = resolve_output_dir(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        manifest_path.write_text(json.dumps({
            "config": config.to_dict(),
            "columns": COLUMNS,
            "support_seed_rule": "1000 + dataset_seed",
        }, indent=2, sort_keys=True))
    store = RecordStore(out / "records.csv")
    dataset = load_dataset(config.dataset)
    ok = True
    for seed in config.dataset_seeds:
        ok = _run_seed(config, dataset, int(seed), out, store) and ok
    return store.path, ok


def _run_seed(config, dataset, seed, out, store) -> bool:
    sdir = out / f"seed_{seed}"
    sdir.mkdir(exist_ok=True)
    done = store.completed()
    try:
        partition_path = sdir / "partition.json"
        if partition_path.exists():
            partition = ClassPartition.load(partition_path)
        else:
            partition = split_classes(dataset, seed, config.n_train_classes,
                                      config.n_target_classes, config.valid_fraction)
            partition.save(partition_path)
        support = sample_support(partition, dataset, config.k, _support_seed(seed))

        clf_path = sdir / "classifier.ckpt"
        if clf_path.exists():
            clf = load_classifier(clf_path)
        else:
            cfg = dataclasses.replace(config.classifier.pretrain,
                                      seed=config.classifier.pretrain.seed + seed)
            clf = pretrain_classifier(partition.train_arrays(dataset), cfg)
            save_classifier(clf_path, clf)

        gan_path = sdir / "gan_pretrain.ckpt"
        if gan_path.exists():
            gan_pre = Checkpoint.load(gan_path)
        else:
            cfg = dataclasses.replace(config.gan.pretrain,
                                      seed=config.gan.pretrain.seed + seed)
            gan_pre = pretrain_gan(partition.train_arrays(dataset),
                                   _gan_arch(config, dataset, partition), cfg, clf)
            gan_pre.save(gan_path)
            _write_trace(sdir / "gan_pretrain_trace.jsonl", gan_pre.trace)
    except Exception as exc:  # noqa: BLE001 - any stage failure becomes a failed row
        store.append(ExperimentRecord(
            cell_id=cell_identifier(seed, config.k, "*", "setup", {}),
            dataset_seed=seed, k=config.k, regime="*", stage="setup",
            status="failed", error=f"{type(exc).__name__}: {exc}"))
        return False

    ok = True
    for regime in config.regimes:
        try:
            ok = _run_regime(config, dataset, partition, support, clf, gan_pre,
                             regime, seed, sdir, store, done) and ok
        except Exception as exc:  # noqa: BLE001
            store.append(ExperimentRecord(
                cell_id=cell_identifier(seed, config.k, regime, "regime", {}),
                dataset_seed=seed, k=config.k, regime=regime, stage="regime",
                status="failed", error=f"{type(exc).__name__}: {exc}"))
            ok = False
    return ok


def _write_trace(path, trace):
    with open(path, "w") as fh:
        for entry in trace:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _select_gan_checkpoint(config, dataset, partition, support, clf, gan_pre, regime,
                           seed, sdir, store, done):
    """Fine-tune the GAN per grid cell and pick the per-seed winner by valid FID
    (or by weighted precision/recall when configured)."""
    grids = config.grids
    alphas = [0.0] if regime == "gan" else [a for a in grids.alpha if a > 0]
    if not alphas:
        raise ValueError("gan+semi regime needs alpha grid values > 0")
    valid_slots = partition.valid_arrays(dataset)
    unlabeled = partition.unlabeled_valid_images(dataset)
    scored = []
    for dfm, gfm, p_ada, alpha in itertools.product(grids.dfm, grids.gfm,
                                                    grids.p_ada, alphas):
        hp = {"dfm": dfm, "gfm": gfm, "p_ada": p_ada, "alpha": alpha,
              "gamma": config.gan.finetune.gamma}
        cid = cell_identifier(seed, config.k, regime, "gan_finetune", hp)
        slug = hashlib.sha1(cid.encode()).hexdigest()[:10]
        ckpt_path = sdir / f"gan_ft_{slug}.ckpt"
        if cid in done and ckpt_path.exists():
            rec = done[cid]
        else:
            start = time.perf_counter()
            cfg = dataclasses.replace(config.gan.finetune, alpha=alpha, p_ada=p_ada,
                                      seed=config.gan.finetune.seed + seed)
            mask = expand_trainable_mask(dfm, gfm)
            ckpt = finetune_gan(gan_pre, support, unlabeled, mask, cfg, clf, valid_slots)
            ckpt.save(ckpt_path)
            _write_trace(sdir / f"gan_ft_{slug}_trace.jsonl", ckpt.trace)
            precision, recall = _generated_pr(config, ckpt, clf, valid_slots, seed)
            rec = ExperimentRecord(
                cell_id=cid, dataset_seed=seed, k=config.k, regime=regime,
                stage="gan_finetune", hyperparameters=hp, fid=ckpt.best_fid,
                precision=precision, recall=recall,
                wall_time=time.perf_counter() - start, artifacts=str(ckpt_path),
                extractor=clf.fingerprint)
            store.append(rec)
        scored.append(rec)

    if config.metrics.selection == "pr":
        w = config.metrics.pr_weight
        key = [-(w * (r.precision or 0.0) + (1 - w) * (r.recall or 0.0)) for r in scored]
    else:
        key = [r.fid if r.fid is not None else np.inf for r in scored]
    winner = scored[int(np.argmin(key))]
    return Checkpoint.load(winner.artifacts), winner


def _generated_pr(config, ckpt, clf, valid_slots: ArrayBatch, seed):
    n = min(config.metrics.pr_sample_count, len(valid_slots.images))
    if n <= config.metrics.knn_k:
        return None, None
    rng = np.random.default_rng(seed + 71)
    idx = rng.choice(len(valid_slots.images), size=n, replace=False)
    fakes = generate_images(ckpt.generator, valid_slots.labels[idx], 1.0,
                            torch.Generator().manual_seed(seed + 73))
    pr = knn_precision_recall(extract_features(clf, valid_slots.images[idx]),
                              extract_features(clf, fakes), config.metrics.knn_k)
    return pr.precision, pr.recall


def _regime_cells(config, regime) -> list:
    grids = config.grids
    if regime == "baseline":
        return [{}]
    if regime == "baseline+aug":
        return [{"min_scale": m} for m in grids.min_scale]
    if regime == "mixup":
        return [{"mixup_beta": b} for b in grids.mixup_beta]
    return [{"n_s": n, "sigma": s} for n in grids.n_s for s in grids.sigma]


def _make_regime(regime, hp) -> FinetuneRegime:
    return FinetuneRegime(
        kind=regime,
        min_scale=hp.get("min_scale", 0.8),
        mixup_beta=hp.get("mixup_beta", 0.2),
        n_s=hp.get("n_s", 0),
        sigma=hp.get("sigma", 1.0),
    )


def _run_regime(config, dataset, partition, support, clf, gan_pre, regime, seed,
                sdir, store, done) -> bool:
    gan_ckpt = winner_rec = None
    if regime in _GAN_REGIMES:
        gan_ckpt, winner_rec = _select_gan_checkpoint(
            config, dataset, partition, support, clf, gan_pre, regime, seed, sdir,
            store, done)

    selection_set = partition.valid_head_arrays(dataset)
    test_set = partition.test_head_arrays(dataset)
    head_seed = seed * 31 + 7
    ft_cfg = dataclasses.replace(config.classifier.finetune,
                                 seed=config.classifier.finetune.seed + seed)

    def train_cell(hp):
        regime_obj = _make_regime(regime, hp)
        if regime in _GAN_REGIMES:
            train_set = generate_augmented_set(
                gan_ckpt, support, regime_obj.n_s, regime_obj.sigma,
                _gen_seed(seed, regime_obj.n_s, regime_obj.sigma))
        else:
            train_set = data_mod.AugmentedSet.from_support(support)
        head = replace_head(clf, partition.n_target, head_seed)
        return finetune_classifier(head, train_set, regime_obj, selection_set, ft_cfg)

    ok = True
    best = None  # (valid_acc, hp, model)
    for hp in _regime_cells(config, regime):
        cid = cell_identifier(seed, config.k, regime, "classifier", hp)
        if cid in done:
            rec = done[cid]
            if best is None or (rec.valid_accuracy or 0.0) > best[0]:
                best = (rec.valid_accuracy or 0.0, hp, None)
            continue
        start = time.perf_counter()
        try:
            model, valid_acc = train_cell(hp)
            fake_acc = None
            if regime in _GAN_REGIMES:
                fake_acc = fake_validation_accuracy(
                    model, gan_ckpt, partition, config.metrics.fake_valid_per_class,
                    hp.get("sigma", 1.0), _gen_seed(seed, hp.get("n_s", 0),
                                                    hp.get("sigma", 1.0)) + 17)
            rec = ExperimentRecord(
                cell_id=cid, dataset_seed=seed, k=config.k, regime=regime,
                stage="classifier", hyperparameters=hp, valid_accuracy=valid_acc,
                fid=winner_rec.fid if winner_rec else None,
                precision=winner_rec.precision if winner_rec else None,
                recall=winner_rec.recall if winner_rec else None,
                fake_valid_accuracy=fake_acc, wall_time=time.perf_counter() - start,
                extractor=clf.fingerprint)
            store.append(rec)
            if best is None or valid_acc > best[0]:
                best = (valid_acc, hp, model)
        except Exception as exc:  # noqa: BLE001
            store.append(ExperimentRecord(
                cell_id=cid, dataset_seed=seed, k=config.k, regime=regime,
                stage="classifier", status="failed", hyperparameters=hp,
                error=f"{type(exc).__name__}: {exc}",
                wall_time=time.perf_counter() - start))
            ok = False

    if best is None:
        return False
    test_cid = cell_identifier(seed, config.k, regime, "test", best[1])
    if any(r.stage == "test" and r.dataset_seed == seed and r.regime == regime
           and r.k == config.k for r in done.values()):
        return ok
    model = best[2]
    if model is None:  # resumed run: rebuild the winning cell deterministically
        model, _ = train_cell(best[1])
    start = time.perf_counter()
    test_acc = evaluate_accuracy(model, test_set)
    store.append(ExperimentRecord(
        cell_id=test_cid, dataset_seed=seed, k=config.k, regime=regime, stage="test",
        hyperparameters=best[1], valid_accuracy=best[0], test_accuracy=test_acc,
        wall_time=time.perf_counter() - start, extractor=clf.fingerprint))
    return ok


# ---------------------------------------------------------------------------
# aggregation, reporting, audit
# ---------------------------------------------------------------------------

@dataclass
class Report:
    methods: list
    best_hyperparameters: list
    fid_vs_k: list
    acc_vs_ns: list
    semi_vs_sup: list


def aggregate(records: list) -> Report:
    """Per (regime, k): mean +/- population std across seeds of the seed-best
    valid accuracy and the matching test accuracy; plus per-seed winners and the
    FID/accuracy summaries used by the report plots."""
    rows = [r for r in records if r.status == "done"]
    if not rows:
        raise ValueError("no completed records to aggregate")

    methods, best_hps = [], []
    cls_rows = [r for r in rows if r.stage == "classifier"]
    test_rows = [r for r in rows if r.stage == "test"]
    for regime, k in sorted({(r.regime, r.k) for r in cls_rows}):
        per_seed = {}
        for r in cls_rows:
            if r.regime == regime and r.k == k and r.valid_accuracy is not None:
                cur = per_seed.get(r.dataset_seed)
                if cur is None or r.valid_accuracy > cur.valid_accuracy:
                    per_seed[r.dataset_seed] = r
        if not per_seed:
            continue
        valid = np.asarray([r.valid_accuracy for r in per_seed.values()])
        tests = np.asarray([t.test_accuracy for t in test_rows
                            if t.regime == regime and t.k == k
                            and t.test_accuracy is not None])
        methods.append({
            "regime": regime, "k": k, "n_seeds": len(per_seed),
            "valid_mean": float(valid.mean()), "valid_std": float(valid.std()),
            "test_mean": float(tests.mean()) if len(tests) else None,
            "test_std": float(tests.std()) if len(tests) else None,
        })
        for s in sorted(per_seed):
            best_hps.append({
                "regime": regime, "k": k, "dataset_seed": s,
                "hyperparameters": json.dumps(per_seed[s].hyperparameters, sort_keys=True),
                "valid_accuracy": per_seed[s].valid_accuracy,
            })

    gan_rows = [r for r in rows if r.stage == "gan_finetune" and r.fid is not None]
    fid_vs_k = []
    for seed, k, regime in sorted({(r.dataset_seed, r.k, r.regime) for r in gan_rows}):
        fids = [r.fid for r in gan_rows
                if (r.dataset_seed, r.k, r.regime) == (seed, k, regime)]
        fid_vs_k.append({"dataset_seed": seed, "k": k, "regime": regime,
                         "best_fid": min(fids)})

    acc_vs_ns = [{
        "dataset_seed": r.dataset_seed, "k": r.k, "regime": r.regime,
        "n_s": r.hyperparameters.get("n_s"), "sigma": r.hyperparameters.get("sigma"),
        "valid_accuracy": r.valid_accuracy, "fake_valid_accuracy": r.fake_valid_accuracy,
    } for r in sorted(cls_rows, key=lambda r: r.cell_id)
        if r.regime in _GAN_REGIMES and r.hyperparameters.get("n_s") is not None]

    semi_vs_sup = []
    seeds_k = sorted({(r.dataset_seed, r.k) for r in gan_rows})
    for seed, k in seeds_k:
        sup = [r.fid for r in gan_rows if (r.dataset_seed, r.k) == (seed, k)
               and r.hyperparameters.get("alpha", 0) == 0]
        semi = [r.fid for r in gan_rows if (r.dataset_seed, r.k) == (seed, k)
                and r.hyperparameters.get("alpha", 0) > 0]
        if sup and semi:
            semi_vs_sup.append({"dataset_seed": seed, "k": k,
                                "supervised_fid": min(sup), "semi_fid": min(semi)})
    return Report(methods=methods, best_hyperparameters=best_hps, fid_vs_k=fid_vs_k,
                  acc_vs_ns=acc_vs_ns, semi_vs_sup=semi_vs_sup)


def _fmt(v):
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _table(rows: list, columns: list) -> str:
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c)
              for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


_PLOT_SCRIPT = """\
#!/usr/bin/env python3
# Plot hook for the data files emitted next to this script.
import csv
import sys
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

here = Path(__file__).parent


def rows(name):
    with open(here / name, newline="") as fh:
        return list(csv.DictReader(fh))


def maybe(name, fn):
    if (here / name).exists():
        fn(rows(name))


def fid_vs_k(data):
    ks = sorted({int(r["k"]) for r in data})
    by_k = [[float(r["best_fid"]) for r in data if int(r["k"]) == k] for k in ks]
    plt.figure()
    plt.boxplot(by_k, tick_labels=[str(k) for k in ks])
    plt.xlabel("k")
    plt.ylabel("best valid FID")
    plt.savefig(here / "fid_vs_k.png", dpi=120)


def acc_vs_ns(data):
    ns = sorted({int(r["n_s"]) for r in data})
    plt.figure()
    for key, marker in (("valid_accuracy", "o"), ("fake_valid_accuracy", "s")):
        ys = [[float(r[key]) for r in data if int(r["n_s"]) == n and r[key]] for n in ns]
        plt.plot(ns, [sum(v) / len(v) if v else float("nan") for v in ys],
                 marker=marker, label=key)
    plt.xlabel("n_s")
    plt.ylabel("accuracy")
    plt.legend()
    plt.savefig(here / "acc_vs_ns.png", dpi=120)


def semi_vs_sup(data):
    plt.figure()
    plt.scatter([float(r["supervised_fid"]) for r in data],
                [float(r["semi_fid"]) for r in data])
    lim = max(float(r["supervised_fid"]) for r in data)
    plt.plot([0, lim], [0, lim], "k--", lw=0.8)
    plt.xlabel("supervised FID")
    plt.ylabel("semi-supervised FID")
    plt.savefig(here / "semi_vs_sup.png", dpi=120)


if __name__ == "__main__":
    maybe("fid_vs_k.csv", fid_vs_k)
    maybe("acc_vs_ns.csv", acc_vs_ns)
    maybe("semi_vs_sup.csv", semi_vs_sup)
    print("plots written to", here)
"""


def render_report(report: Report, out_dir) -> dict:
    """Aligned text tables plus CSV data files for the boxplot-style summaries."""
    if not (report.methods or report.fid_vs_k or report.acc_vs_ns):
        raise ValueError("empty report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    text = ["# Method accuracy (mean +/- population std over dataset seeds)", ""]
    text.append(_table(report.methods,
                       ["regime", "k", "n_seeds", "valid_mean", "valid_std",
                        "test_mean", "test_std"]))
    text += ["", "# Per-seed winning hyperparameters", ""]
    text.append(_table(report.best_hyperparameters,
                       ["regime", "k", "dataset_seed", "valid_accuracy",
                        "hyperparameters"]))
    paths["report"] = out / "report.txt"
    paths["report"].write_text("\n".join(text) + "\n")

    for name, rows, cols in (
        ("fid_vs_k", report.fid_vs_k, ["dataset_seed", "k", "regime", "best_fid"]),
        ("acc_vs_ns", report.acc_vs_ns,
         ["dataset_seed", "k", "regime", "n_s", "sigma", "valid_accuracy",
          "fake_valid_accuracy"]),
        ("semi_vs_sup", report.semi_vs_sup,
         ["dataset_seed", "k", "supervised_fid", "semi_fid"]),
        ("methods", report.methods,
         ["regime", "k", "n_seeds", "valid_mean", "valid_std", "test_mean", "test_std"]),
    ):
        p = out / f"{name}.csv"
        with open(p, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for r in rows:
                writer.writerow(["" if r.get(c) is None else r.get(c) for c in cols])
        paths[name] = p

    paths["plot_script"] = out / "plot_report.py"
    paths["plot_script"].write_text(_PLOT_SCRIPT)
    return paths


def audit_single_test_evaluation(records: list) -> list:
    """Protocol audit: at most one test-stage row per (seed, k, regime), and no
    test accuracy leaking into non-test rows."""
    violations = []
    counts = {}
    for r in records:
        if r.status != "done":
            continue
        if r.stage == "test":
            key = (r.dataset_seed, r.k, r.regime)
            counts[key] = counts.get(key, 0) + 1
        elif r.test_accuracy is not None:
            violations.append(f"row {r.cell_id}: test accuracy on stage {r.stage}")
    for key, n in sorted(counts.items()):
        if n > 1:
            violations.append(
                f"seed={key[0]} k={key[1]} regime={key[2]}: {n} test evaluations")
    return violations
