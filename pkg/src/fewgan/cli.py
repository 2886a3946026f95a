"""Command-line interface.

Every subcommand reads a JSON config (--config) with --set key.path=value
overrides; artifacts land under the config's output_dir, resolved against the
FEWGAN_ARTIFACT_ROOT environment variable when relative. `sweep` runs the full
pipeline and exits 0 only if every cell succeeded.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .classifier import (FinetuneRegime, evaluate_accuracy, finetune_classifier,
                         load_classifier, pretrain_classifier, replace_head,
                         save_classifier)
from .data import AugmentedSet, ClassPartition, sample_support, split_classes
from .harness import (RecordStore, aggregate, audit_single_test_evaluation,
                      load_run_config, render_report, resolve_output_dir)
from .metrics import extract_features, fit_gaussian, frechet_distance, knn_precision_recall
from .models import expand_trainable_mask
from .train_gan import Checkpoint, finetune_gan, generate_augmented_set, pretrain_gan


def _add_config_args(p):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", metavar="KEY=VALUE",
                   help="override a config entry (JSON-parsed)")


def _setup(args):
    config = load_run_config(args.config, args.overrides)
    out = resolve_output_dir(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def _seed_dir(out: Path, seed: int) -> Path:
    d = out / f"seed_{seed}"
    d.mkdir(exist_ok=True)
    return d


def _load_world(config, out, seed):
    dataset = harness.load_dataset(config.dataset)
    partition = ClassPartition.load(_seed_dir(out, seed) / "partition.json")
    return dataset, partition


def cmd_split(args):
    config, out = _setup(args)
    dataset = harness.load_dataset(config.dataset)
    for seed in config.dataset_seeds:
        partition = split_classes(dataset, int(seed), config.n_train_classes,
                                  config.n_target_classes, config.valid_fraction)
        path = _seed_dir(out, seed) / "partition.json"
        partition.save(path)
        print(f"seed {seed}: {partition.n_train} train / {partition.n_target} target "
              f"classes -> {path}")
    return 0


def cmd_pretrain_classifier(args):
    config, out = _setup(args)
    for seed in config.dataset_seeds:
        dataset, partition = _load_world(config, out, seed)
        cfg = dataclasses.replace(config.classifier.pretrain,
                                  seed=config.classifier.pretrain.seed + int(seed))
        clf = pretrain_classifier(partition.train_arrays(dataset), cfg)
        path = _seed_dir(out, seed) / "classifier.ckpt"
        save_classifier(path, clf)
        print(f"seed {seed}: classifier saved -> {path}")
    return 0


def cmd_pretrain_gan(args):
    config, out = _setup(args)
    for seed in config.dataset_seeds:
        dataset, partition = _load_world(config, out, seed)
        clf = load_classifier(_seed_dir(out, seed) / "classifier.ckpt")
        cfg = dataclasses.replace(config.gan.pretrain,
                                  seed=config.gan.pretrain.seed + int(seed))
        ckpt = pretrain_gan(partition.train_arrays(dataset),
                            harness._gan_arch(config, dataset, partition), cfg, clf)
        path = _seed_dir(out, seed) / "gan_pretrain.ckpt"
        ckpt.save(path)
        print(f"seed {seed}: best FID {ckpt.best_fid:.4f} at step {ckpt.step} -> {path}")
    return 0


def cmd_finetune_gan(args):
    config, out = _setup(args)
    for seed in config.dataset_seeds:
        dataset, partition = _load_world(config, out, seed)
        sdir = _seed_dir(out, seed)
        clf = load_classifier(sdir / "classifier.ckpt")
        ckpt = Checkpoint.load(sdir / "gan_pretrain.ckpt")
        support = sample_support(partition, dataset, config.k,
                                 harness._support_seed(int(seed)))
        cfg = dataclasses.replace(config.gan.finetune, alpha=args.alpha,
                                  p_ada=args.p_ada,
                                  seed=config.gan.finetune.seed + int(seed))
        tuned = finetune_gan(ckpt, support, partition.unlabeled_valid_images(dataset),
                             expand_trainable_mask(args.dfm, args.gfm), cfg, clf,
                             partition.valid_arrays(dataset))
        path = sdir / f"gan_ft_{args.dfm}_{args.gfm}_a{args.alpha}.ckpt"
        tuned.save(path)
        print(f"seed {seed}: fine-tuned FID {tuned.best_fid:.4f} -> {path}")
    return 0


def cmd_generate(args):
    config, out = _setup(args)
    for seed in config.dataset_seeds:
        dataset, partition = _load_world(config, out, seed)
        sdir = _seed_dir(out, seed)
        ckpt = Checkpoint.load(Path(args.checkpoint) if args.checkpoint
                               else sdir / "gan_pretrain.ckpt")
        support = sample_support(partition, dataset, config.k,
                                 harness._support_seed(int(seed)))
        aug = generate_augmented_set(ckpt, support, args.n_s, args.sigma,
                                     harness._gen_seed(int(seed), args.n_s, args.sigma))
        path = sdir / f"augmented_ns{args.n_s}.npz"
        np.savez(path, images=aug.images, labels=aug.labels, k=aug.k, n_s=aug.n_s,
                 classes=np.asarray(aug.classes))
        print(f"seed {seed}: {len(aug)} examples -> {path}")
    return 0


def cmd_finetune_classifier(args):
    config, out = _setup(args)
    for seed in config.dataset_seeds:
        dataset, partition = _load_world(config, out, seed)
        sdir = _seed_dir(out, seed)
        clf = load_classifier(sdir / "classifier.ckpt")
        support = sample_support(partition, dataset, config.k,
                                 harness._support_seed(int(seed)))
        if args.augmented_set:
            blob = np.load(args.augmented_set)
            train_set = AugmentedSet(images=blob["images"], labels=blob["labels"],
                                     classes=tuple(int(c) for c in blob["classes"]),
                                     k=int(blob["k"]), n_s=int(blob["n_s"]))
        else:
            train_set = AugmentedSet.from_support(support)
        regime = FinetuneRegime(kind=args.regime, min_scale=args.min_scale,
                                mixup_beta=args.mixup_beta)
        head = replace_head(clf, partition.n_target, int(seed) * 31 + 7)
        cfg = dataclasses.replace(config.classifier.finetune,
                                  seed=config.classifier.finetune.seed + int(seed))
        model, acc = finetune_classifier(head, train_set, regime,
                                         partition.valid_head_arrays(dataset), cfg)
        path = sdir / f"classifier_ft_{args.regime}.ckpt"
        save_classifier(path, model)
        print(f"seed {seed}: valid accuracy {acc:.4f} -> {path}")
    return 0


def cmd_evaluate(args):
    config, out = _setup(args)
    for seed in config.dataset_seeds:
        dataset, partition = _load_world(config, out, seed)
        model = load_classifier(args.classifier)
        batch = (partition.test_head_arrays(dataset) if args.split == "test"
                 else partition.valid_head_arrays(dataset))
        print(f"seed {seed}: {args.split} accuracy "
              f"{evaluate_accuracy(model, batch):.4f}")
    return 0


def cmd_sweep(args):
    config, _ = _setup(args)
    records_path, ok = harness.run_pipeline(config)
    rows = RecordStore(records_path).read_all()
    failed = [r for r in rows if r.status == "failed"]
    print(f"{len(rows)} rows in {records_path} ({len(failed)} failed)")
    return 0 if ok and not failed else 1


def cmd_report(args):
    if args.records:
        records_path = Path(args.records)
        out = records_path.parent / "report"
    else:
        config, run_dir = _setup(args)
        records_path = run_dir / "records.csv"
        out = run_dir / "report"
    rows = RecordStore(records_path).read_all()
    violations = audit_single_test_evaluation(rows)
    if violations:
        print("PROTOCOL VIOLATIONS:", *violations, sep="\n  ")
        return 1
    paths = render_report(aggregate(rows), args.out or out)
    print(f"report -> {paths['report']}")
    return 0


def cmd_score(args):
    from .data import load_image_directory

    feature_net = load_classifier(args.feature_net)
    sets = {}
    for name, root in (("real", args.real), ("fake", args.fake)):
        ds = load_image_directory(root, image_size=feature_net.image_shape[1])
        sets[name] = extract_features(feature_net, ds.images)
    fid = frechet_distance(fit_gaussian(sets["real"]), fit_gaussian(sets["fake"]))
    pr = knn_precision_recall(sets["real"], sets["fake"], args.knn_k)
    print(json.dumps({"fid": fid, "precision": pr.precision, "recall": pr.recall},
                     sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewgan",
        description="Few-shot GAN data-augmentation workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    commands = {
        "split": cmd_split,
        "pretrain-classifier": cmd_pretrain_classifier,
        "pretrain-gan": cmd_pretrain_gan,
        "finetune-gan": cmd_finetune_gan,
        "generate": cmd_generate,
        "finetune-classifier": cmd_finetune_classifier,
        "evaluate": cmd_evaluate,
        "sweep": cmd_sweep,
        "report": cmd_report,
        "score": cmd_score,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        p.set_defaults(fn=fn)
        if name != "score":
            _add_config_args(p)
    ft = sub.choices["finetune-gan"]
    ft.add_argument("--dfm", default="all", choices=["embed", "linear", "all"])
    ft.add_argument("--gfm", default="embed", choices=["embed", "linear"])
    ft.add_argument("--alpha", type=float, default=0.0)
    ft.add_argument("--p-ada", type=float, default=0.0)
    gen = sub.choices["generate"]
    gen.add_argument("--n-s", type=int, default=10)
    gen.add_argument("--sigma", type=float, default=1.0)
    gen.add_argument("--checkpoint", help="GAN checkpoint (default: pre-trained)")
    ftc = sub.choices["finetune-classifier"]
    ftc.add_argument("--regime", default="baseline",
                     choices=["baseline", "baseline+aug", "mixup", "gan", "gan+semi"])
    ftc.add_argument("--min-scale", type=float, default=0.8)
    ftc.add_argument("--mixup-beta", type=float, default=0.2)
    ftc.add_argument("--augmented-set", help=".npz from the generate command")
    ev = sub.choices["evaluate"]
    ev.add_argument("--classifier", required=True)
    ev.add_argument("--split", default="valid", choices=["valid", "test"])
    rep = sub.choices["report"]
    rep.add_argument("--records", help="records.csv (default: <output_dir>/records.csv)")
    rep.add_argument("--out", help="report directory")
    sc = sub.choices["score"]
    sc.add_argument("--real", required=True, help="directory of real images")
    sc.add_argument("--fake", required=True, help="directory of generated images")
    sc.add_argument("--feature-net", required=True, help="classifier checkpoint")
    sc.add_argument("--knn-k", type=int, default=3)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
