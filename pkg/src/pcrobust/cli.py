"""Command-line surface: gen-data, train, attack, eval, bench, gradcheck."""

import argparse
import csv
import hashlib
import json
import os
import statistics
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import gradcheck as gc
from .backbones import Classifier, make_spec
from .config import DEFAULTS, load_config
from .errors import PCRobustError
from .meshdata import LabeledDataset, load_dataset, save_cloud_text, save_dataset, synth_dataset
from .training import (
    AttackPlan,
    TrainConfig,
    evaluate,
    load_checkpoint,
    rng_state_bytes,
    save_checkpoint,
    train,
)

METRICS_COLUMNS = [
    "run_id", "timestamp", "command", "seed", "backbone", "pool", "attack",
    "budget", "steps", "nominal_acc", "adversarial_acc", "mean_l2",
    "mean_linf", "wall_time",
]


def _run_id(command, seed, cfg):
    blob = json.dumps([command, seed, cfg.as_flat_dict()], sort_keys=True, default=str)
    return f"{command}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"


def _append_rows(path, rows):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fresh = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_NONNUMERIC)
        if fresh:
            writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in METRICS_COLUMNS])


def _emit_metrics(out_dir, rows):
    _append_rows(os.path.join(out_dir, "metrics.csv"), rows)
    parent = os.path.dirname(os.path.abspath(out_dir))
    _append_rows(os.path.join(parent, "metrics_log.csv"), rows)


def _metrics_row(run_id, command, seed, backbone, pool, attack="none", budget=0.0,
                 steps=0, nominal=0.0, adversarial="", mean_l2=0.0, mean_linf=0.0,
                 wall=0.0):
    return {
        "run_id": run_id,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "command": command,
        "seed": seed,
        "backbone": backbone,
        "pool": pool,
        "attack": attack,
        "budget": budget,
        "steps": steps,
        "nominal_acc": nominal,
        "adversarial_acc": adversarial,
        "mean_l2": mean_l2,
        "mean_linf": mean_linf,
        "wall_time": wall,
    }


def _load_splits(cfg):
    root = cfg.data_root()
    manifest_path = os.path.join(root, "manifest.json")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    names = manifest["class_names"]
    return (load_dataset(root, "train", names), load_dataset(root, "val", names), manifest)


def _spec_from_cfg(cfg, n_classes, n_points):
    pool_kind = cfg.get("pool", "kind")
    return make_spec(
        cfg.get("model", "backbone"), pool_kind, n_classes=n_classes, n_train=n_points,
        pool_att_width=cfg.get("pool", "L"), pool_pma_heads=cfg.get("pool", "heads"),
        pool_pma_seeds=cfg.get("pool", "k_seeds"), pool_pma_hidden=cfg.get("pool", "hidden"),
        pool_soft_top_k=cfg.get("pool", "k_top"), pool_soft_d_m=cfg.get("pool", "d_m"),
        pool_mlp_widths=cfg.get("pool", "mlp_widths"))


def _train_cfg(cfg, seed_override=None):
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], optimizer=t["optimizer"],
        lr=t["lr"], lr_halve_every=t["lr_halve_every"], at_steps=t["at_steps"],
        at_epsilon=t["epsilon"], at_random_start=t["random_start"],
        seed=t["seed"] if seed_override is None else seed_override)


def _attack_plan(cfg, threads=1):
    a = cfg["attack"]
    target = a["target"] if a["targeted"] and a["target"] >= 0 else None
    return AttackPlan(kind=a["kind"], epsilon=a["epsilon"], steps=a["steps"],
                      delta=a["delta"], queries=a["queries"], target=target)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    root = args.out or cfg.data_root()
    d = cfg["data"]
    seed = d["seed"]
    train_ds = synth_dataset(d["classes"], d["per_class"], d["points"],
                             np.random.default_rng([seed, 0]), split="train")
    val_ds = synth_dataset(d["classes"], d["val_per_class"], d["points"],
                           np.random.default_rng([seed, 1]), split="val")
    os.makedirs(root, exist_ok=True)
    save_dataset(root, train_ds)
    save_dataset(root, val_ds)
    manifest = {
        "classes": d["classes"], "per_class": d["per_class"],
        "val_per_class": d["val_per_class"], "points": d["points"], "seed": seed,
        "class_names": train_ds.class_names,
        "train_count": len(train_ds), "val_count": len(val_ds),
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
    print(f"wrote {len(train_ds)} train / {len(val_ds)} val samples to {root}")
    return 0


def cmd_train(args, cfg):
    train_ds, val_ds, manifest = _load_splits(cfg)
    spec = _spec_from_cfg(cfg, len(manifest["class_names"]), manifest["points"])
    tcfg = _train_cfg(cfg)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    run_id = _run_id("train", tcfg.seed, cfg)
    rows = []
    t0 = time.perf_counter()

    params, history, data_rng = train(spec, train_ds, tcfg,
                                      log=lambda row: print(f"epoch {row['epoch']:3d} "
                                                            f"loss {row['loss']:.4f}"))
    model = Classifier(spec, params)
    report = evaluate(model, val_ds, seed=tcfg.seed, threads=args.threads)
    wall = time.perf_counter() - t0
    ckpt_path = os.path.join(out_dir, "checkpoint.pcrw")
    save_checkpoint(ckpt_path, spec, params,
                    step=tcfg.epochs, rng_state=rng_state_bytes(data_rng))
    for row in history:
        rows.append(_metrics_row(run_id, "train", tcfg.seed, spec.kind, spec.pool.kind,
                                 attack="none", steps=row["epoch"],
                                 nominal=round(row["loss"], 6), wall=round(row["seconds"], 3)))
    rows.append(_metrics_row(run_id, "train", tcfg.seed, spec.kind, spec.pool.kind,
                             attack="none", nominal=report.nominal_accuracy,
                             wall=round(wall, 3)))
    _emit_metrics(out_dir, rows)
    print(f"nominal accuracy {report.nominal_accuracy:.3f}; checkpoint at {ckpt_path}")
    return 0


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    return Classifier(ckpt.spec, ckpt.params), ckpt


def cmd_attack(args, cfg):
    _, val_ds, manifest = _load_splits(cfg)
    model, ckpt = _model_from_checkpoint(args.checkpoint)
    plan = _attack_plan(cfg)
    a = cfg["attack"]
    if a["samples"]:
        val_ds = LabeledDataset(val_ds.samples[: a["samples"]], val_ds.class_names, "val")
    seed = args.seed if args.seed is not None else cfg.get("train", "seed")
    t0 = time.perf_counter()
    report = evaluate(model, val_ds, [plan], seed=seed, threads=args.threads)
    wall = time.perf_counter() - t0
    metrics = report.adversarial[plan.name()]
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    run_id = _run_id("attack", seed, cfg)
    budget = plan.delta if plan.kind == "pgd_l2" else plan.epsilon
    rows = [_metrics_row(run_id, "attack", seed, ckpt.spec.kind, ckpt.spec.pool.kind,
                         attack=plan.kind, budget=budget, steps=plan.steps,
                         nominal=report.nominal_accuracy,
                         adversarial=metrics["accuracy"],
                         mean_l2=round(metrics["mean_l2"], 6),
                         mean_linf=round(metrics["mean_linf"], 6),
                         wall=round(wall, 3))]
    _emit_metrics(out_dir, rows)
    if args.save_adv:
        adv_dir = os.path.join(out_dir, "adv")
        os.makedirs(adv_dir, exist_ok=True)
        outcomes = _rerun_for_clouds(model, val_ds, plan, seed, args.threads)
        for i, o in enumerate(outcomes):
            pc = val_ds.samples[i]
            save_cloud_text(os.path.join(adv_dir, f"{i:05d}.txt"),
                            type(pc)(o.adversarial, pc.label))
        print(f"saved {len(outcomes)} adversarial clouds to {adv_dir}")
    print(f"nominal {report.nominal_accuracy:.3f} adversarial {metrics['accuracy']:.3f}")
    return 0


def _rerun_for_clouds(model, dataset, plan, seed, threads):
    from .training import _run_plan
    X = dataset.points_array().astype(np.float32)
    y = dataset.labels_array()
    outcomes = []
    for i in range(0, len(X), 64):
        hi = min(i + 64, len(X))
        out = _run_plan(model, plan, X[i:hi], y[i:hi],
                        [seed ^ j for j in range(i, hi)], threads)
        outcomes.extend(out if isinstance(out, list) else [out])
    return outcomes


def cmd_eval(args, cfg):
    _, val_ds, manifest = _load_splits(cfg)
    model, ckpt = _model_from_checkpoint(args.checkpoint)
    plans = [] if cfg.get("attack", "kind") == "none" else [_attack_plan(cfg)]
    seed = args.seed if args.seed is not None else cfg.get("train", "seed")
    t0 = time.perf_counter()
    report = evaluate(model, val_ds, plans, seed=seed, threads=args.threads)
    wall = time.perf_counter() - t0
    out_dir = args.out
    run_id = _run_id("eval", seed, cfg)
    rows = [_metrics_row(run_id, "eval", seed, ckpt.spec.kind, ckpt.spec.pool.kind,
                         nominal=report.nominal_accuracy, wall=round(wall, 3))]
    for name, metrics in report.adversarial.items():
        rows.append(_metrics_row(run_id, "eval", seed, ckpt.spec.kind,
                                 ckpt.spec.pool.kind, attack=name,
                                 nominal=report.nominal_accuracy,
                                 adversarial=metrics["accuracy"],
                                 mean_l2=round(metrics["mean_l2"], 6),
                                 mean_linf=round(metrics["mean_linf"], 6),
                                 wall=round(wall, 3)))
    _emit_metrics(out_dir, rows)
    print(f"nominal {report.nominal_accuracy:.3f}")
    for name, metrics in report.adversarial.items():
        print(f"{name}: adversarial {metrics['accuracy']:.3f}")
    return 0


def cmd_bench(args, cfg):
    train_ds, val_ds, manifest = _load_splits(cfg)
    pools = [p.strip() for p in args.pools.split(",") if p.strip()]
    seeds = list(range(args.seeds))
    plan = _attack_plan(cfg)
    out_dir = args.out
    os.makedirs(out_dir, exist_ok=True)
    run_id = _run_id("bench", cfg.get("train", "seed"), cfg)
    rows = []
    results = {}
    for pool in pools:
        per_seed = []
        for seed in seeds:
            pool_cfg_overrides = {("pool", "kind"): pool}
            sub_cfg = load_config(args.config, {**_collect_overrides(args), **pool_cfg_overrides})
            spec = _spec_from_cfg(sub_cfg, len(manifest["class_names"]), manifest["points"])
            tcfg = _train_cfg(sub_cfg, seed_override=cfg.get("train", "seed") + seed)
            t0 = time.perf_counter()
            params, _, _ = train(spec, train_ds, tcfg)
            model = Classifier(spec, params)
            report = evaluate(model, val_ds, [plan], seed=tcfg.seed, threads=args.threads)
            wall = time.perf_counter() - t0
            adv = report.adversarial[plan.name()]["accuracy"]
            per_seed.append((report.nominal_accuracy, adv))
            rows.append(_metrics_row(run_id, "bench", tcfg.seed, spec.kind, pool,
                                     attack=plan.kind, budget=plan.epsilon,
                                     steps=plan.steps, nominal=report.nominal_accuracy,
                                     adversarial=adv, wall=round(wall, 3)))
            print(f"bench {pool} seed {tcfg.seed}: nominal {report.nominal_accuracy:.3f} "
                  f"adversarial {adv:.3f}")
        med_nom = statistics.median(v[0] for v in per_seed)
        med_adv = statistics.median(v[1] for v in per_seed)
        results[pool] = (med_nom, med_adv)
        rows.append(_metrics_row(run_id, "bench", cfg.get("train", "seed"),
                                 cfg.get("model", "backbone"), pool,
                                 attack=f"{plan.kind}-median", budget=plan.epsilon,
                                 steps=plan.steps, nominal=med_nom, adversarial=med_adv))
    rows.sort(key=lambda r: (r["attack"].endswith("median"),
                             -(r["adversarial_acc"] if r["adversarial_acc"] != "" else -1)))
    _emit_metrics(out_dir, rows)
    print("pool ranking by median adversarial accuracy:")
    for pool, (nom, adv) in sorted(results.items(), key=lambda kv: -kv[1][1]):
        print(f"  {pool:10s} nominal {nom:.3f} adversarial {adv:.3f}")
    return 0


def cmd_gradcheck(args, cfg):
    results, ok = gc.run_suite(component=args.component, kind=args.kind,
                               seed=args.seed or 0, trials=args.trials,
                               flip=args.inject_fault)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.component:10s} {r.name:14s} worst rel err {r.worst:.3e}  {status}")
    print("gradcheck:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(sub):
    sub.add_argument("--config", default=None, help="INI config file")
    sub.add_argument("--seed", type=int, default=None)
    sub.add_argument("--threads", type=int, default=1)
    sub.add_argument("--out", default="runs/out", help="run directory")


def _collect_overrides(args):
    pairs = {
        ("data", "classes"): getattr(args, "classes", None),
        ("data", "per_class"): getattr(args, "per_class", None),
        ("data", "val_per_class"): getattr(args, "val_per_class", None),
        ("data", "points"): getattr(args, "points", None),
        ("data", "seed"): getattr(args, "seed", None),
        ("data", "root"): getattr(args, "data", None),
        ("model", "backbone"): getattr(args, "backbone", None),
        ("pool", "kind"): getattr(args, "pool", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("train", "batch_size"): getattr(args, "batch", None),
        ("train", "lr"): getattr(args, "lr", None),
        ("train", "optimizer"): getattr(args, "optimizer", None),
        ("train", "at_steps"): getattr(args, "at_steps", None),
        ("train", "epsilon"): getattr(args, "epsilon", None),
        ("train", "seed"): getattr(args, "seed", None),
        ("attack", "kind"): getattr(args, "attack", None),
        ("attack", "epsilon"): getattr(args, "attack_epsilon", None),
        ("attack", "steps"): getattr(args, "steps", None),
        ("attack", "delta"): getattr(args, "delta", None),
        ("attack", "target"): getattr(args, "target", None),
        ("attack", "queries"): getattr(args, "queries", None),
        ("attack", "samples"): getattr(args, "samples", None),
    }
    if getattr(args, "target", None) is not None and args.target >= 0:
        pairs[("attack", "targeted")] = True
    return {k: v for k, v in pairs.items() if v is not None}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pcrobust",
        description="Attack, defend, and adversarially train point-cloud classifiers.")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen-data", help="generate the synthetic labeled dataset")
    _add_common(p)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--per-class", dest="per_class", type=int, default=None)
    p.add_argument("--val-per-class", dest="val_per_class", type=int, default=None)
    p.add_argument("--points", type=int, default=None)
    p.set_defaults(func=cmd_gen_data)

    p = subs.add_parser("train", help="train a classifier (optionally adversarially)")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--backbone", default=None)
    p.add_argument("--pool", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", default=None)
    p.add_argument("--at-steps", dest="at_steps", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("attack", help="attack a checkpoint over the val split")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--attack", default=None)
    p.add_argument("--attack-epsilon", dest="attack_epsilon", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--target", type=int, default=None)
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--save-adv", dest="save_adv", action="store_true")
    p.set_defaults(func=cmd_attack)

    p = subs.add_parser("eval", help="evaluate a checkpoint (nominal + configured attack)")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("bench", help="train + evaluate one model per pooling")
    _add_common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--pools", default="max,fspool,deepsym")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--backbone", default=None)
    p.add_argument("--pool", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--optimizer", default=None)
    p.add_argument("--at-steps", dest="at_steps", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--attack", default=None)
    p.add_argument("--attack-epsilon", dest="attack_epsilon", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = subs.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--component", choices=gc.COMPONENTS, default=None)
    p.add_argument("--kind", default=None)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--inject-fault", dest="inject_fault", action="store_true",
                   help=argparse.SUPPRESS)  # harness sanity hook
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, _collect_overrides(args))
        return args.func(args, cfg)
    except (PCRobustError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
