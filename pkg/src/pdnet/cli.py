"""Command-line front end: ``pdnet <verb> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import config as cfgtext
from . import data, geometry, gradsuite
from .cloudio import CloudFormatError, read_cloud, write_cloud, write_ply
from .data import DataError
from .geometry import PointCloud
from .network import ABLATIONS, VARIANTS, ConfigError, NetworkConfig, apply_ablation
from .numerics import CheckpointError, inject_backward_fault, load_checkpoint
from .train import TrainConfig, Trainer, evaluate, make_batch, predict


class UsageError(Exception):
    pass


def _positive(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _seed(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer seed, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file (dotted keys)")
    common.add_argument("--seed", type=_seed, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable); wins over --config")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--variant", choices=sorted(VARIANTS))
    model.add_argument("--task", choices=("cls", "seg"))
    model.add_argument("--ablation", choices=ABLATIONS)

    ap = argparse.ArgumentParser(prog="pdnet", description="Point deformable network toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--task", choices=("cls", "seg"), default="cls")
    g.add_argument("--classes", default="sphere,cube,torus,cylinder")
    g.add_argument("--per-class", type=_positive, default=16)
    g.add_argument("--val-per-class", type=int, default=0)
    g.add_argument("--scenes", type=_positive, default=64)
    g.add_argument("--val-scenes", type=int, default=16)
    g.add_argument("--points", type=_positive, default=512)
    g.add_argument("--sigma", type=float, default=None)

    t = sub.add_parser("train", parents=[common, model], help="train a model on a generated dataset")
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--epochs", type=_positive)
    t.add_argument("--batch-size", type=_positive)

    e = sub.add_parser("eval", parents=[common], help="score a trained run; prints JSON lines")
    e.add_argument("--run", required=True, help="training output directory")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", choices=("best", "final"), default="final")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every block")
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--blocks", help="comma-separated subset of " + ",".join(
        list(gradsuite.CASES) + list(gradsuite.NETWORK_CASES)))
    gc.add_argument("--inject-fault", default=None, help=argparse.SUPPRESS)

    x = sub.add_parser("export-ply", parents=[common], help="write PLY files (optionally with predictions)")
    x.add_argument("--data", required=True)
    x.add_argument("--run", help="training directory; if given, labels are predictions")
    x.add_argument("--split", default="train")
    x.add_argument("--count", type=_positive, default=4)

    n = sub.add_parser("normals", parents=[common], help="estimate normals for a PDCLOUD1 file")
    n.add_argument("--input", required=True)
    n.add_argument("--k", type=_positive, default=16)

    b = sub.add_parser("bench", parents=[common], help="time geometry kernels and block forwards")
    b.add_argument("--iters", type=_positive, default=30)
    b.add_argument("--warmup", type=int, default=3)
    b.add_argument("--sizes", default="1000,4000,16000")
    return ap


# -- helpers -------------------------------------------------------------

def _settings(args) -> dict[str, str]:
    layers = []
    if args.config:
        layers.append(cfgtext.load_config(args.config))
    layers.append(cfgtext.parse_overrides(args.set))
    return cfgtext.merge(*layers)


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_manifest(out: Path, command: str, args, effective: dict) -> None:
    lines = {"run.command": command, "run.seed": args.seed, "run.config": args.config or "",
             "run.argv": " ".join(sys.argv[1:]) if sys.argv else ""}
    lines.update({f"run.override.{i}": s for i, s in enumerate(args.set)})
    lines.update(effective)
    (out / "run_manifest.txt").write_text(cfgtext.dump(lines), encoding="utf-8")


def _seed_or(args, default: int = 0) -> int:
    return default if args.seed is None else args.seed


def _network_config(args, settings: dict, manifest: dict) -> NetworkConfig:
    """Variant defaults, then ``network.*`` settings, then CLI flags; dataset fills the rest."""
    net = cfgtext.section(settings, "network")
    variant = args.variant or net.pop("variant", "pdnet-s")
    merged = asdict(NetworkConfig.from_variant(variant))
    merged.update(net)
    merged["variant"] = variant
    if args.task:
        merged["task"] = args.task
    elif "task" not in net:
        merged["task"] = manifest.get("gen.task", "cls")
    if "num_classes" not in net:
        merged["num_classes"] = int(manifest.get("gen.num_classes", merged["num_classes"]))
    if "n_points" not in net:
        merged["n_points"] = int(manifest.get("gen.points", merged["n_points"]))
    cfg = NetworkConfig.from_mapping(merged)
    return apply_ablation(cfg, args.ablation or settings.get("run.ablation")).validate()


def _dataset_items(split_items, task):
    clouds = [c for c, _ in split_items]
    labels = [lab for _, lab in split_items] if task == "cls" else None
    return clouds, labels


def _load_run(run: Path):
    settings = cfgtext.load_config(run / "config.txt")
    net = NetworkConfig.from_mapping(cfgtext.section(settings, "network")).validate()
    tcfg = TrainConfig.from_mapping(cfgtext.section(settings, "train"))
    return net, tcfg


def _restore(run: Path, which: str):
    from .network import build

    net, tcfg = _load_run(run)
    model = build(net, tcfg.seed)
    state = load_checkpoint(run / f"{which}.ckpt")
    model.load_state_dict({k: v.astype(np.float64) for k, v in state.items()})
    return net, model


def _check_compatible(net: NetworkConfig, manifest: dict) -> None:
    if int(manifest["gen.points"]) != net.n_points:
        raise ConfigError(f"dataset has {manifest['gen.points']} points per cloud, "
                          f"model expects {net.n_points}")
    if manifest["gen.task"] != net.task:
        raise ConfigError(f"dataset task {manifest['gen.task']!r} does not match model task {net.task!r}")
    if int(manifest["gen.num_classes"]) > net.num_classes:
        raise ConfigError("dataset has more classes than the model head")


# -- verbs ---------------------------------------------------------------

def cmd_gen_data(args) -> int:
    settings = _settings(args)
    seed = _seed_or(args, int(settings.get("gen.seed", 0)))
    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    if args.val_per_class < 0 or args.val_scenes < 0:
        raise UsageError("validation counts must be non-negative")
    out = _out_dir(args, "data")
    effective = {"gen.task": args.task, "gen.seed": seed, "gen.points": args.points,
                 "gen.classes": ",".join(classes), "gen.per_class": args.per_class,
                 "gen.scenes": args.scenes}
    _write_run_manifest(out, "gen-data", args, effective)
    splits, header = data.generate_dataset(args.task, seed, args.points, classes, args.per_class,
                                           args.val_per_class, args.scenes, args.val_scenes, args.sigma)
    data.save_dataset(out, splits, header)
    total = sum(len(v) for v in splits.values())
    print(f"wrote {total} samples to {out}")
    return 0


def cmd_train(args) -> int:
    settings = _settings(args)
    manifest, splits = data.load_dataset(args.data)
    net = _network_config(args, settings, manifest)
    _check_compatible(net, manifest)
    train_settings = cfgtext.section(settings, "train")
    if args.epochs:
        train_settings["epochs"] = str(args.epochs)
    if args.batch_size:
        train_settings["batch_size"] = str(args.batch_size)
    if args.seed is not None:
        train_settings["seed"] = str(args.seed)
    tcfg = TrainConfig.from_mapping(train_settings).validate()
    out = _out_dir(args, "runs/latest")
    effective = cfgtext.parse_config_text(net.to_manifest() + tcfg.to_manifest())
    effective["data.dir"] = str(Path(args.data).resolve())
    _write_run_manifest(out, "train", args, effective)
    tr_clouds, tr_labels = _dataset_items(splits["train"], net.task)
    va = splits.get("val")
    va_clouds, va_labels = _dataset_items(va, net.task) if va else (None, None)
    trainer = Trainer(net, tcfg, out, log=lambda m: print(m, flush=True))
    trainer.fit(tr_clouds, tr_labels, va_clouds, va_labels)
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    net, model = _restore(run, args.checkpoint)
    manifest, splits = data.load_dataset(args.data)
    _check_compatible(net, manifest)
    for split, items in splits.items():
        clouds, labels = _dataset_items(items, net.task)
        rep = evaluate(model, clouds, labels)
        print(json.dumps({"split": split, "samples": len(clouds), **rep}))
    return 0


def cmd_gradcheck(args) -> int:
    names = [s.strip() for s in args.blocks.split(",")] if args.blocks else None
    seed = _seed_or(args)
    if args.inject_fault:
        with inject_backward_fault(args.inject_fault):
            reports = gradsuite.run_suite(args.tolerance, seed, names)
    else:
        reports = gradsuite.run_suite(args.tolerance, seed, names)
    print(gradsuite.format_table(reports))
    flow = gradsuite.ogn_gradient_flow(seed)
    print(f"offset-network gradient through interpolation: max|grad W2| = {flow['fc2.weight']:.3e}")
    ok = all(r.passed for r in reports.values()) and flow["fc2.weight"] > 0
    return 0 if ok else 1


def cmd_export_ply(args) -> int:
    manifest, splits = data.load_dataset(args.data)
    if args.split not in splits:
        raise UsageError(f"split {args.split!r} not in dataset (have {sorted(splits)})")
    items = splits[args.split][: args.count]
    out = _out_dir(args, "ply")
    model = net = None
    if args.run:
        net, model = _restore(Path(args.run), "final")
        _check_compatible(net, manifest)
    for i, (cloud, label) in enumerate(items):
        labels = cloud.labels
        if model is not None:
            pred = predict(model, make_batch([cloud], net))[0]
            labels = pred if net.task == "seg" else np.full(len(cloud), int(pred))
        elif labels is None:
            labels = np.full(len(cloud), label)
        path = out / f"{args.split}_{i:05d}.ply"
        write_ply(path, cloud.positions, cloud.normals, labels)
        print(path)
    return 0


def cmd_normals(args) -> int:
    cloud = read_cloud(args.input)
    if args.k > len(cloud):
        raise UsageError("k exceeds the number of points")
    normals = geometry.estimate_normals(cloud.positions, args.k)
    out = Path(args.out) if args.out else Path(args.input).with_suffix(".normals.pdc")
    write_cloud(PointCloud(cloud.positions, cloud.features, normals, cloud.labels), out)
    print(out)
    return 0


def _time(fn, iters: int, warmup: int) -> dict[str, float]:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t)
    return {"median_s": statistics.median(samples), "iters": iters}


def run_bench(iters: int = 30, warmup: int = 3, sizes=(1000, 4000, 16000), seed: int = 0,
              fps_count: int = 256) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        pts = rng.uniform(-1, 1, (n, 3))
        rows.append({"kernel": "fps", "n": n, "count": fps_count,
                     **_time(lambda: geometry.farthest_point_sample(pts, fps_count), iters, warmup)})
    for n in sizes[:2]:
        pts = rng.uniform(-1, 1, (n, 3))
        q = pts[:512]
        brute = geometry.knn(q, pts, 16, "brute").indices
        tree = geometry.knn(q, pts, 16, "tree").indices
        for method in ("brute", "tree"):
            rows.append({"kernel": f"knn-{method}", "n": n, "k": 16, "identical": bool(np.array_equal(brute, tree)),
                         **_time(lambda: geometry.knn(q, pts, 16, method), iters, warmup)})
    inst = gradsuite.tiny_instance(seed, b=4, n=512, c=32, k=16)
    from .blocks import PointMetaBlock
    from .numerics import no_grad, reset_parameters
    from .pdam import PDAM

    for name, block, call in (
        ("plam", PointMetaBlock(32, use_normals=True),
         lambda m: m(inst.positions, inst.normals, inst.features, inst.group)),
        ("pdam", PDAM(32, 512, references=32), lambda m: m(inst.positions, inst.normals, inst.features)),
    ):
        reset_parameters(block, seed)

        def fwd(m=block, c=call):
            with no_grad():
                c(m)

        rows.append({"kernel": f"{name}-forward", "n": 512, "batch": 4, **_time(fwd, iters, warmup)})
    return rows


def cmd_bench(args) -> int:
    try:
        sizes = tuple(int(s) for s in args.sizes.split(","))
    except ValueError:
        raise UsageError("--sizes must be comma-separated integers") from None
    if args.warmup < 0:
        raise UsageError("--warmup must be non-negative")
    rows = run_bench(args.iters, args.warmup, sizes, _seed_or(args))
    for row in rows:
        print(json.dumps(row))
    if args.out:
        out = _out_dir(args, "bench")
        (out / "bench.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    return 0 if all(r.get("identical", True) for r in rows) else 1


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "export-ply": cmd_export_ply,
    "normals": cmd_normals,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, cfgtext.ConfigSyntaxError, DataError, KeyError) as exc:
        print(f"pdnet {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, CloudFormatError, CheckpointError) as exc:
        print(f"pdnet {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure inside the library
        print(f"pdnet {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
