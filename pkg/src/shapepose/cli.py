"""Command-line entry point: ``shapepose <subcommand> ...``.

Any flag can also come from ``--config file.json`` (keys are flag names with
dashes or underscores); flags given on the command line win. Failures exit
with status 1 and one JSON line on standard error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .model import CONFIG_SCHEMA_VERSION


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def _dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if (out.is_dir() or not out.suffix) else out.with_name(out.name + ".manifest.json")


def write_manifest(args, extra: dict | None = None) -> dict:
    """Record the command, its effective flags and the tool version next to the output."""
    flags = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
             if k not in ("func", "config")}
    doc = {"command": args.command, "flags": flags, "tool_version": __version__,
           "config_schema_version": CONFIG_SCHEMA_VERSION, **(extra or {})}
    out = Path(args.out)
    if not out.suffix:
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    _dump(doc, _manifest_path(out))
    return doc


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> str:
    from .evalbench.bench import generate_dataset
    write_manifest(args, {"seeds": {"data": args.seed}})
    ds = generate_dataset(args.subjects, args.poses, args.seed, args.heldout)
    index = ds.write(args.out, binary=not args.ascii)
    return f"wrote {len(ds.mesh_ids)} meshes ({len(index.records)} training) to {args.out}"


def cmd_build_hierarchy(args) -> str:
    from .meshio import load_mesh
    from .multires import build_hierarchy, save_hierarchy
    write_manifest(args)
    template = load_mesh(args.template)
    h = build_hierarchy(template, args.levels, args.factor)
    save_hierarchy(h, args.out)
    return f"hierarchy sizes {h.sizes} -> {args.out}"


def _train_config(args):
    from .disentangle import TrainConfig
    doc = {}
    if args.manifest:
        with open(args.manifest) as fh:
            doc = json.load(fh)
        doc = doc.get("train", doc.get("config", {}).get("train", doc))
    for key in ("steps", "batch_size", "seed", "checkpoint_every", "log_every"):
        v = getattr(args, key)
        if v is not None:
            doc[key] = v
    if args.ablation is not None:
        doc["ablation"] = args.ablation
    if args.entangled:
        doc.setdefault("model", {})["entangled"] = True
    return TrainConfig.from_json(doc)


def cmd_train(args) -> str:
    from .disentangle import TrainingData, train
    from .meshio import DatasetIndex, dataset_hash
    from .multires import load_hierarchy
    cfg = _train_config(args)
    index = DatasetIndex.load(args.data)
    dhash = dataset_hash(index)
    extra = {"seeds": {"train": cfg.seed, "init": cfg.model.init_seed}, "dataset_hash": dhash,
             "ablation": cfg.ablation}
    write_manifest(args, extra)
    data = TrainingData.from_index(index)
    hierarchy = load_hierarchy(args.hierarchy) if args.hierarchy else None

    def report(r):
        _progress(f"step {r.step} L_C {r.L_C:.6f} L_S {r.L_S:.6f} total {r.total:.6f} lr {r.lr:.3e}")

    res = train(data, cfg, args.out, hierarchy=hierarchy, resume=args.resume,
                manifest={"dataset_hash": dhash, "data": str(args.data)}, progress=report)
    last = res.reports[-1] if res.reports else None
    tail = f", final total {last.total:.6f}" if last else ""
    return f"trained {cfg.steps} steps ({cfg.ablation}){tail}; checkpoint {res.checkpoint}"


def cmd_arap_deform(args) -> str:
    from .arap import arap_deform
    from .meshio import load_mesh, save_mesh
    write_manifest(args, {"seeds": {"anchors": args.seed}})
    source = load_mesh(args.source)
    target = load_mesh(args.target, expected_topology=source.topology_id)
    res = arap_deform(source, target, args.anchor_fraction, args.iterations, args.seed,
                      weighting=args.weighting, return_details=True)
    save_mesh(res.mesh, args.out)
    return f"energy {res.energies[0]:.6g} -> {res.energies[-1]:.6g}; wrote {args.out}"


def _load_model(path):
    from .disentangle import load_model
    return load_model(path)


def cmd_transfer(args) -> str:
    from .meshio import load_mesh, save_mesh
    from .model import decode, encode
    write_manifest(args)
    model = _load_model(args.ckpt)
    tid = model.template.topology_id
    shape_mesh = load_mesh(args.shape, expected_topology=tid)
    pose_mesh = load_mesh(args.pose, expected_topology=tid)
    beta, _ = encode(shape_mesh, model)
    _, theta = encode(pose_mesh, model)
    save_mesh(decode(beta, theta, model), args.out)
    return f"wrote {args.out}"


def _dataset(data_path):
    from .evalbench.bench import SyntheticDataset
    p = Path(data_path)
    return SyntheticDataset.read(p if p.is_dir() else p.parent)


def cmd_retrieve(args) -> str:
    from .evalbench.bench import retrieve
    write_manifest(args)
    model = _load_model(args.ckpt)
    ds = _dataset(args.data)
    q = ds.index_of(args.query)
    gallery = [i for i in ds.train_indices() if i != q]
    r = retrieve(model, q, gallery, args.code, ds, args.pca_dims)
    _dump({"query": r.query, "neighbor": r.neighbor, "code": args.code, "E_shape": r.E_shape,
           "E_pose": r.E_pose}, args.out)
    return f"{r.query} -> {r.neighbor} (E_shape {r.E_shape:.4f}, E_pose {r.E_pose:.4f})"


def cmd_interpolate(args) -> str:
    from .evalbench.bench import interpolate
    from .meshio import load_mesh, save_mesh
    write_manifest(args)
    model = _load_model(args.ckpt)
    tid = model.template.topology_id
    src = load_mesh(args.source, expected_topology=tid)
    tgt = load_mesh(args.target, expected_topology=tid)
    seq = interpolate(model, src, tgt, args.component, args.steps)
    out = Path(args.out)
    for k, m in enumerate(seq):
        save_mesh(m, out / f"step_{k:03d}.ply")
    return f"wrote {len(seq)} meshes to {out}"


def cmd_bench(args) -> str:
    from .evalbench.bench import benchmark
    write_manifest(args, {"seeds": {"bench": args.seed}})
    model = _load_model(args.ckpt)
    ds = _dataset(args.data)
    pca = {k: v for k, v in (("shape", args.pca_shape), ("pose", args.pca_pose)) if v}
    rep = benchmark(model, ds, args.pairs, args.interpolations, args.interp_steps, args.seed, pca or None)
    out = Path(args.out)
    path = out / "report.json" if not out.suffix else out
    _dump(rep, path)
    rt = rep["retrieval"]
    return (f"pose transfer mean {rep['pose_transfer']['mean']:.5f}; "
            f"retrieval E_shape beta {rt['shape']['E_shape']:.4f} theta {rt['pose']['E_shape']:.4f}; "
            f"E_pose beta {rt['shape']['E_pose']:.4f} theta {rt['pose']['E_pose']:.4f}; report {path}")


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="shapepose", description="Unsupervised shape/pose disentanglement for registered meshes.")
    p.add_argument("--version", action="version",
                   version=f"shapepose {__version__} (config schema {CONFIG_SCHEMA_VERSION})")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON file supplying any of the flags")
        sp.set_defaults(func=func)
        return sp

    sp = command("gen-data", cmd_gen_data, "render a synthetic capsule-creature dataset")
    sp.add_argument("--subjects", type=int, default=20)
    sp.add_argument("--poses", type=int, default=30)
    sp.add_argument("--heldout", type=int, default=5, help="extra held-out poses per subject")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--ascii", action="store_true")
    sp.add_argument("--out", type=Path, required=True)

    sp = command("build-hierarchy", cmd_build_hierarchy, "decimate a template into a mesh hierarchy")
    sp.add_argument("--template", type=Path, required=True)
    sp.add_argument("--levels", type=int, default=4)
    sp.add_argument("--factor", type=float, default=4.0)
    sp.add_argument("--out", type=Path, required=True)

    sp = command("train", cmd_train, "train the disentangling autoencoder")
    sp.add_argument("--data", type=Path, required=True, help="dataset index.json")
    sp.add_argument("--manifest", type=Path, help="training configuration JSON")
    sp.add_argument("--ablation", choices=["full", "no-arap", "no-self", "no_arap", "no_self_consistency",
                                           "reconstruction"])
    sp.add_argument("--entangled", action="store_true", help="single-encoder baseline")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--checkpoint-every", type=int)
    sp.add_argument("--log-every", type=int)
    sp.add_argument("--hierarchy", type=Path, help="prebuilt hierarchy .npz")
    sp.add_argument("--resume", type=Path)
    sp.add_argument("--out", type=Path, required=True)

    sp = command("arap-deform", cmd_arap_deform, "deform a mesh towards a target with ARAP")
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--target", type=Path, required=True)
    sp.add_argument("--anchor-fraction", type=float, default=0.05)
    sp.add_argument("--iterations", type=int, default=1)
    sp.add_argument("--weighting", choices=["uniform", "cotangent"], default="uniform")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)

    sp = command("transfer", cmd_transfer, "decode one mesh's shape with another mesh's pose")
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--shape", type=Path, required=True)
    sp.add_argument("--pose", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = command("retrieve", cmd_retrieve, "nearest training mesh in shape or pose code")
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True, help="synthetic dataset directory or its index.json")
    sp.add_argument("--query", required=True, help="mesh id")
    sp.add_argument("--code", choices=["shape", "pose"], default="shape")
    sp.add_argument("--pca-dims", type=int)
    sp.add_argument("--out", type=Path, required=True)

    sp = command("interpolate", cmd_interpolate, "interpolate one code between two meshes")
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--source", type=Path, required=True)
    sp.add_argument("--target", type=Path, required=True)
    sp.add_argument("--component", choices=["shape", "pose"], default="pose")
    sp.add_argument("--steps", type=int, default=6)
    sp.add_argument("--out", type=Path, required=True)

    sp = command("bench", cmd_bench, "pose transfer, retrieval and interpolation report")
    sp.add_argument("--ckpt", type=Path, required=True)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--pairs", type=int, default=100)
    sp.add_argument("--interpolations", type=int, default=20)
    sp.add_argument("--interp-steps", type=int, default=6)
    sp.add_argument("--pca-shape", type=int)
    sp.add_argument("--pca-pose", type=int)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", type=Path, required=True)
    return p


def _config_path(argv: list) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    cfg_path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    choices = parser._subparsers._group_actions[0].choices
    if cfg_path and command in choices:
        with open(cfg_path) as fh:
            doc = json.load(fh)
        sub = choices[command]
        actions = {a.dest: a for a in sub._actions}
        defaults = {}
        for k, v in doc.items():
            key = k.replace("-", "_")
            if key not in actions or key in ("config", "help"):
                raise CliError(f"unknown config key {k!r} for {command}")
            a = actions[key]
            defaults[key] = a.type(v) if a.type is not None and v is not None else v
            # required flags may come from the config file
            a.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    command = None
    try:
        args = parse_args(argv)
        command = args.command
        summary = args.func(args)
        print(summary)
        return 0
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        rec = {"error": type(exc).__name__, "message": str(exc), "command": command}
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
