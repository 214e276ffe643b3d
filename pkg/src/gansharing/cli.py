"""``gansharing`` command line: one binary, one subcommand per pipeline stage.

Every run echoes its fully resolved configuration (including an ``argv``
that replays it via ``--from-config``) next to its outputs. Failures print a
single ``error category=... message=...`` line; usage errors exit 2, runtime
errors exit 1.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from pathlib import Path

import numpy as np

OUT_ENV = "GANSHARING_OUT"
DEFAULT_OUT = "gansharing-out"
SUBCOMMANDS = ("gen-phantom", "extract-patches", "train-gan", "sample", "package", "serve", "pull",
               "train-classifier", "evaluate", "run-experiment", "run-grid")

SCOPE_ALIASES = {"all": "all_lesions", "mass": "masses_only", "all_lesions": "all_lesions",
                 "masses_only": "masses_only"}

log = logging.getLogger("gansharing.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error category=usage message={message}", file=sys.stderr)
        raise SystemExit(2)


def _scope(text: str) -> str:
    return SCOPE_ALIASES.get(text, text)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
    g.add_argument("--geometry-factor", type=float, default=None,
                   help="scale of the full patch geometry; 0.5 gives 64 px patches with a 30 px margin")
    g.add_argument("--precision", choices=("f32", "f64"), default="f32", help="training float precision")
    g.add_argument("--out", default=None, help=f"output path (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    g.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="gansharing", description="Share GAN generators between centres and measure "
                     "their value as classifier augmentation on phantom mammography patches.")
    parser.add_argument("--from-config", metavar="FILE", help="replay a run from its echoed config.json")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("gen-phantom", parents=[common], help="generate a synthetic centre corpus")
    p.add_argument("--profile", help="CentreProfile JSON (default: a 20-patient centre 'A')")
    p.add_argument("--centre-id", default=None, help="override the profile's centre id")
    p.add_argument("--patients", type=int, default=None, help="override the profile's patient count")

    p = sub.add_parser("extract-patches", parents=[common], help="cut healthy and lesion patches from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--scope", type=_scope, choices=sorted(set(SCOPE_ALIASES.values())), default="all_lesions",
                   help="all (all_lesions) or mass (masses_only)")
    p.add_argument("--healthy-per-image", type=int, default=3)
    p.add_argument("--lesions-only", action="store_true", help="skip healthy patches (GAN training input)")
    p.add_argument("--centre-id", default="")

    p = sub.add_parser("train-gan", parents=[common], help="train a DCGAN or WGAN-GP and write a package")
    p.add_argument("--variant", choices=("dcgan", "wgan-gp"), required=True)
    p.add_argument("--patches", required=True)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--checkpoint-start", type=int, default=500)
    p.add_argument("--checkpoint-every", type=int, default=50)
    p.add_argument("--base-channels", type=int, default=32)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--centre-id", default="")
    p.add_argument("--model-id", default=None)
    p.add_argument("--scope", type=_scope, choices=sorted(set(SCOPE_ALIASES.values())), default="all_lesions",
                   help="all (all_lesions) or mass (masses_only)")

    p = sub.add_parser("sample", parents=[common], help="draw synthetic patches from a generator package")
    p.add_argument("--pkg", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--ensemble", action="store_true", help="spread samples over all stored checkpoints")

    p = sub.add_parser("package", parents=[common], help="verify a package and print its manifest")
    p.add_argument("pkg")
    p.add_argument("--tensors", action="store_true", help="also list tensor names and shapes")

    p = sub.add_parser("serve", parents=[common], help="serve a centre's packages over TCP")
    p.add_argument("--centre", required=True, help="directory holding *.mgpk files (or a packages/ subdir)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)

    p = sub.add_parser("pull", parents=[common], help="fetch and verify a package from a centre")
    p.add_argument("--addr", required=True, help="HOST:PORT")
    p.add_argument("--model", help="model id (omit to list)")

    p = sub.add_parser("train-classifier", parents=[common], help="train the CNN or SwinMini classifier")
    p.add_argument("--model", choices=("cnn", "swinmini"), required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--plan", help="AugmentationPlan JSON: sources, synthetic_count, healthy_pool")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--input-side", type=int, default=None)

    p = sub.add_parser("evaluate", parents=[common], help="score a classifier package on a patch set")
    p.add_argument("--model", required=True)
    p.add_argument("--patches", required=True)

    p = sub.add_parser("run-experiment", parents=[common], help="run one experiment cell")
    p.add_argument("--spec", required=True, help="ExperimentSpec JSON")
    p.add_argument("--benchmark", default="desk", help="bundled benchmark name or config JSON")
    p.add_argument("--workdir", default=None, help="cache for corpora and packages (default OUT/work)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("run-grid", parents=[common], help="run the full augmentation grid and render the report")
    p.add_argument("--specs", default=None, help="directory of ExperimentSpec JSON files (default: full grid)")
    p.add_argument("--benchmark", default="desk", help="bundled benchmark name or config JSON")
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="override the benchmark's seeds")
    p.add_argument("--workdir", default=None)
    p.add_argument("--no-figures", action="store_true")
    return parser


# -- helpers ------------------------------------------------------------------------------
def _out(args, default_name: str) -> Path:
    root = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
    return Path(root) if args.out else Path(root) / default_name


def _dtype(args):
    return np.float64 if args.precision == "f64" else np.float32


def _echo(args, argv: list, where: Path, extra: dict | None = None) -> None:
    """Write the resolved config; directories get config.json, files get <file>.config.json."""
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("from_config",)}
    doc = {"command": args.command, "resolved": cfg, "argv": argv}
    if extra:
        doc.update(extra)
    target = where / "config.json" if where.is_dir() else Path(f"{where}.config.json")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n", encoding="utf-8")


def _write_manifest(out_dir: Path) -> None:
    files = {}
    for path in sorted(out_dir.rglob("*")):
        if path.is_file() and path.name != "manifest.json":
            files[path.relative_to(out_dir).as_posix()] = hashlib.sha256(path.read_bytes()).hexdigest()
    (out_dir / "manifest.json").write_text(json.dumps({"files": files}, indent=1, sort_keys=True) + "\n",
                                           encoding="utf-8")


def _geometry(args, default: float = 0.5):
    from .patchlab import Geometry
    return Geometry(args.geometry_factor if args.geometry_factor is not None else default)


# -- commands ----------------------------------------------------------------------------------
def cmd_gen_phantom(args, argv):
    from . import phantom

    if args.profile:
        profile = phantom.CentreProfile.from_json(json.loads(Path(args.profile).read_text(encoding="utf-8")))
    else:
        profile = phantom.CentreProfile("A")
    if args.centre_id:
        profile.centre_id = args.centre_id
    if args.patients is not None:
        profile.patient_count = args.patients
    out = _out(args, "corpus")
    corpus = phantom.generate_corpus(profile, args.seed)
    phantom.write_corpus(corpus, out, profile)
    _echo(args, argv, out)
    _write_manifest(out)
    lesions = sum(len(a.lesions) for _, a in corpus)
    print(f"images={len(corpus)} lesions={lesions} out={out}")


def cmd_extract(args, argv):
    from . import phantom
    from .patchlab import count_by_label, extract_dataset, write_patches

    corpus = phantom.read_corpus(args.corpus)
    records = extract_dataset(corpus, args.scope, args.seed, _geometry(args),
                              healthy_per_image=args.healthy_per_image, centre_id=args.centre_id,
                              include_healthy=not args.lesions_only)
    out = _out(args, "patches")
    write_patches(records, out)
    _echo(args, argv, out)
    _write_manifest(out)
    counts = count_by_label(records)
    print(" ".join(f"{k}={v}" for k, v in counts.items()) + f" out={out}")


def cmd_train_gan(args, argv):
    from . import plotting
    from .federation.models import generator_to_bytes
    from .federation.package import write_file
    from .gan import GanConfig, train_gan
    from .patchlab import NON_HEALTHY, read_patches

    patches = [p for p in read_patches(args.patches) if p.label == NON_HEALTHY]
    side = patches[0].pixels.shape[0] if patches else _geometry(args).input_side
    cfg = GanConfig(variant=args.variant.replace("-", "_"), image_side=side, epochs=args.epochs,
                    batch_size=args.batch_size, base_channels=args.base_channels,
                    checkpoint_start=args.checkpoint_start, checkpoint_every=args.checkpoint_every)

    def progress(epoch, stats):
        if epoch == 1 or epoch % max(1, args.epochs // 10) == 0 or epoch == args.epochs:
            log.info("event=gan_epoch epoch=%d %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in stats.items()))

    gan = train_gan(cfg, patches, args.seed, centre_id=args.centre_id, scope=args.scope, gan_id=args.model_id,
                    progress=progress, dtype=_dtype(args))
    out = Path(args.out or Path(os.environ.get(OUT_ENV) or DEFAULT_OUT) / f"{gan.gan_id}.mgpk")
    out.parent.mkdir(parents=True, exist_ok=True)
    data = generator_to_bytes(gan)
    write_file(out, data)
    plotting.plot_loss_curves(gan.history, f"{out}.loss.png", gan.gan_id)
    _echo(args, argv, out, {"sha256": hashlib.sha256(data).hexdigest(), "checkpoints": gan.checkpoint_list})
    print(f"model_id={gan.gan_id} checkpoints={','.join(map(str, gan.checkpoint_list))} out={out}")


def cmd_sample(args, argv):
    from . import plotting
    from .federation.package import read_file
    from .federation.models import generator_from_package
    from .gan import sample_synthetic
    from .patchlab import write_patches

    gan = generator_from_package(read_file(args.pkg))
    records = sample_synthetic(gan, args.count, args.seed, ensemble=args.ensemble)
    out = _out(args, "synthetic")
    write_patches(records, out)
    plotting.plot_sample_grid(records[:64], out / "samples.png", title=gan.gan_id)
    _echo(args, argv, out)
    _write_manifest(out)
    print(f"count={len(records)} out={out}")


def cmd_package(args, argv):
    from .federation.package import read_file

    pkg = read_file(args.pkg)
    doc = {"kind": pkg.kind, "version": pkg.version, "manifest": {k: v for k, v in pkg.manifest.items()
                                                                  if k not in ("history",)}}
    if args.tensors:
        doc["tensors"] = {k: [str(v.dtype), list(v.shape)] for k, v in pkg.tensors.items()}
    print(json.dumps(doc, indent=1, sort_keys=True))


def cmd_serve(args, argv):
    from .federation.node import CentreNode
    from .federation.protocol import CentreServer

    root = Path(args.centre)
    pkg_dir = root / "packages" if (root / "packages").is_dir() else root
    node = CentreNode(root.name, package_dir=pkg_dir)
    srv = CentreServer(node, args.host, args.port)
    host, port = srv.address
    print(f"serving centre={node.centre_id} models={len(node.ids())} addr={host}:{port}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.close()


def cmd_pull(args, argv):
    from .federation.package import package_read, write_file
    from .federation.protocol import list_models, pull_bytes

    if not args.model:
        print(json.dumps(list_models(args.addr), indent=1, sort_keys=True))
        return
    data = pull_bytes(args.addr, args.model)
    pkg = package_read(data)
    out = Path(args.out or Path(os.environ.get(OUT_ENV) or DEFAULT_OUT) / f"{pkg.model_id}.mgpk")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_file(out, data)
    _echo(args, argv, out, {"sha256": hashlib.sha256(data).hexdigest()})
    print(f"model_id={pkg.model_id} bytes={len(data)} verified=yes out={out}")


def _load_plan(path, base_seed: int):
    from .classifier import AugmentationPlan, RealSource, SyntheticSource
    from .federation.models import generator_from_package
    from .federation.package import read_file
    from .patchlab import read_patches

    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    sources = []
    for src in doc.get("sources", []):
        if src["type"] == "generator":
            sources.append(SyntheticSource(generator_from_package(read_file(src["package"])),
                                           seed=int(src.get("seed", base_seed)),
                                           ensemble=bool(src.get("ensemble", True))))
        elif src["type"] == "real":
            sources.append(RealSource(read_patches(src["patches"]), name=src.get("name", "real")))
        else:
            raise UsageError(f"unknown plan source type {src['type']!r}")
    pool = read_patches(doc["healthy_pool"]) if doc.get("healthy_pool") else []
    return AugmentationPlan(sources, int(doc.get("synthetic_count", 1200))), pool


def cmd_train_classifier(args, argv):
    from . import plotting  # noqa: F401  (keeps the Agg backend selection in one place)
    from .classifier import ClassifierHyper, ModelSpec, assemble_training_set, train_classifier
    from .federation.models import classifier_to_bytes
    from .federation.package import write_file
    from .patchlab import count_by_label, read_patches

    train, val = read_patches(args.train), read_patches(args.val)
    if args.plan:
        plan, pool = _load_plan(args.plan, args.seed)
        train = assemble_training_set(train, plan, pool, np.random.default_rng([args.seed, 0xA55]))
    side = args.input_side or train[0].pixels.shape[0]
    spec = ModelSpec(args.model, side)
    hyper = ClassifierHyper(epochs=args.epochs, batch_size=args.batch_size)
    model = train_classifier(spec, train, val, hyper, args.seed,
                             progress=lambda e, s: log.info("event=classifier_epoch epoch=%d val_auprc=%.4f", e, s),
                             dtype=_dtype(args))
    out = Path(args.out or Path(os.environ.get(OUT_ENV) or DEFAULT_OUT) / f"{args.model}.mgpk")
    out.parent.mkdir(parents=True, exist_ok=True)
    data = classifier_to_bytes(model)
    write_file(out, data)
    _echo(args, argv, out, {"sha256": hashlib.sha256(data).hexdigest(), "train_counts": count_by_label(train)})
    print(f"best_epoch={model.best_epoch} best_val_auprc={max(model.history['val_auprc']):.4f} out={out}")


def cmd_evaluate(args, argv):
    from .classifier import evaluate
    from .federation.models import classifier_from_package
    from .federation.package import read_file
    from .metrics import dumps
    from .patchlab import read_patches

    model = classifier_from_package(read_file(args.model))
    res = evaluate(model, read_patches(args.patches))
    text = dumps(res.to_json())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        _echo(args, argv, Path(args.out))
    print(text)


def _benchmark(args):
    from .federation.experiment import load_config

    cfg = load_config(args.benchmark)
    if args.geometry_factor is not None:
        cfg.geometry_factor = args.geometry_factor
    return cfg


def cmd_run_experiment(args, argv):
    from .federation.experiment import ExperimentSpec, Workspace, run_grid

    spec = ExperimentSpec.from_json(json.loads(Path(args.spec).read_text(encoding="utf-8")))
    cfg = _benchmark(args)
    out = _out(args, "experiment")
    ws = Workspace(cfg, args.workdir or out / "work")
    ws.prepare()
    doc = run_grid([spec], ws, out, figures=not args.no_figures)
    _echo(args, argv, out)
    print((out / "tables.txt").read_text(encoding="utf-8"), end="")
    print(f"cells={len(doc['cells'])} out={out}")


def cmd_run_grid(args, argv):
    from .federation.experiment import ExperimentSpec, Workspace, grid_specs, run_grid

    cfg = _benchmark(args)
    if args.seeds:
        cfg.seeds = list(args.seeds)
    if args.specs:
        files = sorted(Path(args.specs).glob("*.json"))
        if not files:
            raise UsageError(f"no *.json specs in {args.specs}")
        specs = [ExperimentSpec.from_json(json.loads(f.read_text(encoding="utf-8"))) for f in files]
    else:
        specs = grid_specs(seeds=cfg.seeds)
    out = _out(args, "grid")
    ws = Workspace(cfg, args.workdir or out / "work")
    ws.prepare()

    def progress(spec, seed, res):
        log.info("event=cell_done cell=%s seed=%d f1=%.4f", spec.cell_id, seed, res.f1)

    doc = run_grid(specs, ws, out, figures=not args.no_figures, progress=progress)
    _echo(args, argv, out)
    print((out / "tables.txt").read_text(encoding="utf-8"), end="")
    print(f"cells={len(doc['cells'])} out={out}")


COMMANDS = {
    "gen-phantom": cmd_gen_phantom, "extract-patches": cmd_extract, "train-gan": cmd_train_gan,
    "sample": cmd_sample, "package": cmd_package, "serve": cmd_serve, "pull": cmd_pull,
    "train-classifier": cmd_train_classifier, "evaluate": cmd_evaluate,
    "run-experiment": cmd_run_experiment, "run-grid": cmd_run_grid,
}


def _category(exc: BaseException) -> str:
    return re.sub(r"(?<!^)(?=[A-Z])", "_", type(exc).__name__).lower()


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        print("error category=usage message=a subcommand is required", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
        if args.from_config:
            argv = json.loads(Path(args.from_config).read_text(encoding="utf-8"))["argv"]
            args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError, ValueError, KeyError) as exc:
        print(f"error category=usage message={exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, args.log_level), stream=sys.stderr,
                        format="level=%(levelname)s logger=%(name)s %(message)s")
    try:
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"error category=usage message={exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("error category=interrupted message=interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports every failure as one line
        msg = " ".join(str(exc).split())
        print(f"error category={_category(exc)} message={msg}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
