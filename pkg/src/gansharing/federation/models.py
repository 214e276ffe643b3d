"""Conversions between trained models and ModelPackage bytes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict

from ..classifier import ClassifierHyper, ModelSpec, TrainedClassifier
from ..gan import GanConfig, TrainedGan
from .package import ModelPackage, PackageError, default_created_at, package_read, package_write


def _dtype_of(tensors: dict) -> str:
    return next(iter(tensors.values())).dtype.name if tensors else "float32"


def _ckpt_prefix(epoch: int) -> str:
    return f"epoch{epoch:06d}/"


def generator_to_bytes(gan: TrainedGan, created_at: str | None = None) -> bytes:
    tensors = {}
    for epoch in gan.checkpoint_list:
        for name, arr in gan.checkpoints[epoch].items():
            tensors[_ckpt_prefix(epoch) + name] = arr
    manifest = {
        "model_id": gan.gan_id, "centre_id": gan.centre_id, "variant": gan.config.variant,
        "architecture": [s if isinstance(s, dict) else s.to_json() for s in gan.generator_specs],
        "config_digest": gan.config.digest(), "epochs": gan.config.epochs,
        "checkpoint_epochs": gan.checkpoint_list, "created_at": created_at or default_created_at(),
        "scope": gan.scope, "image_side": gan.config.image_side, "gan_config": gan.config.to_json(),
        "diversity": {str(k): v for k, v in sorted(gan.diversity.items())},
        "history": gan.history, "counters": gan.counters,
    }
    return package_write("generator", tensors, manifest)


def generator_from_package(pkg: ModelPackage) -> TrainedGan:
    if pkg.kind != "generator":
        raise PackageError(f"expected a generator package, got {pkg.kind}")
    m = pkg.manifest
    checkpoints = {}
    for epoch in m["checkpoint_epochs"]:
        prefix = _ckpt_prefix(epoch)
        checkpoints[epoch] = {k[len(prefix):]: v for k, v in pkg.tensors.items() if k.startswith(prefix)}
    return TrainedGan(m["model_id"], m["centre_id"], GanConfig(**m["gan_config"]), m["architecture"],
                      checkpoints, history=m.get("history", {}), counters=m.get("counters", {}),
                      diversity={int(k): v for k, v in m.get("diversity", {}).items()},
                      scope=m.get("scope", "all_lesions"), dtype=_dtype_of(pkg.tensors))


def load_generator(data: bytes) -> TrainedGan:
    return generator_from_package(package_read(data))


def classifier_to_bytes(model: TrainedClassifier, centre_id: str = "", created_at: str | None = None) -> bytes:
    hyper = asdict(model.hyper)
    manifest = {
        "model_id": model.model_id or f"{centre_id or 'centre'}-{model.spec.kind}",
        "centre_id": centre_id, "variant": model.spec.kind,
        "architecture": [s.to_json() for s in model.spec.layer_specs()],
        "config_digest": hashlib.sha256(json.dumps(hyper, sort_keys=True).encode()).hexdigest(),
        "epochs": model.hyper.epochs, "checkpoint_epochs": [model.best_epoch],
        "created_at": created_at or default_created_at(), "input_side": model.spec.input_side,
        "hyper": hyper, "history": model.history,
    }
    return package_write("classifier", model.state, manifest)


def classifier_from_package(pkg: ModelPackage) -> TrainedClassifier:
    if pkg.kind != "classifier":
        raise PackageError(f"expected a classifier package, got {pkg.kind}")
    m = pkg.manifest
    return TrainedClassifier(ModelSpec(m["variant"], m["input_side"]), dict(pkg.tensors),
                             m["checkpoint_epochs"][0], m["history"], ClassifierHyper(**m["hyper"]),
                             m["model_id"], _dtype_of(pkg.tensors))
