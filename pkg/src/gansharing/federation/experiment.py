"""Experiment grid: centres, generator exchange, classifier cells and aggregation.

Centre A (the target) keeps its own data. Centres B and C train generators on
their private corpora and publish packages; A pulls them over the protocol and
only ever handles packages, never B/C image files. The one deliberate
exception is the ``real_external`` arm, which ships B's real lesion patches
out-of-band as an upper bound and is flagged as such in every report.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .. import audit, phantom
from ..classifier import (AugmentationPlan, ClassifierHyper, ModelSpec, RealSource, SplitSpec, SyntheticSource,
                          assemble_training_set, evaluate, split_corpus, train_classifier)
from ..gan import GanConfig, train_gan
from ..metrics import EvalResult, aggregate, dumps
from ..patchlab import HEALTHY, NON_HEALTHY, SCOPES, Geometry, count_by_label, extract_dataset
from .models import generator_from_package, generator_to_bytes
from .node import PACKAGE_SUFFIX, CentreNode
from .package import read_file
from .protocol import CentreServer, pull

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "bcdr_wgangp", "bcdr_dcgan", "optimam_dcgan", "both_a", "both_b", "real_external")
FRACTIONS = (1.0, 0.5)
CLASSIFIERS = ("cnn", "swinmini")

# augmentation -> sources as (centre role, generator variant); "real" marks real external patches
DEFAULT_SOURCES = {
    "none": [],
    "bcdr_wgangp": [["B", "wgan_gp"]],
    "bcdr_dcgan": [["B", "dcgan"]],
    "optimam_dcgan": [["C", "dcgan"]],
    "both_a": [["B", "wgan_gp"], ["C", "dcgan"]],
    "both_b": [["B", "dcgan"], ["C", "dcgan"]],
    "real_external": [["B", "real"]],
}


class ExperimentError(RuntimeError):
    pass


@dataclass
class ExperimentSpec:
    scope: str = "all_lesions"
    data_fraction: float = 1.0
    augmentation: str = "none"
    classifier: str = "cnn"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    synthetic_count: int | None = None

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"scope must be one of {SCOPES}")
        if self.augmentation not in AUGMENTATIONS:
            raise ValueError(f"augmentation must be one of {AUGMENTATIONS}")
        if self.classifier not in CLASSIFIERS:
            raise ValueError(f"classifier must be one of {CLASSIFIERS}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must be in (0, 1]")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        self.seeds = [int(s) for s in self.seeds]

    @property
    def cell_id(self) -> str:
        return f"{self.classifier}/{self.scope}/{round(self.data_fraction * 100)}/{self.augmentation}"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentSpec":
        return cls(**obj)


def grid_specs(seeds=(0, 1, 2), classifiers=CLASSIFIERS, scopes=SCOPES, fractions=FRACTIONS,
               augmentations=AUGMENTATIONS, synthetic_count=None) -> list:
    return [ExperimentSpec(scope, frac, aug, clf, list(seeds), synthetic_count)
            for clf, scope, frac, aug in itertools.product(classifiers, scopes, fractions, augmentations)]


# -- benchmark configuration -------------------------------------------------------------------
@dataclass
class BenchmarkConfig:
    name: str
    centres: dict  # role -> CentreProfile json
    geometry_factor: float = 0.5
    target: str = "A"
    corpus_seed: int = 11
    patch_seed: int = 5
    split_seed: int = 0
    gan_seed: int = 0
    healthy_per_image: int = 6
    synthetic_count: int = 1200
    gan: dict = field(default_factory=dict)  # variant -> GanConfig overrides
    classifier: dict = field(default_factory=dict)  # ClassifierHyper overrides
    swin_input_side: int | None = None
    sources: dict = field(default_factory=lambda: {k: [list(s) for s in v] for k, v in DEFAULT_SOURCES.items()})
    seeds: list = field(default_factory=lambda: [0, 1, 2])

    @classmethod
    def from_json(cls, obj: dict) -> "BenchmarkConfig":
        return cls(**obj)

    def to_json(self) -> dict:
        return asdict(self)

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.geometry_factor)

    def profile(self, role: str) -> phantom.CentreProfile:
        return phantom.CentreProfile.from_json(self.centres[role])

    def gan_config(self, variant: str) -> GanConfig:
        return GanConfig(variant=variant, image_side=self.geometry.input_side, **self.gan.get(variant, {}))

    def hyper(self) -> ClassifierHyper:
        return ClassifierHyper(**self.classifier)

    def model_spec(self, kind: str) -> ModelSpec:
        side = self.geometry.input_side
        if kind == "swinmini" and self.swin_input_side:
            side = self.swin_input_side
        return ModelSpec(kind, side)


def bundled_config(name: str = "desk") -> BenchmarkConfig:
    text = resources.files("gansharing").joinpath("data", f"{name}.json").read_text(encoding="utf-8")
    return BenchmarkConfig.from_json(json.loads(text))


def load_config(ref) -> BenchmarkConfig:
    """A bundled config name (``desk``, ``smoke``) or a path to a JSON file."""
    path = Path(str(ref))
    if path.suffix == ".json" or path.exists():
        return BenchmarkConfig.from_json(json.loads(path.read_text(encoding="utf-8")))
    return bundled_config(str(ref))


# -- workspace ----------------------------------------------------------------------------------
def subsample(records: list, fraction: float, seed: int) -> list:
    """Class-stratified patch-level subsample, order preserved."""
    if fraction >= 1.0:
        return list(records)
    rng = np.random.default_rng([seed, 0x50B])
    keep = set()
    for label in (HEALTHY, NON_HEALTHY):
        idx = [i for i, r in enumerate(records) if r.label == label]
        k = max(1, round(fraction * len(idx))) if idx else 0
        keep.update(idx[j] for j in rng.choice(len(idx), k, replace=False))
    return [r for i, r in enumerate(records) if i in keep]


class Workspace:
    """Materialized centres, cached generator packages and the target split.

    Everything derives from the config, so a workspace directory can be
    deleted and rebuilt with identical results.
    """

    def __init__(self, config: BenchmarkConfig, root):
        self.config = config
        self.root = Path(root)
        self._patches: dict = {}
        self._splits: dict = {}
        self._gans: dict = {}
        self.nodes: dict = {}
        self.timings: dict = {}

    def corpus_dir(self, role: str) -> Path:
        return self.root / "centres" / role / "corpus"

    def package_dir(self, role: str) -> Path:
        return self.root / "centres" / role / "packages"

    def prepare(self) -> None:
        for role in sorted(self.config.centres):
            d = self.corpus_dir(role)
            audit.register_owner(d, role)
            profile = self.config.profile(role)
            marker = d / "profile.json"
            stale = not marker.exists() or json.loads(marker.read_text()) != {
                **profile.to_json(), "seed": self.config.corpus_seed}
            if stale:
                with audit.acting_as(role):
                    corpus = phantom.generate_corpus(profile, self.config.corpus_seed)
                    phantom.write_corpus(corpus, d)
                marker.write_text(json.dumps({**profile.to_json(), "seed": self.config.corpus_seed},
                                             sort_keys=True))
                log.info("event=corpus_written centre=%s images=%d", role, len(corpus))
            self.nodes[role] = CentreNode(role, d, self.package_dir(role))

    def patches(self, role: str, scope: str) -> list:
        """Patches of one centre, extracted inside that centre's boundary."""
        key = (role, scope)
        if key not in self._patches:
            with audit.acting_as(role):
                corpus = phantom.read_corpus(self.corpus_dir(role))
                self._patches[key] = extract_dataset(
                    corpus, scope, self.config.patch_seed, self.config.geometry,
                    healthy_per_image=self.config.healthy_per_image if role == self.config.target else 0,
                    centre_id=role, include_healthy=role == self.config.target)
        return self._patches[key]

    def split(self, scope: str):
        if scope not in self._splits:
            target = self.config.target
            self._splits[scope] = split_corpus(self.patches(target, scope), SplitSpec(), self.config.split_seed)
        return self._splits[scope]

    def gan_id(self, role: str, variant: str, scope: str) -> str:
        return f"{role}-{variant}-{scope}"

    def ensure_generator(self, role: str, variant: str, scope: str) -> str:
        """Train (or reuse) and publish a generator at centre ``role``; returns the model id."""
        mid = self.gan_id(role, variant, scope)
        cfg = self.config.gan_config(variant)
        node = self.nodes[role]
        with audit.acting_as(role):
            path = self.package_dir(role) / f"{mid}{PACKAGE_SUFFIX}"
            if mid in node.ids() and node.manifest(mid).get("config_digest") == cfg.digest():
                return mid
            if path.exists():
                pkg = read_file(path)
                if pkg.manifest.get("config_digest") == cfg.digest():
                    node.publish(path.read_bytes(), persist=False)
                    return mid
            lesions = [p for p in self.patches(role, scope) if p.label == NON_HEALTHY]
            t0 = time.perf_counter()
            log.info("event=gan_train_start model=%s patches=%d epochs=%d", mid, len(lesions), cfg.epochs)
            gan = train_gan(cfg, lesions, seed=self.config.gan_seed, centre_id=role, scope=scope, gan_id=mid)
            self.timings[mid] = time.perf_counter() - t0
            log.info("event=gan_trained model=%s seconds=%.1f", mid, self.timings[mid])
            node.publish(generator_to_bytes(gan, created_at="1970-01-01T00:00:00Z"))
        return mid

    def pulled_generator(self, role: str, variant: str, scope: str):
        """Generator as received by the target over the wire (double hash verified)."""
        key = (role, variant, scope)
        if key not in self._gans:
            mid = self.ensure_generator(role, variant, scope)
            with CentreServer(self.nodes[role]) as srv, audit.acting_as(self.config.target):
                pkg = pull(srv.address, mid)
            self._gans[key] = generator_from_package(pkg)
        return self._gans[key]

    def sources(self, augmentation: str, scope: str) -> list:
        out = []
        for role, kind in self.config.sources[augmentation]:
            if kind == "real":
                # upper-bound arm: real patches leave centre B out-of-band
                out.append(RealSource(self.patches(role, scope), name=f"{role}-real-{scope}"))
            else:
                out.append(SyntheticSource(self.pulled_generator(role, kind, scope), seed=0))
        return out


# -- cells -------------------------------------------------------------------------------------------
@dataclass
class CellResult:
    spec: ExperimentSpec
    per_seed: list  # dicts: seed, metrics, best_epoch, val_auprc, train_counts
    aggregate: dict

    def to_json(self) -> dict:
        return {"cell": self.spec.cell_id, "spec": self.spec.to_json(), "per_seed": self.per_seed,
                "aggregate": self.aggregate,
                "flags": ["real_data_crosses_boundary"] if self.spec.augmentation == "real_external" else []}


def run_experiment(spec: ExperimentSpec, workspace: Workspace, progress=None) -> CellResult:
    cfg = workspace.config
    count = spec.synthetic_count if spec.synthetic_count is not None else cfg.synthetic_count
    try:
        split = workspace.split(spec.scope)
        sources = workspace.sources(spec.augmentation, spec.scope)
        per_seed, results = [], []
        for seed in spec.seeds:
            t0 = time.perf_counter()
            with audit.acting_as(cfg.target):
                base = subsample(split.train, spec.data_fraction, seed)
                plan = AugmentationPlan(sources, count)
                train = assemble_training_set(base, plan, split.reserve, np.random.default_rng([seed, 0xA55]))
                model = train_classifier(cfg.model_spec(spec.classifier), train, split.val, cfg.hyper(), seed)
                res = evaluate(model, split.test)
            results.append(res)
            per_seed.append({"seed": seed, "metrics": res.to_json(), "best_epoch": model.best_epoch,
                             "val_auprc": model.history["val_auprc"], "train_loss": model.history["train_loss"],
                             "train_counts": count_by_label(train),
                             "synthetic": sum(r.is_synthetic for r in train)})
            log.info("event=cell_seed cell=%s seed=%d f1=%.4f auprc=%.4f seconds=%.1f", spec.cell_id, seed,
                     res.f1, res.auprc, time.perf_counter() - t0)
            if progress is not None:
                progress(spec, seed, res)
    except Exception as exc:
        raise ExperimentError(f"cell {spec.cell_id}: {exc}") from exc
    agg = aggregate(results, spec.seeds)
    return CellResult(spec, per_seed, agg.to_json())


def reaggregate(cell_json: dict) -> dict:
    """Recompute means/stds from the stored per-seed metrics."""
    results = [EvalResult(**s["metrics"]) for s in cell_json["per_seed"]]
    return aggregate(results, [s["seed"] for s in cell_json["per_seed"]]).to_json()


def run_grid(specs: list, workspace: Workspace, out_dir=None, figures: bool = True, progress=None) -> dict:
    """Run every cell; write results.json, tables.txt, results.csv/.tsv and figures under ``out_dir``."""
    from . import report

    cells = [run_experiment(s, workspace, progress).to_json() for s in specs]
    doc = {"benchmark": workspace.config.name, "config": workspace.config.to_json(), "cells": cells}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "results.json").write_text(dumps(doc) + "\n", encoding="utf-8")
        (out / "tables.txt").write_text(report.render_tables(cells), encoding="utf-8")
        report.write_delimited(cells, out / "results.csv", ",")
        report.write_delimited(cells, out / "results.tsv", "\t")
        if figures:
            report.write_figures(cells, workspace, out / "figures")
    return doc
