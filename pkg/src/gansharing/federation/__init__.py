"""Centres, the generator package container, the pull protocol and the experiment grid."""

from .experiment import (AUGMENTATIONS, BenchmarkConfig, CellResult, ExperimentError, ExperimentSpec, Workspace,
                         bundled_config, grid_specs, load_config, reaggregate, run_experiment, run_grid, subsample)
from .models import (classifier_from_package, classifier_to_bytes, generator_from_package, generator_to_bytes,
                     load_generator)
from .node import CentreNode
from .package import (FORMAT_VERSION, IntegrityError, ModelPackage, PackageError, ParseError, VersionError,
                      package_read, package_write)
from .protocol import CentreServer, RemoteError, list_models, pull, pull_bytes, serve

__all__ = [
    "AUGMENTATIONS", "BenchmarkConfig", "CellResult", "CentreNode", "CentreServer", "ExperimentError",
    "ExperimentSpec", "FORMAT_VERSION", "IntegrityError", "ModelPackage", "PackageError", "ParseError",
    "RemoteError", "VersionError", "Workspace", "bundled_config", "classifier_from_package",
    "classifier_to_bytes", "generator_from_package", "generator_to_bytes", "grid_specs", "list_models",
    "load_config", "load_generator", "package_read", "package_write", "pull", "pull_bytes", "reaggregate",
    "run_experiment", "run_grid", "serve", "subsample",
]
