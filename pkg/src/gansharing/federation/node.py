"""A data-providing centre: its private corpus plus the packages it publishes."""

from __future__ import annotations

import threading
from pathlib import Path

from .package import package_read, write_file

PACKAGE_SUFFIX = ".mgpk"


class CentreNode:
    def __init__(self, centre_id: str, corpus_dir=None, package_dir=None):
        self.centre_id = centre_id
        self.corpus_dir = Path(corpus_dir) if corpus_dir else None
        self.package_dir = Path(package_dir) if package_dir else None
        self._packages: dict = {}
        self._manifests: dict = {}
        self._lock = threading.Lock()
        if self.package_dir and self.package_dir.is_dir():
            for path in sorted(self.package_dir.glob(f"*{PACKAGE_SUFFIX}")):
                self.publish(path.read_bytes(), persist=False)

    def publish(self, data: bytes, persist: bool = True) -> str:
        """Verify and publish a package; returns its model_id."""
        pkg = package_read(data)
        mid = pkg.model_id
        with self._lock:
            self._packages[mid] = bytes(data)
            self._manifests[mid] = pkg.manifest
        if persist and self.package_dir:
            self.package_dir.mkdir(parents=True, exist_ok=True)
            write_file(self.package_dir / f"{mid}{PACKAGE_SUFFIX}", data)
        return mid

    def ids(self) -> list:
        with self._lock:
            return sorted(self._packages)

    def manifest(self, model_id: str) -> dict:
        with self._lock:
            return dict(self._manifests[model_id])

    def get_bytes(self, model_id: str) -> bytes | None:
        with self._lock:
            return self._packages.get(model_id)
