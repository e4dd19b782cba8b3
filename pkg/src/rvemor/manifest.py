"""Provenance manifest: every artifact records its own content hash and the
hashes of the artifacts it was built from, in `manifest.json` next to the
data.  Entries carry no timestamps so re-running a stage with identical
inputs reproduces the manifest bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import os

from .errors import DataMismatchError

__all__ = ["file_sha256", "record_artifact", "load_manifest",
           "artifact_hash", "verify_artifact"]

_MANIFEST_NAME = "manifest.json"


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest_path(data_dir) -> str:
    return os.path.join(data_dir, _MANIFEST_NAME)


def load_manifest(data_dir) -> dict:
    try:
        with open(_manifest_path(data_dir)) as fh:
            return json.load(fh)
    except FileNotFoundError:
        return {}
    except json.JSONDecodeError as exc:
        raise DataMismatchError(
            f"corrupt manifest in {data_dir}: {exc}") from exc


def record_artifact(data_dir, name: str, path, upstream: dict | None = None,
                    extra: dict | None = None) -> str:
    """Hash `path`, store it under `name` with its upstream hashes, and
    return the hash.  `upstream` maps logical names to hashes (or to
    manifest entry names, resolved to their recorded hashes)."""
    manifest = load_manifest(data_dir)
    digest = file_sha256(path)
    entry = {"sha256": digest,
             "file": os.path.relpath(path, data_dir),
             "upstream": dict(sorted((upstream or {}).items()))}
    if extra:
        entry.update(sorted(extra.items()))
    manifest[name] = entry
    with open(_manifest_path(data_dir), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def artifact_hash(data_dir, name: str) -> str:
    manifest = load_manifest(data_dir)
    if name not in manifest:
        raise DataMismatchError(f"no manifest entry for {name!r}")
    return manifest[name]["sha256"]


def verify_artifact(data_dir, name: str) -> bool:
    """True when the recorded hash still matches the file on disk."""
    manifest = load_manifest(data_dir)
    if name not in manifest:
        raise DataMismatchError(f"no manifest entry for {name!r}")
    entry = manifest[name]
    path = os.path.join(data_dir, entry["file"])
    if not os.path.exists(path):
        raise DataMismatchError(f"manifest entry {name!r} points to missing "
                                f"file {entry['file']}")
    return file_sha256(path) == entry["sha256"]
