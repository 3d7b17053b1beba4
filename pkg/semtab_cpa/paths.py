"""Filesystem/path helpers shared across the toolkit."""

from __future__ import annotations

import os
from typing import List, Optional

from semtab_cpa.errors import IoFailure

TABLE_SUFFIXES = (".csv", ".jsonl", ".json")
COMPRESSED_SUFFIX = ".gz"

RESERVED_NAMES = {"__macosx", "desktop.ini", "thumbs.db"}


def abspath(path: str) -> str:
    return os.path.abspath(os.path.normpath(path))


def display_path(path: str, workspace_root: Optional[str] = None) -> str:
    """Render `path` relative to the workspace root so traces stay portable."""
    if not path:
        return ""
    root = abspath(workspace_root or os.getcwd())
    candidate = abspath(path)
    try:
        if os.path.commonpath([root, candidate]) != root:
            return candidate.replace("\\", "/")
    except ValueError:
        return candidate.replace("\\", "/")
    return os.path.relpath(candidate, root).replace("\\", "/")


def ensure_parent_directory(path: str) -> None:
    parent = os.path.dirname(abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"Unable to create directory '{parent}': {exc}") from exc


def strip_table_suffixes(name: str) -> str:
    base = os.path.basename((name or "").strip())
    lowered = base.lower()
    if lowered.endswith(COMPRESSED_SUFFIX):
        base = base[: -len(COMPRESSED_SUFFIX)]
        lowered = base.lower()
    for suffix in TABLE_SUFFIXES:
        if lowered.endswith(suffix):
            return base[: -len(suffix)]
    return base


def is_table_file(name: str) -> bool:
    normalized = (name or "").strip()
    if not normalized or normalized.startswith("."):
        return False
    lowered = normalized.lower()
    if lowered in RESERVED_NAMES:
        return False
    if lowered.endswith(COMPRESSED_SUFFIX):
        lowered = lowered[: -len(COMPRESSED_SUFFIX)]
    return lowered.endswith(TABLE_SUFFIXES)


def list_table_files(directory: str) -> List[str]:
    """Return the table files directly under `directory`, sorted by name."""
    entries: List[str] = []
    try:
        with os.scandir(directory) as iterator:
            for entry in iterator:
                if not is_table_file(entry.name):
                    continue
                try:
                    if entry.is_file():
                        entries.append(entry.path)
                except OSError:
                    continue
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        raise IoFailure(f"Unable to list tables under '{directory}': {exc}") from exc
    entries.sort(key=lambda value: os.path.basename(value))
    return entries


__all__ = [
    "abspath",
    "display_path",
    "ensure_parent_directory",
    "is_table_file",
    "list_table_files",
    "strip_table_suffixes",
]
