"""File-backed run directory: append-only JSONL logs plus an atomically replaced snapshot.

Layout::

    config.json         config tree, its hash and the store format version
    tasks.jsonl         one line per generated task (the durable queue)
    observations.jsonl  one line per completed task, deterministic fields only
    timings.jsonl       wall times and worker ids, kept apart so the log above is reproducible
    snapshot.json       latest coordinator summary (temp file + rename)
    progress.csv        timestamp, completed, global best error, hypervolume
    report.json         final report

A JSONL line counts as committed once its trailing newline is on disk. A
last line without one is a torn write: it is dropped with a warning and cut
off before the next append.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from pathlib import Path
from typing import Any, Iterable

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
PROGRESS_HEADER = ("timestamp", "completed", "global_best_error", "hypervolume")


class StoreError(OSError):
    pass


class CorruptRecord(StoreError):
    pass


class IncompatibleVersion(StoreError):
    pass


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def write_json_atomic(path: Path, obj: Any) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    _fsync_dir(path.parent)


def dumps_record(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"), allow_nan=False)


def read_jsonl(path: Path, repair: bool = False) -> list[dict[str, Any]]:
    """Parse committed lines. A torn tail is dropped (and cut off when ``repair``)."""
    if not path.exists():
        return []
    data = path.read_bytes()
    if not data:
        return []
    end = data.rfind(b"\n") + 1
    if end < len(data):
        logger.warning("%s: dropping truncated last record (%d bytes)", path.name, len(data) - end)
        if repair:
            with open(path, "r+b") as fh:
                fh.truncate(end)
                fh.flush()
                os.fsync(fh.fileno())
    records = []
    for lineno, line in enumerate(data[:end].split(b"\n")[:-1], start=1):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"{path.name}:{lineno}: {exc}") from None
    return records


class RunStore:
    """Single-writer access to one run directory."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    # -- paths -------------------------------------------------------------

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def observations_path(self) -> Path:
        return self.root / "observations.jsonl"

    @property
    def tasks_path(self) -> Path:
        return self.root / "tasks.jsonl"

    @property
    def timings_path(self) -> Path:
        return self.root / "timings.jsonl"

    @property
    def snapshot_path(self) -> Path:
        return self.root / "snapshot.json"

    @property
    def progress_path(self) -> Path:
        return self.root / "progress.csv"

    @property
    def report_path(self) -> Path:
        return self.root / "report.json"

    # -- lifecycle ---------------------------------------------------------

    def exists(self) -> bool:
        return self.config_path.exists()

    def create(self, config_tree: dict[str, Any], config_hash: str) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
            write_json_atomic(self.config_path, {"format_version": FORMAT_VERSION, "config_hash": config_hash,
                                                 "config": config_tree})
            for p in (self.observations_path, self.tasks_path, self.timings_path):
                p.touch()
            with open(self.progress_path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(PROGRESS_HEADER)
        except OSError as exc:
            raise StoreError(f"cannot create run directory {self.root}: {exc}") from exc

    def read_config(self) -> dict[str, Any]:
        try:
            meta = json.loads(self.config_path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise StoreError(f"{self.root} is not a run directory (config.json missing)") from None
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"config.json: {exc}") from None
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise IncompatibleVersion(f"store format {version!r}, this build reads {FORMAT_VERSION}")
        return meta

    # -- logs --------------------------------------------------------------

    def _append(self, path: Path, records: Iterable[dict[str, Any]]) -> None:
        blob = "".join(dumps_record(r) + "\n" for r in records)
        if not blob:
            return
        try:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(blob)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StoreError(f"append to {path.name} failed: {exc}") from exc

    def append_observation(self, record: dict[str, Any]) -> None:
        self._append(self.observations_path, [record])

    def append_tasks(self, records: list[dict[str, Any]]) -> None:
        self._append(self.tasks_path, records)

    def append_timing(self, record: dict[str, Any]) -> None:
        self._append(self.timings_path, [record])

    def load_observations(self, repair: bool = False) -> list[dict[str, Any]]:
        return read_jsonl(self.observations_path, repair)

    def load_tasks(self, repair: bool = False) -> list[dict[str, Any]]:
        return read_jsonl(self.tasks_path, repair)

    def load_timings(self) -> list[dict[str, Any]]:
        return read_jsonl(self.timings_path)

    def repair(self) -> None:
        """Cut torn tails off every log so appends start on a clean line."""
        for p in (self.observations_path, self.tasks_path, self.timings_path):
            read_jsonl(p, repair=True)
        if self.progress_path.exists():
            data = self.progress_path.read_bytes()
            end = data.rfind(b"\n") + 1
            if end < len(data):
                with open(self.progress_path, "r+b") as fh:
                    fh.truncate(end)

    # -- snapshot, progress, report ----------------------------------------

    def write_snapshot(self, snapshot: dict[str, Any]) -> None:
        try:
            write_json_atomic(self.snapshot_path, snapshot)
        except OSError as exc:
            raise StoreError(f"snapshot failed: {exc}") from exc

    def load_snapshot(self) -> dict[str, Any] | None:
        if not self.snapshot_path.exists():
            return None
        try:
            return json.loads(self.snapshot_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"snapshot.json: {exc}") from None

    def append_progress(self, row: tuple) -> None:
        try:
            with open(self.progress_path, "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(row)
                fh.flush()
                os.fsync(fh.fileno())
        except OSError as exc:
            raise StoreError(f"progress append failed: {exc}") from exc

    def load_progress(self) -> list[dict[str, str]]:
        if not self.progress_path.exists():
            return []
        with open(self.progress_path, newline="", encoding="utf-8") as fh:
            return [r for r in csv.DictReader(fh) if r.get("hypervolume") not in (None, "")]

    def write_report(self, report: dict[str, Any]) -> None:
        write_json_atomic(self.report_path, report)

    def load_report(self) -> dict[str, Any] | None:
        if not self.report_path.exists():
            return None
        return json.loads(self.report_path.read_text(encoding="utf-8"))
