"""Filesystem-backed run records and atomic artifact writes."""

from __future__ import annotations

import csv
import fcntl
import io
import json
import os
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence

from .calibration import CalibrationRecord, records_from_arrays
from .errors import FormatError, StorageError
from .policy import PolicyParams
from .protocol import RunRecord, RunStatus
from .taskenv import TaskSuite
from .trainer import TrainLog


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "w", newline="") as f:
        f.write(text)
        f.flush()
        os.fsync(f.fileno())
    tmp_path.replace(path)


def dumps(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path: Path, data: Any) -> None:
    _atomic_write(path, dumps(data))


def read_json(path: Path) -> Any:
    return json.loads(Path(path).read_text())


def write_csv(path: Path, rows: Iterable[Sequence[Any]]) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    for row in rows:
        writer.writerow(row)
    _atomic_write(path, buffer.getvalue())


def read_csv_rows(path: Path) -> List[List[str]]:
    with open(path, newline="") as f:
        return [row for row in csv.reader(f)]


def save_suite(path: Path, suite: TaskSuite) -> None:
    write_json(path, suite.to_dict())


def load_suite(path: Path) -> TaskSuite:
    return TaskSuite.from_dict(read_json(path))


def save_policy(path: Path, params: PolicyParams) -> None:
    write_json(path, params.to_dict())


def load_policy(path: Path) -> PolicyParams:
    return PolicyParams.from_dict(read_json(path))


def write_train_log(path: Path, log: TrainLog) -> None:
    write_csv(path, log.csv_rows())


def load_train_log(path: Path) -> TrainLog:
    return TrainLog.from_csv_rows(read_csv_rows(path))


def load_records_csv(path: Path) -> List[CalibrationRecord]:
    """Read a `confidence,correct` CSV (header required)."""
    rows = read_csv_rows(path)
    if not rows or [cell.strip() for cell in rows[0]] != ["confidence", "correct"]:
        raise FormatError(f"{path}: expected header 'confidence,correct'")
    confidence, correct = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
        try:
            c, y = float(row[0]), int(row[1])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: unparseable row {row}") from None
        if not 0.0 <= c <= 1.0 or y not in (0, 1):
            raise FormatError(f"{path}:{lineno}: confidence must be in [0, 1] and correct in {{0, 1}}")
        confidence.append(c)
        correct.append(y)
    return records_from_arrays(confidence, correct)


class RunStorage:
    """Run records filed by status, one JSON document per run at `<base>/<status>/<run_id>.json`.

    A record sits in exactly one status directory. `write_run` moves it under a
    per-run lock file so a cell finishing in a worker process and a reader in the
    parent never see two copies.
    """

    lock_attempts = 10
    lock_wait_seconds = 0.05

    def __init__(self, base_dir: Path):
        self.base_dir = Path(base_dir).expanduser()
        for status in RunStatus:
            self._status_dir(status).mkdir(parents=True, exist_ok=True)

    def _status_dir(self, status: RunStatus) -> Path:
        return self.base_dir / status.value

    def _record_path(self, run_id: str, status: RunStatus) -> Path:
        return self._status_dir(status) / f"{run_id}.json"

    @contextmanager
    def _run_lock(self, run_id: str) -> Iterator[None]:
        lock_path = self.base_dir / f"{run_id}.lock"
        with open(lock_path, "w") as handle:
            for _ in range(self.lock_attempts):
                try:
                    fcntl.flock(handle, fcntl.LOCK_EX | fcntl.LOCK_NB)
                    break
                except BlockingIOError:
                    time.sleep(self.lock_wait_seconds)
            else:
                raise StorageError(f"run {run_id} is locked by another writer")
            try:
                yield
            finally:
                fcntl.flock(handle, fcntl.LOCK_UN)
        lock_path.unlink(missing_ok=True)

    def write_run(self, record: RunRecord) -> None:
        with self._run_lock(record.run_id):
            for status in RunStatus:
                if status is not record.status:
                    self._record_path(record.run_id, status).unlink(missing_ok=True)
            write_json(self._record_path(record.run_id, record.status), record.to_dict())

    def load_run(self, run_id: str) -> Optional[RunRecord]:
        for status in RunStatus:
            path = self._record_path(run_id, status)
            if path.exists():
                return RunRecord.from_dict(read_json(path))
        return None

    def records(self, *statuses: RunStatus) -> List[RunRecord]:
        """Records in the given states (every state when none is given), sorted by run id."""
        found: List[RunRecord] = []
        for status in statuses or tuple(RunStatus):
            found.extend(RunRecord.from_dict(read_json(p)) for p in self._status_dir(status).glob("*.json"))
        return sorted(found, key=lambda record: record.run_id)

    def load_all(self) -> Dict[str, RunRecord]:
        return {record.run_id: record for record in self.records()}
