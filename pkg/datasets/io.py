"""
File-output helpers shared by every command.
"""
import csv
import io
import json
import os
import tempfile
from pathlib import Path

from forestlpr.exceptions import DatasetError


def atomic_write(path, data: bytes) -> Path:
    """Write ``data`` to ``path`` through a temp file in the same directory and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f'.{path.name}.', suffix='.tmp', dir=path.parent)
    try:
        with os.fdopen(fd, 'wb') as handle:
            handle.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write(path, text.encode('utf-8'))


def atomic_write_json(path, payload) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + '\n')


def csv_text(fieldnames, rows) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=fieldnames, extrasaction='ignore', lineterminator='\n')
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buffer.getvalue()


def atomic_write_csv(path, fieldnames, rows) -> Path:
    return atomic_write_text(path, csv_text(fieldnames, rows))


def read_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"CSV file {path} does not exist")
    with path.open(newline='') as handle:
        return list(csv.DictReader(handle))


def ensure_writable(path, overwrite: bool) -> Path:
    """Refuse to clobber an existing output unless ``overwrite`` is set."""
    path = Path(path)
    if path.exists() and not overwrite:
        raise DatasetError(f"output {path} already exists (use --overwrite)")
    return path
