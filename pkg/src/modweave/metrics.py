"""Append-only JSONL metrics log, one object per line."""

from __future__ import annotations

import json


class MetricsWriter:
    """Opens lazily on first write so a configured but unused path
    leaves no file behind. Pass a falsy path to disable logging."""

    def __init__(self, path):
        self.path = path or None
        self._fh = None

    def write(self, row: dict) -> None:
        if self.path is None:
            return
        if self._fh is None:
            self._fh = open(self.path, "a", encoding="utf-8")
        self._fh.write(json.dumps(row, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
