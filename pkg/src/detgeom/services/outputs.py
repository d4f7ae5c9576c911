from __future__ import annotations
import csv
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Sequence, Tuple

from pydantic import BaseModel

from ..errors import ArtifactWriteError


def fmt(value: Any) -> str:
    """Locale-independent CSV cell: floats with 9 significant digits."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


@dataclass(slots=True)
class ArtifactDir:
    """Keeps every artifact write inside one output directory, atomically."""
    root: Path

    def ensure(self) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ArtifactWriteError(self.root, e.strerror or str(e)) from e
        if not os.access(self.root, os.W_OK):
            raise ArtifactWriteError(self.root, "directory is not writable")

    # ---------- internal helpers ----------
    def _resolve(self, rel: str) -> Path:
        """Return the absolute target and ensure it stays inside the output directory."""
        root = self.root.resolve()
        target = (self.root / rel).resolve()
        if not (target == root or str(target).startswith(str(root) + os.sep)):
            raise ArtifactWriteError(target, f"artifact paths must stay inside {root}")
        return target

    def _atomic_write(self, target: Path, data: bytes) -> Path:
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(data)
                os.replace(tmp, target)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
        except OSError as e:
            raise ArtifactWriteError(target, e.strerror or str(e)) from e
        return target

    # ---------- public writers ----------
    def write_text(self, rel: str, content: str) -> Path:
        self.ensure()
        return self._atomic_write(self._resolve(rel), content.encode("utf-8"))

    def write_csv(self, rel: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
        return self.write_text(rel, buf.getvalue())

    def write_json(self, rel: str, payload: BaseModel | dict) -> Path:
        if isinstance(payload, BaseModel):
            payload = payload.model_dump(mode="json")
        return self.write_text(rel, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def listing(self) -> Tuple[str, ...]:
        if not self.root.exists():
            return ()
        return tuple(sorted(p.name for p in self.root.iterdir() if not p.name.startswith(".")))
