"""JSON-lines dataset manifests binding image paths to labels, generators and splits."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

log = logging.getLogger(__name__)

LABELS = ("real", "fake")
SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    pass


@dataclass
class Record:
    id: str
    path: str
    label: str
    generator: str = "unknown"
    split: str = "train"
    pair_id: str | None = None
    class_label: int | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestError(f"record {self.id}: label must be one of {LABELS}, got {self.label!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"record {self.id}: split must be one of {SPLITS}, got {self.split!r}")
        self.path = self.path.replace("\\", "/")
        if self.path.startswith("/"):
            raise ManifestError(f"record {self.id}: path must be relative to the manifest root")

    @property
    def y(self) -> int:
        return 1 if self.label == "fake" else 0

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=lambda: Path("."))

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise ManifestError(f"duplicate id {r.id!r}")
            seen.add(r.id)
        pairs: dict[str, list[Record]] = {}
        for r in self.records:
            if r.pair_id is not None:
                pairs.setdefault(r.pair_id, []).append(r)
        for pid, rs in pairs.items():
            if sorted(r.label for r in rs) != ["fake", "real"]:
                raise ManifestError(f"pair_id {pid!r} must link exactly one real and one fake")

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def resolve(self, rec: Record) -> Path:
        return self.root / rec.path

    def filter(self, split: str | None = None, label: str | None = None,
               generator: str | None = None) -> "DatasetManifest":
        rs = [r for r in self.records
              if (split is None or r.split == split)
              and (label is None or r.label == label)
              and (generator is None or r.generator == generator)]
        return DatasetManifest(rs, self.root)

    def __add__(self, other: "DatasetManifest") -> "DatasetManifest":
        if Path(other.root).resolve() != Path(self.root).resolve():
            raise ManifestError("cannot concatenate manifests with different roots")
        return DatasetManifest(self.records + other.records, self.root)


def read_manifest(path, root=None) -> DatasetManifest:
    """Load a JSON-lines manifest; ``root`` defaults to the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from e
            try:
                records.append(Record(**d))
            except TypeError as e:
                raise ManifestError(f"{path}:{lineno}: bad record fields ({e})") from e
    return DatasetManifest(records, Path(root) if root is not None else path.parent)


def write_manifest(path, records: Iterable[Record]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")
    os.replace(tmp, path)
