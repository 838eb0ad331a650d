"""Scan storage, labeling, splitting, and class rebalancing.

Records carry two orthogonal section flags: ``public``/``private`` controls
dataset export, ``used``/``update`` tracks whether a scan has already been
consumed by retraining. Splitting happens before any resampling so that no
duplicated record can leak into the test set.

On-disk layout of a :class:`ScanStore`::

    <root>/scans/<id>.pgm    raster
    <root>/scans/<id>.meta   key=value lines (label, confirmed, section,
                             batch, source, diversity fields)
    <root>/journal.log       append-only audit log of state transitions
"""

from __future__ import annotations

import os
import shutil
import threading
from dataclasses import dataclass, field, replace
from enum import Enum, IntEnum

import numpy as np

from .imaging import AugmentConfig, GrayImage, augment, read_pgm, write_pgm


class DatasetError(Exception):
    """Base error for dataset operations."""


class StratificationError(DatasetError):
    """Split or rebalance asked of data lacking both classes."""


class LeakageError(DatasetError):
    """Resampling was attempted on a set flagged as test data."""


class ValidationError(DatasetError):
    """Record rejected at ingestion."""


class Label(IntEnum):
    NORMAL = 0
    PNEUMONIA = 1
    UNLABELED = 2


class Section(str, Enum):
    PUBLIC = "public"
    PRIVATE = "private"


class Batch(str, Enum):
    USED = "used"
    UPDATE = "update"


@dataclass(frozen=True)
class DiversityMeta:
    """Per-scan provenance; every field optional."""

    hospital: str | None = None
    geography: str | None = None
    age: int | None = None
    sex: str | None = None
    scanner_brand: str | None = None


@dataclass(frozen=True)
class ScanRecord:
    id: str
    image: GrayImage
    label: Label = Label.UNLABELED
    confirmed: bool = False
    section: Section = Section.PRIVATE
    batch: Batch = Batch.UPDATE
    diversity: DiversityMeta = field(default_factory=DiversityMeta)
    source_id: str | None = None    # set on augmented copies


@dataclass(frozen=True)
class SplitSpec:
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.test_fraction < 1.0:
            raise DatasetError("test_fraction must be in (0, 1)")


@dataclass(frozen=True)
class SplitSet:
    """A train or test partition; the role flag guards against leakage."""

    role: str                       # "train" | "test"
    records: tuple[ScanRecord, ...]

    def __len__(self) -> int:
        return len(self.records)

    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def class_counts(self) -> dict[Label, int]:
        counts: dict[Label, int] = {}
        for r in self.records:
            counts[r.label] = counts.get(r.label, 0) + 1
        return counts


def _largest_remainder(total: int, weights: list[int]) -> list[int]:
    """Allocate ``total`` across classes proportionally to ``weights``."""
    grand = sum(weights)
    exact = [total * w / grand for w in weights]
    base = [int(x) for x in exact]
    short = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: exact[i] - base[i],
                   reverse=True)
    for i in order[:short]:
        base[i] += 1
    return base


def split(records: list[ScanRecord], spec: SplitSpec) -> tuple[SplitSet, SplitSet]:
    """Stratified, seeded train/test split.

    The test set holds round(test_fraction * n) records, allocated across
    classes by largest remainder so the class mix mirrors the input.
    """
    if len(records) < 2:
        raise DatasetError("need at least 2 records to split")
    by_label: dict[Label, list[ScanRecord]] = {}
    for r in records:
        by_label.setdefault(r.label, []).append(r)
    if len(by_label) < 2:
        raise StratificationError("cannot stratify a single-class dataset")

    n = len(records)
    n_test = int(np.floor(spec.test_fraction * n + 0.5))
    n_test = min(max(n_test, 1), n - 1)
    labels = sorted(by_label)
    counts = _largest_remainder(n_test, [len(by_label[k]) for k in labels])

    rng = np.random.default_rng(spec.seed)
    train: list[ScanRecord] = []
    test: list[ScanRecord] = []
    for lab, take in zip(labels, counts):
        pool = by_label[lab]
        idx = rng.permutation(len(pool))
        test.extend(pool[i] for i in idx[:take])
        train.extend(pool[i] for i in idx[take:])
    return SplitSet("train", tuple(train)), SplitSet("test", tuple(test))


def rebalance(train_set: SplitSet, target_ratio: float, seed: int = 0) -> SplitSet:
    """Rebalance class shares by duplicating the minority class and
    subsampling the majority, keeping the total record count fixed.

    ``target_ratio`` is the desired minority-class share of the output.
    Raises :class:`LeakageError` if handed anything flagged as a test set.
    """
    if train_set.role != "train":
        raise LeakageError("rebalance must never touch the test set")
    if not 0.0 < target_ratio < 1.0:
        raise DatasetError("target_ratio must be in (0, 1)")
    counts = train_set.class_counts()
    if len(counts) < 2:
        raise StratificationError("rebalance needs both classes present")

    minority = min(counts, key=lambda k: (counts[k], int(k)))
    total = len(train_set)
    want_minority = int(np.floor(target_ratio * total + 0.5))
    want = {lab: (want_minority if lab == minority else total - want_minority)
            for lab in counts}

    rng = np.random.default_rng(seed)
    out: list[ScanRecord] = []
    for lab in sorted(counts):
        pool = [r for r in train_set.records if r.label == lab]
        goal = want[lab]
        if goal <= len(pool):
            idx = rng.permutation(len(pool))[:goal]
            out.extend(pool[i] for i in sorted(idx))
        else:
            out.extend(pool)
            extra = goal - len(pool)
            idx = rng.permutation(len(pool))
            for k in range(extra):    # whole-record duplication, cycling
                out.append(pool[idx[k % len(pool)]])
    perm = rng.permutation(len(out))
    return SplitSet("train", tuple(out[i] for i in perm))


def expand_with_augmentation(train_set: SplitSet, cfg: AugmentConfig,
                             copies_per_record: int) -> SplitSet:
    """Append ``copies_per_record`` augmented variants per record; each copy
    gets a fresh id and references its source record."""
    if train_set.role != "train":
        raise LeakageError("augmentation must never touch the test set")
    if copies_per_record < 0:
        raise DatasetError("copies_per_record must be >= 0")
    out = list(train_set.records)
    for i, rec in enumerate(train_set.records):
        rng = np.random.default_rng([cfg.seed, i])
        for k in range(copies_per_record):
            img = augment(rec.image, cfg, rng)
            out.append(replace(rec, id=f"{rec.id}#aug{k}", image=img,
                               source_id=rec.id))
    return SplitSet("train", tuple(out))


# --- persistent scan store --------------------------------------------------

_META_ORDER = ("label", "confirmed", "section", "batch", "source",
               "hospital", "geography", "age", "sex", "scanner_brand")


def _meta_lines(rec: ScanRecord) -> str:
    d = rec.diversity or DiversityMeta()
    values = {
        "label": rec.label.name,
        "confirmed": "1" if rec.confirmed else "0",
        "section": rec.section.value,
        "batch": rec.batch.value,
        "source": rec.source_id or "",
        "hospital": d.hospital or "",
        "geography": d.geography or "",
        "age": "" if d.age is None else str(d.age),
        "sex": d.sex or "",
        "scanner_brand": d.scanner_brand or "",
    }
    return "".join(f"{k}={values[k]}\n" for k in _META_ORDER)


def _parse_meta(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


class ScanStore:
    """Disk-backed scan archive. Single writer, idempotent by id."""

    def __init__(self, root, target_side: int = 128):
        self.root = str(root)
        self.target_side = target_side
        self._scans = os.path.join(self.root, "scans")
        self._journal = os.path.join(self.root, "journal.log")
        os.makedirs(self._scans, exist_ok=True)
        self._lock = threading.Lock()
        self._index: set[str] = {
            name[:-5] for name in os.listdir(self._scans)
            if name.endswith(".meta")
        }

    def __len__(self) -> int:
        return len(self._index)

    def ids(self) -> list[str]:
        return sorted(self._index)

    def _paths(self, scan_id: str) -> tuple[str, str]:
        return (os.path.join(self._scans, f"{scan_id}.pgm"),
                os.path.join(self._scans, f"{scan_id}.meta"))

    def _log(self, event: str, scan_id: str) -> None:
        with open(self._journal, "a", encoding="utf-8") as fh:
            fh.write(f"{event} {scan_id}\n")
            fh.flush()
            os.fsync(fh.fileno())

    def ingest(self, rec: ScanRecord) -> bool:
        """Store a preprocessed scan; returns False on duplicate id."""
        if rec.image.width != self.target_side or rec.image.height != self.target_side:
            raise ValidationError(
                f"expected {self.target_side}x{self.target_side} raster, got "
                f"{rec.image.width}x{rec.image.height}"
            )
        if "/" in rec.id or rec.id in ("", ".", ".."):
            raise ValidationError(f"bad scan id {rec.id!r}")
        with self._lock:
            if rec.id in self._index:
                return False
            pgm, meta = self._paths(rec.id)
            write_pgm(rec.image, pgm)
            with open(meta, "w", encoding="utf-8") as fh:
                fh.write(_meta_lines(rec))
            self._index.add(rec.id)
            self._log("ingest", rec.id)
            return True

    def get(self, scan_id: str) -> ScanRecord:
        if scan_id not in self._index:
            raise KeyError(scan_id)
        pgm, meta = self._paths(scan_id)
        img = read_pgm(pgm)
        with open(meta, encoding="utf-8") as fh:
            m = _parse_meta(fh.read())
        d = DiversityMeta(
            hospital=m.get("hospital") or None,
            geography=m.get("geography") or None,
            age=int(m["age"]) if m.get("age") else None,
            sex=m.get("sex") or None,
            scanner_brand=m.get("scanner_brand") or None,
        )
        return ScanRecord(
            id=scan_id, image=img, label=Label[m.get("label", "UNLABELED")],
            confirmed=m.get("confirmed") == "1",
            section=Section(m.get("section", "private")),
            batch=Batch(m.get("batch", "update")),
            diversity=d, source_id=m.get("source") or None,
        )

    def _rewrite_meta(self, rec: ScanRecord) -> None:
        _, meta = self._paths(rec.id)
        tmp = meta + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(_meta_lines(rec))
        os.replace(tmp, meta)

    def records(self, section: Section | None = None,
                batch: Batch | None = None) -> list[ScanRecord]:
        out = []
        for scan_id in self.ids():
            rec = self.get(scan_id)
            if section is not None and rec.section != section:
                continue
            if batch is not None and rec.batch != batch:
                continue
            out.append(rec)
        return out

    def set_confirmation(self, scan_id: str, confirmed: bool,
                         verdict: Label | None = None) -> ScanRecord:
        """Record the reviewer's mark. A confirmed verdict labels the scan
        with that class; a rejected binary verdict labels it with the other."""
        with self._lock:
            rec = self.get(scan_id)
            label = rec.label
            if verdict is not None and verdict != Label.UNLABELED:
                if confirmed:
                    label = verdict
                else:
                    label = Label.NORMAL if verdict == Label.PNEUMONIA else Label.PNEUMONIA
            rec = replace(rec, confirmed=True, label=label)
            self._rewrite_meta(rec)
            self._log("confirm" if confirmed else "reject", scan_id)
            return rec

    def consume_update_batch(self) -> list[ScanRecord]:
        """Flip every update-batch record to used; returns them as they were."""
        with self._lock:
            consumed = []
            for scan_id in self.ids():
                rec = self.get(scan_id)
                if rec.batch == Batch.UPDATE:
                    consumed.append(rec)
                    self._rewrite_meta(replace(rec, batch=Batch.USED))
                    self._log("consume", scan_id)
            return consumed

    def export(self, dest, section: Section = Section.PUBLIC) -> str:
        """Copy every record of ``section`` to ``dest`` with a manifest;
        records of other sections never leave the store."""
        dest = str(dest)
        os.makedirs(dest, exist_ok=True)
        lines = []
        for scan_id in self.ids():
            rec = self.get(scan_id)
            if rec.section != section:
                continue
            src, _ = self._paths(scan_id)
            shutil.copyfile(src, os.path.join(dest, f"{scan_id}.pgm"))
            lines.append(f"{scan_id} {rec.label.name} {rec.section.value}\n")
        manifest = os.path.join(dest, "manifest.txt")
        with open(manifest, "w", encoding="utf-8") as fh:
            fh.writelines(lines)
        return manifest
