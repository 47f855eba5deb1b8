"""Dataset ingestion, deterministic splitting and per-task batch loading."""
from __future__ import annotations

import json
import logging
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .colorlab import load_rgb, normalize, rgb_to_lab, to_planes

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class DataError(ValueError):
    pass


def substream(seed, name):
    """Independent generator for one named consumer of the master seed."""
    return np.random.default_rng([zlib.crc32(name.encode()), int(seed)])


@dataclass(frozen=True)
class Entry:
    image_id: str
    path: str
    width: int
    height: int


@dataclass
class DatasetIndex:
    entries: list
    root: str
    split: dict = field(default_factory=dict)
    skipped: int = 0

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self):
        return [e.image_id for e in self.entries]

    def entry(self, image_id) -> Entry:
        return self._by_id[image_id]

    @property
    def _by_id(self):
        cache = self.__dict__.get("_cache")
        if cache is None or len(cache) != len(self.entries):
            cache = {e.image_id: e for e in self.entries}
            self.__dict__["_cache"] = cache
        return cache

    def ids_in(self, part):
        return [e.image_id for e in self.entries if self.split.get(e.image_id) == part]

    @property
    def train_ids(self):
        return self.ids_in("train")

    @property
    def test_ids(self):
        return self.ids_in("test")

    def path_of(self, image_id):
        return Path(self.root) / self.entry(image_id).path

    def to_json(self):
        return {
            "root": self.root,
            "skipped": self.skipped,
            "entries": [vars(e) for e in self.entries],
            "split": self.split,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        return cls([Entry(**e) for e in doc["entries"]], doc["root"], doc.get("split", {}), doc.get("skipped", 0))


def ingest(directory) -> DatasetIndex:
    """Index every readable PNG/JPEG under ``directory``, sorted by relative path.

    Image ids are relative paths without suffix. Unreadable files are skipped
    with a warning and counted in ``DatasetIndex.skipped``.
    """
    root = Path(directory)
    if not root.is_dir():
        raise DataError(f"not a directory: {root}")
    entries, skipped = [], 0
    for path in sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES):
        rel = path.relative_to(root)
        try:
            with Image.open(path) as im:
                im.verify()
            with Image.open(path) as im:
                im.load()
                width, height = im.size
        except (UnidentifiedImageError, OSError, SyntaxError) as exc:
            warnings.warn(f"skipping unreadable image {rel}: {exc}")
            skipped += 1
            continue
        entries.append(Entry(rel.with_suffix("").as_posix(), rel.as_posix(), width, height))
    if not entries:
        raise DataError(f"no readable images in {root}")
    return DatasetIndex(entries, str(root), {}, skipped)


def split(index: DatasetIndex, test_fraction=0.2, seed=0) -> DatasetIndex:
    if not 0.0 < test_fraction < 1.0:
        raise DataError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(index)
    n_test = int(round(test_fraction * n))
    rng = substream(seed, "split")
    test = set(rng.permutation(n)[:n_test].tolist())
    parts = {e.image_id: ("test" if i in test else "train") for i, e in enumerate(index.entries)}
    return replace(index, split=parts)


class ColorDataset:
    """Images of one index, resized and converted to normalized Lab planes.

    Planes are decoded on first access and cached, so repeated sampling from
    a task costs one decode per image.
    """

    def __init__(self, index: DatasetIndex, image_size=32, dtype=np.float32):
        self.index = index
        self.image_size = image_size
        self.dtype = dtype
        self._planes = {}

    def rgb(self, image_id):
        try:
            return load_rgb(self.index.path_of(image_id), self.image_size, id=image_id)
        except (OSError, UnidentifiedImageError) as exc:
            raise DataError(f"cannot read {image_id}: {exc}") from exc

    def pair(self, image_id):
        """(L, ab) as ``(1, H, W)`` and ``(2, H, W)`` normalized arrays."""
        hit = self._planes.get(image_id)
        if hit is None:
            L, ab = to_planes(normalize(rgb_to_lab(self.rgb(image_id))))
            hit = (L.astype(self.dtype), ab.astype(self.dtype))
            self._planes[image_id] = hit
        return hit

    def pairs(self, ids):
        return [self.pair(i) for i in ids]

    def require_train(self, ids):
        bad = [i for i in ids if self.index.split.get(i) != "train"]
        if bad:
            raise DataError(f"{len(bad)} ids are not in the train split, e.g. {bad[0]!r}")


def load_batch(task, dataset: ColorDataset, batch_size, rng):
    """Sample ``batch_size`` pairs uniformly with replacement from a task's members."""
    members = task.member_ids if hasattr(task, "member_ids") else list(task)
    if not members:
        raise DataError("cannot sample from an empty task")
    dataset.require_train(members)
    picks = rng.integers(len(members), size=batch_size)
    return dataset.pairs([members[i] for i in picks])
