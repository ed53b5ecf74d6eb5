"""Corpus formats and the synthetic attributed-scenes generator.

On disk a corpus split is a JSON manifest plus one ``RGRID1`` binary per image::

    magic "RGRID1" | u32 P | u32 d_feat | P*d_feat little-endian f32, row-major

Manifest::

    {"split": "train", "d_feat": 32, "normalization": "...",
     "items": [{"image_id": "...", "feature_file": "features/x.rgrid",
                "captions": ["...", ...]}, ...]}

``feature_file`` paths are relative to the manifest; an item may instead carry
an inline ``"grid"`` (list of rows).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import IdfTable
from .retrieval import Datastore
from .tokenizer import NORMALIZATION, normalize_caption

GRID_MAGIC = b"RGRID1"
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    """Malformed manifest or feature file."""


@dataclass
class Item:
    image_id: str
    grid: np.ndarray
    captions: list[str]


@dataclass
class CorpusSplit:
    name: str
    d_feat: int
    items: list[Item]
    normalization: str = NORMALIZATION

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.image_id for it in self.items]

    def references(self) -> dict[str, list[str]]:
        return {it.image_id: list(it.captions) for it in self.items}

    def checksum(self) -> str:
        """Content hash over ids, captions and the f32 grid bytes."""
        h = hashlib.sha256()
        h.update(f"{self.name}\n{self.d_feat}\n".encode())
        for it in self.items:
            h.update(it.image_id.encode() + b"\n")
            h.update("\n".join(it.captions).encode() + b"\n")
            h.update(_grid_bytes(it.grid))
        return h.hexdigest()


# -- RGRID1 -----------------------------------------------------------------------
def _grid_bytes(grid: np.ndarray) -> bytes:
    return np.ascontiguousarray(grid, dtype="<f4").tobytes()


def write_grid(path, grid) -> None:
    g = np.asarray(grid)
    if g.ndim != 2 or g.shape[0] < 1:
        raise CorpusError(f"grid must be [P, d_feat] with P >= 1, got {g.shape}")
    Path(path).write_bytes(GRID_MAGIC + struct.pack("<II", *g.shape) + _grid_bytes(g))


def read_grid(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise CorpusError(f"missing feature file: {path}")
    buf = path.read_bytes()
    if buf[:6] != GRID_MAGIC:
        raise CorpusError(f"{path}: bad magic, expected RGRID1")
    p, d = struct.unpack_from("<II", buf, 6)
    if len(buf) != 14 + 4 * p * d:
        raise CorpusError(f"{path}: truncated grid (P={p}, d_feat={d})")
    return np.frombuffer(buf, dtype="<f4", offset=14).reshape(p, d).astype(np.float64)


# -- manifests ------------------------------------------------------------------------
def ingest(manifest_path) -> CorpusSplit:
    """Load and validate one split; captions are normalized here, once."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise CorpusError(f"missing manifest: {manifest_path}")
    try:
        raw = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise CorpusError(f"{manifest_path}: invalid JSON ({e})") from None
    for key in ("split", "d_feat", "items"):
        if key not in raw:
            raise CorpusError(f"{manifest_path}: manifest lacks {key!r}")
    d_feat = int(raw["d_feat"])
    seen: set[str] = set()
    items = []
    for entry in raw["items"]:
        image_id = str(entry.get("image_id", ""))
        if not image_id:
            raise CorpusError(f"{manifest_path}: item without image_id")
        if image_id in seen:
            raise CorpusError(f"duplicate image_id {image_id!r}")
        seen.add(image_id)
        if "grid" in entry:
            grid = np.asarray(entry["grid"], dtype=np.float32).astype(np.float64)
        elif "feature_file" in entry:
            grid = read_grid(manifest_path.parent / entry["feature_file"])
        else:
            raise CorpusError(f"item {image_id!r} has neither feature_file nor grid")
        if grid.ndim != 2 or grid.shape[1] != d_feat:
            raise CorpusError(f"item {image_id!r}: feature dim {grid.shape[-1]} != manifest d_feat {d_feat}")
        captions = [normalize_caption(c) for c in entry.get("captions", [])]
        captions = [c for c in captions if c]
        if not captions:
            raise CorpusError(f"item {image_id!r} has no captions")
        items.append(Item(image_id, grid, captions))
    return CorpusSplit(str(raw["split"]), d_feat, items, raw.get("normalization", NORMALIZATION))


def persist(split: CorpusSplit, out_dir) -> Path:
    """Write ``manifest_<split>.json`` and per-image RGRID1 files; returns the manifest path."""
    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for it in split.items:
        rel = f"features/{_safe(it.image_id)}.rgrid"
        write_grid(out_dir / rel, it.grid)
        entries.append({"image_id": it.image_id, "feature_file": rel, "captions": it.captions})
    manifest = {"split": split.name, "d_feat": split.d_feat, "normalization": split.normalization, "items": entries}
    path = out_dir / f"manifest_{split.name}.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def _safe(image_id: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in image_id)


# -- split enforcement ----------------------------------------------------------------
def build_datastore(train: CorpusSplit, aggregation: str = "mean") -> Datastore:
    """The retrieval memory is built from the training split only."""
    if train.name != "train":
        raise CorpusError(f"datastore must be built from the train split, got {train.name!r}")
    return Datastore.from_grids(((it.image_id, it.grid, it.captions) for it in train), aggregation)


def training_idf(train: CorpusSplit) -> IdfTable:
    if train.name != "train":
        raise CorpusError(f"training idf must come from the train split, got {train.name!r}")
    return IdfTable.build(it.captions for it in train)


def audit_split_isolation(store: Datastore, idf_source: CorpusSplit, held_out: Sequence[CorpusSplit]) -> None:
    """Raise if any held-out image id leaked into the datastore or the idf corpus."""
    used = set(store.ids) | set(idf_source.ids)
    for split in held_out:
        leak = used & set(split.ids)
        if leak:
            raise CorpusError(f"{split.name} items leaked into training resources: {sorted(leak)[:5]}")


# -- synthetic attributed scenes -----------------------------------------------------
DEFAULT_AXES = {
    "color": ["red", "blue", "green", "yellow", "white", "black"],
    "object": ["cube", "ball", "cone", "ring", "box", "star"],
    "count": ["one", "two", "three"],
}
SYNONYMS = {
    "cube": ["cube", "block"],
    "ball": ["ball", "sphere"],
    "cone": ["cone", "pylon"],
    "ring": ["ring", "hoop"],
    "one": ["one", "a single"],
    "two": ["two", "a pair of"],
    "three": ["three", "a trio of"],
}
PLACES = [
    "kitchen", "garden", "beach", "office", "forest", "station",
    "library", "harbor", "market", "airport", "museum", "meadow",
]
LANDMARK_ADJECTIVES = ["old", "wooden", "broken", "tall", "small", "painted", "rusty", "stone"]
LANDMARK_NOUNS = ["bench", "fountain", "lamp", "statue", "fence", "tree", "door", "clock"]
NEAR = ["next to", "beside", "near"]
TEMPLATES = [
    "{count} {color} {object} in the {place} {near} {landmark}",
    "there is {count} {color} {object} {near} {landmark} in the {place}",
    "{count} {color} {object} lying in the {place} {near} {landmark}",
    "a {place} with {count} {color} {object} {near} {landmark}",
    "{count} {color} {object} seen in a {place} {near} {landmark}",
    "in the {place} there is {count} {color} {object} {near} {landmark}",
]


@dataclass
class SynthSpec:
    """Attributed scenes: every combination of ``axes`` values is a scene type.

    Each scene type also gets a place word and a landmark phrase drawn from
    fixed random tables keyed by the whole combination.  Knowing them requires
    recognising the exact combination, which is rare per type (a long tail),
    while retrieved captions of same-type images carry them verbatim.
    """

    axes: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_AXES.items()})
    items_per_combo: int = 4
    captions_per_item: int = 5
    grid_size: int = 4
    d_feat: int = 32
    noise: float = 0.1
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.75, 0.125, 0.125)
    places: list[str] = field(default_factory=lambda: list(PLACES))
    landmark_adjectives: list[str] = field(default_factory=lambda: list(LANDMARK_ADJECTIVES))
    landmark_nouns: list[str] = field(default_factory=lambda: list(LANDMARK_NOUNS))

    def __post_init__(self):
        if self.items_per_combo < 1 or self.captions_per_item < 1 or self.grid_size < 1 or self.d_feat < 1:
            raise CorpusError("synth counts must be >= 1")
        if self.noise < 0:
            raise CorpusError("noise must be >= 0")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise CorpusError("split fractions must sum to 1")
        if not self.places or not self.landmark_adjectives or not self.landmark_nouns:
            raise CorpusError("place and landmark pools must be non-empty")

    def combos(self) -> list[dict[str, str]]:
        names = list(self.axes)
        return [dict(zip(names, vals)) for vals in itertools.product(*(self.axes[n] for n in names))]


def _plural(word: str, count: str | None) -> str:
    if count in (None, "one"):
        return word
    return word + ("es" if word.endswith(("s", "x", "ch")) else "s")


def _render(template: str, attrs: dict[str, str], place: str, landmark: str, rng) -> str:
    values = {}
    for name, value in attrs.items():
        choices = SYNONYMS.get(value, [value])
        values[name] = choices[int(rng.integers(len(choices)))]
    if "object" in values:
        values["object"] = _plural(values["object"], attrs.get("count"))
    values.setdefault("count", "some")
    values.setdefault("color", "")
    values.setdefault("object", "thing")
    near = NEAR[int(rng.integers(len(NEAR)))]
    text = template.format(place=place, landmark=landmark, near=near, **values)
    extra = [f"{n} {v}" for n, v in values.items() if n not in ("count", "color", "object")]
    if extra:
        text += " with " + " and ".join(extra)
    return " ".join(text.split())


def synth_generate(spec: SynthSpec) -> dict[str, CorpusSplit]:
    """Deterministic expansion of ``spec`` into train/val/test splits."""
    rng = np.random.default_rng(spec.seed)
    scale = 1.0 / np.sqrt(spec.d_feat)
    vectors = {
        (name, value): rng.normal(0.0, scale * 2.0, spec.d_feat) for name, values in spec.axes.items() for value in values
    }
    combos = spec.combos()
    combo_vectors = rng.normal(0.0, scale * 2.0, (len(combos), spec.d_feat))
    place_of = [spec.places[int(rng.integers(len(spec.places)))] for _ in combos]
    landmark_of = [
        "a {} {}".format(
            spec.landmark_adjectives[int(rng.integers(len(spec.landmark_adjectives)))],
            spec.landmark_nouns[int(rng.integers(len(spec.landmark_nouns)))],
        )
        for _ in combos
    ]
    items = []
    for ci, attrs in enumerate(combos):
        # shared attribute directions plus a combination-specific one, at a common norm
        # so inner-product retrieval has no hubs
        base = sum(vectors[(n, v)] for n, v in attrs.items()) + combo_vectors[ci]
        base *= 2.0 / np.linalg.norm(base)
        for j in range(spec.items_per_combo):
            grid = base[None, :] + spec.noise * rng.normal(size=(spec.grid_size, spec.d_feat))
            grid = grid.astype(np.float32).astype(np.float64)  # stored precision
            caps = [
                normalize_caption(_render(TEMPLATES[int(rng.integers(len(TEMPLATES)))], attrs, place_of[ci], landmark_of[ci], rng))
                for _ in range(spec.captions_per_item)
            ]
            image_id = "syn_" + "_".join(attrs.values()) + f"_{j:03d}"
            items.append(Item(image_id, grid, caps))
    order = rng.permutation(len(items))
    n_train = int(round(spec.split_fractions[0] * len(items)))
    n_val = int(round(spec.split_fractions[1] * len(items)))
    parts = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
    return {
        name: CorpusSplit(name, spec.d_feat, [items[i] for i in sorted(idx)]) for name, idx in parts.items()
    }


def attributes_of(image_id: str) -> tuple[str, ...]:
    """Scene type encoded in a synthetic image id."""
    return tuple(image_id.split("_")[1:-1])


def write_synth(spec: SynthSpec, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    splits = synth_generate(spec)
    paths = {name: persist(split, out_dir) for name, split in splits.items()}
    (out_dir / "synth_spec.json").write_text(json.dumps(asdict(spec), indent=1) + "\n")
    return paths
