"""Bag files, dataset manifests, splitting/few-shot sampling and synthetic data."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"VLMB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

SPLITS = ("train", "val", "test")


class BagFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


class ProtocolError(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, msg: str):
        super().__init__(f"{field}: {msg}")
        self.field = field


def derive_seed(master: int, label: str, *index: int) -> np.random.SeedSequence:
    """Named seed derivation: (master seed, component label, indices)."""
    return np.random.SeedSequence([int(master), zlib.crc32(label.encode()), *map(int, index)])


def rng_for(master: int, label: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, label, *index))


@dataclass
class Bag:
    id: str
    label: int
    H_l: np.ndarray
    H_h: np.ndarray

    def __post_init__(self):
        self.H_l = np.ascontiguousarray(self.H_l, dtype=np.float64)
        self.H_h = np.ascontiguousarray(self.H_h, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.H_l.shape[1]

    def validate(self) -> None:
        for name, H in (("H_l", self.H_l), ("H_h", self.H_h)):
            if H.ndim != 2 or H.shape[0] < 1 or H.shape[1] < 1:
                raise ValueError(f"bag {self.id}: {name} must be a nonempty matrix, got shape {H.shape}")
            if not np.all(np.isfinite(H)):
                raise ValueError(f"bag {self.id}: {name} contains non-finite values")
        if self.H_l.shape[1] != self.H_h.shape[1]:
            raise ValueError(f"bag {self.id}: feature dims differ ({self.H_l.shape[1]} vs {self.H_h.shape[1]})")
        if self.label < 0:
            raise ValueError(f"bag {self.id}: negative label")

    def __eq__(self, other):
        if not isinstance(other, Bag):
            return NotImplemented
        return (self.id == other.id and self.label == other.label
                and np.array_equal(self.H_l, other.H_l) and np.array_equal(self.H_h, other.H_h))


def encode_bag(bag: Bag) -> bytes:
    bag.validate()
    n_l, d = bag.H_l.shape
    n_h = bag.H_h.shape[0]
    header = _HEADER.pack(MAGIC, VERSION, bag.label, d, n_l, n_h)
    return header + bag.H_l.astype("<f8").tobytes() + bag.H_h.astype("<f8").tobytes()


def decode_bag(buf: bytes, bag_id: str = "") -> Bag:
    if len(buf) < _HEADER.size:
        raise BagFormatError("truncated header", len(buf))
    magic, version, label, d, n_l, n_h = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise BagFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise BagFormatError(f"unsupported version {version}", 4)
    if d < 1 or n_l < 1 or n_h < 1:
        raise BagFormatError(f"empty matrix in header (d={d}, N_l={n_l}, N_h={n_h})", 12)
    off = _HEADER.size
    mats = []
    for name, n in (("H_l", n_l), ("H_h", n_h)):
        nbytes = n * d * 8
        if len(buf) < off + nbytes:
            raise BagFormatError(f"truncated {name}: need {nbytes} bytes, have {len(buf) - off}", len(buf))
        mats.append(np.frombuffer(buf, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64))
        off += nbytes
    if len(buf) != off:
        raise BagFormatError(f"{len(buf) - off} trailing bytes", off)
    return Bag(bag_id, int(label), mats[0], mats[1])


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_bag(bag: Bag, path) -> None:
    atomic_write_bytes(path, encode_bag(bag))


def read_bag(path, bag_id: str | None = None) -> Bag:
    path = Path(path)
    return decode_bag(path.read_bytes(), bag_id if bag_id is not None else path.stem)


@dataclass
class BagEntry:
    id: str
    path: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    class_names: list[str]
    d: int
    seed: int
    bags: list[BagEntry]
    root: Path = field(default=Path("."), compare=False)
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def load(self, entry: BagEntry) -> Bag:
        bag = read_bag(self.root / entry.path, entry.id)
        if bag.d != self.d:
            raise ValueError(f"bag {entry.id}: feature dim {bag.d} != manifest d {self.d}")
        if bag.label != entry.label:
            raise ValueError(f"bag {entry.id}: file label {bag.label} != manifest label {entry.label}")
        return bag

    def load_all(self) -> dict[str, Bag]:
        return {e.id: self.load(e) for e in self.bags}

    def to_json(self) -> dict:
        doc = {
            "class_names": list(self.class_names),
            "d": self.d,
            "seed": self.seed,
            "bags": [{"id": e.id, "path": e.path, "label": e.label, "split": e.split} for e in self.bags],
        }
        doc.update(self.extra)
        return doc

    def save(self, path) -> None:
        path = Path(path)
        atomic_write_bytes(path, (json.dumps(self.to_json(), indent=2) + "\n").encode())

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        try:
            bags = [BagEntry(b["id"], b["path"], int(b["label"]), b.get("split", "train")) for b in doc["bags"]]
            extra = {k: v for k, v in doc.items() if k not in ("class_names", "d", "seed", "bags")}
            m = cls(list(doc["class_names"]), int(doc["d"]), int(doc["seed"]), bags, path.parent, extra)
        except (KeyError, TypeError) as exc:
            raise ConfigError("manifest", f"malformed manifest {path}: {exc}") from exc
        for e in m.bags:
            if not 0 <= e.label < m.n_classes:
                raise ConfigError("manifest", f"bag {e.id} has label {e.label} outside {m.n_classes} classes")
            if not (m.root / e.path).exists():
                raise ConfigError("manifest", f"bag file missing: {m.root / e.path}")
        return m


def split_counts(n: int, ratio=(4, 3, 3)) -> tuple[int, int, int]:
    """Largest-remainder apportionment of ``n`` items to train/val/test."""
    total = sum(ratio)
    exact = [n * r / total for r in ratio]
    counts = [math.floor(x) for x in exact]
    rem = n - sum(counts)
    for i in sorted(range(3), key=lambda i: (-(exact[i] - counts[i]), i))[:rem]:
        counts[i] += 1
    return tuple(counts)


def split_dataset(entries: list[BagEntry], n_classes: int, ratio=(4, 3, 3), seed: int = 0) -> dict[str, str]:
    """Stratified random split; returns ``{bag_id: split}``."""
    by_class: dict[int, list[str]] = {c: [] for c in range(n_classes)}
    for e in entries:
        by_class[e.label].append(e.id)
    assignment = {}
    for c in range(n_classes):
        ids = sorted(by_class[c])
        if not ids:
            raise ProtocolError(f"class {c} has no bags to split")
        rng = rng_for(seed, "split", c)
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_tr, n_va, _ = split_counts(len(ids), ratio)
        for i, bid in enumerate(ids):
            assignment[bid] = "train" if i < n_tr else "val" if i < n_tr + n_va else "test"
    return assignment


def few_shot_sample(train: list[BagEntry], n_classes: int, shots: int, seed: int = 0,
                    class_names: list[str] | None = None) -> list[BagEntry]:
    """Exactly ``shots`` bags per class, uniform without replacement."""
    out = []
    for c in range(n_classes):
        pool = sorted((e for e in train if e.label == c), key=lambda e: e.id)
        if len(pool) < shots:
            name = class_names[c] if class_names else str(c)
            raise ProtocolError(f"class {name!r} has {len(pool)} training bags, fewer than {shots} shots")
        pick = rng_for(seed, "shots", c).choice(len(pool), size=shots, replace=False)
        out.extend(pool[i] for i in sorted(pick))
    return out


# ---------------------------------------------------------------- synthetic

SCALE_MODES = ("low_only", "high_only", "split")

DEFAULT_CLASS_NAMES = {
    2: ["lung adenocarcinoma", "lung squamous cell carcinoma"],
    3: ["clear cell renal cell carcinoma", "papillary renal cell carcinoma",
        "chromophobe renal cell carcinoma"],
}


@dataclass
class SynthConfig:
    """Planted-direction dual-scale bag generator settings.

    ``noise_std`` is the RMS norm of the isotropic Gaussian noise vector
    (per-entry std ``noise_std / sqrt(d)``), so it is directly comparable to
    the unit-norm signal directions.
    """

    n_classes: int = 3
    d: int = 64
    n_prototypes_true: int = 1
    patches_low: tuple[int, int] = (8, 16)
    high_factor: int = 4
    scale_mode: str = "split"
    noise_std: float = 0.8
    signal_fraction: float = 0.2
    bags_per_class: int = 40
    seed: int = 0
    class_names: list[str] | None = None

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ConfigError("n_classes", f"must be >= 2, got {self.n_classes}")
        if self.d < 4:
            raise ConfigError("d", f"must be >= 4, got {self.d}")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise ConfigError("noise_std", f"must be a finite value >= 0, got {self.noise_std}")
        if not 0 < self.signal_fraction <= 1:
            raise ConfigError("signal_fraction", f"must lie in (0, 1], got {self.signal_fraction}")
        if self.n_prototypes_true < 1:
            raise ConfigError("n_prototypes_true", "must be >= 1")
        lo, hi = self.patches_low
        if not 1 <= lo <= hi:
            raise ConfigError("patches_low", f"need 1 <= min <= max, got {self.patches_low}")
        if self.high_factor < 1:
            raise ConfigError("high_factor", "must be >= 1")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError("scale_mode", f"must be one of {SCALE_MODES}, got {self.scale_mode!r}")
        if self.scale_mode == "split" and self.n_classes < 3:
            raise ConfigError("scale_mode", "split mode needs n_classes >= 3 so each scale can confuse a different pair")
        if self.bags_per_class < 1:
            raise ConfigError("bags_per_class", "must be >= 1")
        if self.class_names is not None and len(self.class_names) != self.n_classes:
            raise ConfigError("class_names", f"expected {self.n_classes} names, got {len(self.class_names)}")

    def names(self) -> list[str]:
        if self.class_names:
            return list(self.class_names)
        return DEFAULT_CLASS_NAMES.get(self.n_classes, [f"class {c}" for c in range(self.n_classes)])

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown synth config field")
        doc = dict(doc)
        if "patches_low" in doc:
            doc["patches_low"] = tuple(doc["patches_low"])
        cfg = cls(**doc)
        cfg.validate()
        return cfg


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def planted_directions(cfg: SynthConfig) -> dict[str, np.ndarray]:
    """Per-scale (C, n_prototypes_true, d) unit signal directions.

    In ``split`` mode the low scale gives classes 0 and 1 the same direction
    and the high scale gives classes C-2 and C-1 the same direction. A scale
    without signal gets ``None``.
    """
    rng = rng_for(cfg.seed, "directions")
    C, K, d = cfg.n_classes, cfg.n_prototypes_true, cfg.d
    low = _unit(rng.standard_normal((C, K, d)))
    high = _unit(rng.standard_normal((C, K, d)))
    if cfg.scale_mode == "split":
        low[1] = low[0]
        high[C - 1] = high[C - 2]
    return {
        "low": None if cfg.scale_mode == "high_only" else low,
        "high": None if cfg.scale_mode == "low_only" else high,
    }


def _make_patches(rng, n: int, dirs: np.ndarray | None, label: int, cfg: SynthConfig) -> np.ndarray:
    sigma = cfg.noise_std / math.sqrt(cfg.d)
    H = rng.standard_normal((n, cfg.d)) * sigma
    if dirs is not None:
        n_sig = max(1, round(cfg.signal_fraction * n))
        rows = rng.choice(n, size=n_sig, replace=False)
        which = rng.integers(0, dirs.shape[1], size=n_sig)
        H[rows] += dirs[label, which]
    return H


def synth_bag(cfg: SynthConfig, index: int, label: int, dirs=None) -> Bag:
    if dirs is None:
        dirs = planted_directions(cfg)
    rng = rng_for(cfg.seed, "bag", index)
    lo, hi = cfg.patches_low
    n_l = int(rng.integers(lo, hi + 1))
    n_h = n_l * cfg.high_factor
    H_l = _make_patches(rng, n_l, dirs["low"], label, cfg)
    H_h = _make_patches(rng, n_h, dirs["high"], label, cfg)
    return Bag(f"bag_{index:05d}", label, H_l, H_h)


def nearest_direction_predict(bag: Bag, dirs: dict, scales=("low", "high")) -> int:
    """Oracle classifier knowing the planted directions (lowest index on ties)."""
    C = next(v for v in dirs.values() if v is not None).shape[0]
    score = np.zeros(C)
    for s in scales:
        D = dirs[s]
        if D is None:
            continue
        H = bag.H_l if s == "low" else bag.H_h
        score += (H.mean(axis=0) @ D.reshape(-1, D.shape[-1]).T).reshape(C, -1).max(axis=1)
    # confused pairs share directions exactly; snap float noise so ties go low
    score = np.round(score, 12)
    return int(np.argmax(score))


def generate_bags(cfg: SynthConfig) -> list[Bag]:
    cfg.validate()
    dirs = planted_directions(cfg)
    bags = []
    for c in range(cfg.n_classes):
        for j in range(cfg.bags_per_class):
            bags.append(synth_bag(cfg, c * cfg.bags_per_class + j, c, dirs))
    return bags


def oracle_accuracies(cfg: SynthConfig, bags: list[Bag]) -> dict[str, float]:
    dirs = planted_directions(cfg)
    out = {}
    for key, scales in (("low", ("low",)), ("high", ("high",)), ("dual", ("low", "high"))):
        if all(dirs[s] is None for s in scales):
            continue
        hits = [nearest_direction_predict(b, dirs, scales) == b.label for b in bags]
        out[key] = float(np.mean(hits))
    return out


def generate_synthetic(cfg: SynthConfig, out_dir) -> DatasetManifest:
    """Write bag files plus ``manifest.json`` under ``out_dir``."""
    cfg.validate()
    out_dir = Path(out_dir)
    bags = generate_bags(cfg)
    entries = []
    for bag in bags:
        rel = f"bags/{bag.id}.vlmb"
        write_bag(bag, out_dir / rel)
        entries.append(BagEntry(bag.id, rel, bag.label))
    assignment = split_dataset(entries, cfg.n_classes, seed=cfg.seed)
    for e in entries:
        e.split = assignment[e.id]
    oracle = oracle_accuracies(cfg, bags)
    if cfg.scale_mode == "split":
        C = cfg.n_classes
        ceiling = (C - 1) / C
        log.info("nearest-direction oracle accuracy: %s (single-scale ceiling %.3f)", oracle, ceiling)
    manifest = DatasetManifest(cfg.names(), cfg.d, cfg.seed, entries, out_dir,
                               {"synth": _synth_doc(cfg), "oracle_accuracy": oracle})
    manifest.save(out_dir / "manifest.json")
    return manifest


def _synth_doc(cfg: SynthConfig) -> dict:
    doc = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    doc["patches_low"] = list(cfg.patches_low)
    doc["class_names"] = cfg.names()
    return doc
