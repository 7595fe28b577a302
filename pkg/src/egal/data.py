"""Synthetic annotated image pools with a planted spurious shortcut.

Each image is Gaussian background texture plus one bright lesion whose
shape carries the class (disc / square / annulus, equal pixel area so no
single intensity statistic separates classes). The expert mask is the
lesion footprint. A 6x6 corner tag is the shortcut: in the pool and seed
splits it appears with probability ``p_shortcut_train`` and its intensity
encodes the true class; in the test split it appears with probability
``p_shortcut_test`` and encodes a uniformly random class, so tag value
and label are independent there.

On disk: ``manifest.tsv`` (spec, splits, checksums) plus one raw grid
file per image and mask (magic, height, width as little-endian uint32,
then float64 little-endian values).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .explain import ExpertMask, write_pgm
from .tensor import ContractError

SHAPE_NAMES = ("disc", "square", "annulus")
TAG_SIZE = 6
TAG_OFFSET = 1
LESION_INTENSITY = 0.75
SPLITS = ("pool", "seed", "test")


class DatasetError(ValueError):
    """Problem with an on-disk dataset."""


class FormatVersionError(DatasetError):
    """Unknown format version or unrecognized manifest field."""


class TruncatedFileError(DatasetError):
    """A grid file ended before its promised payload."""


class ChecksumError(DatasetError):
    """Stored checksum does not match file contents."""


@dataclass(frozen=True)
class Provenance:
    shape: str
    tag_class: Optional[int]  # intensity code of the stamped tag, None if absent

    @property
    def shortcut_present(self) -> bool:
        return self.tag_class is not None


@dataclass(frozen=True)
class Sample:
    """One image with optional label and optional expert mask."""

    id: int
    image: np.ndarray  # (1,H,W) float64 in [0,1]
    label: Optional[int] = None
    esm: Optional[ExpertMask] = None
    provenance: Optional[Provenance] = None

    def unlabeled(self) -> "Sample":
        """Scoring view of a pool sample: mask available, label withheld."""
        return replace(self, label=None)


@dataclass(frozen=True)
class DatasetSpec:
    n_classes: int = 3
    image_size: int = 64
    n_pool: int = 600
    n_seed: int = 30
    n_test: int = 300
    noise: float = 0.2
    p_shortcut_train: float = 0.9
    p_shortcut_test: Optional[float] = None  # default 1/n_classes
    seed: int = 0
    shortcut: bool = True

    def resolved_test_p(self) -> float:
        return 1.0 / self.n_classes if self.p_shortcut_test is None else self.p_shortcut_test

    def validate(self) -> None:
        if not 2 <= self.n_classes <= len(SHAPE_NAMES):
            raise ContractError(f"n_classes must be 2..{len(SHAPE_NAMES)} "
                                f"(one lesion shape per class), got {self.n_classes}")
        for name, count in (("n_pool", self.n_pool), ("n_seed", self.n_seed),
                            ("n_test", self.n_test)):
            if count < self.n_classes:
                raise ContractError(f"{name}={count} is below the class count")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")
        for p in (self.p_shortcut_train, self.resolved_test_p()):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"shortcut probability {p} outside [0, 1]")


@dataclass
class PoolState:
    """Disjoint labeled / pool / test id sets plus the round counter."""

    labeled: list[int]
    pool: list[int]
    test: list[int]
    round: int = 0

    def check(self) -> None:
        s, u, t = set(self.labeled), set(self.pool), set(self.test)
        if s & u or s & t or u & t:
            raise ContractError("labeled, pool, and test ids must be pairwise disjoint")

    def acquire(self, ids: Sequence[int]) -> None:
        """Move a selected batch from the pool into the labeled set."""
        ids = list(ids)
        pool_set = set(self.pool)
        missing = [i for i in ids if i not in pool_set]
        if missing:
            raise ContractError(f"ids not in pool: {missing[:5]}")
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate ids in acquisition batch")
        self.labeled = sorted(self.labeled + ids)
        self.pool = sorted(pool_set - set(ids))
        self.round += 1
        self.check()


def _balanced_labels(count: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    """As-even-as-possible class counts, order shuffled."""
    base = np.arange(count) % n_classes
    return base[rng.permutation(count)]


def _lesion_mask(shape: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "disc":
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)
    if shape == "square":
        half = 0.886 * r  # matches the disc's area
        return ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)).astype(np.float64)
    if shape == "annulus":
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return (((0.75 * r) ** 2 <= d2) & (d2 <= (1.25 * r) ** 2)).astype(np.float64)
    raise ContractError(f"unknown lesion shape {shape!r}")


def _tag_codes(n_classes: int) -> np.ndarray:
    return np.linspace(0.4, 1.0, n_classes)


def generate(spec: DatasetSpec) -> "SyntheticDataset":
    """Build the full dataset with ground truth, deterministic in the seed."""
    spec.validate()
    size = spec.image_size
    rng = np.random.default_rng(spec.seed)

    r_lo, r_hi = 6.0 * size / 64.0, 9.0 * size / 64.0
    extent = int(np.ceil(1.25 * r_hi))  # annulus outer radius bounds every shape
    tag_end = TAG_OFFSET + TAG_SIZE
    center_lo = max(extent + tag_end + 1, extent + 1)
    center_hi = size - 2 - extent
    if center_hi < center_lo or r_lo < 2.0:
        raise ContractError(f"lesion cannot fit a {size}x{size} image "
                            f"clear of the {TAG_SIZE}x{TAG_SIZE} corner tag")

    plan = [("pool", spec.n_pool, spec.p_shortcut_train, False),
            ("seed", spec.n_seed, spec.p_shortcut_train, False),
            ("test", spec.n_test, spec.resolved_test_p(), True)]
    codes = _tag_codes(spec.n_classes)
    samples: list[Sample] = []
    split_of: dict[int, str] = {}
    next_id = 0
    for split, count, p_tag, random_code in plan:
        labels = _balanced_labels(count, spec.n_classes, rng)
        for label in labels:
            label = int(label)
            r = rng.uniform(r_lo, r_hi)
            cy = rng.uniform(center_lo, center_hi)
            cx = rng.uniform(center_lo, center_hi)
            mask = _lesion_mask(SHAPE_NAMES[label], cy, cx, r, size)
            img = np.abs(rng.normal(0.0, spec.noise, size=(size, size)))
            lesion = mask > 0
            img[lesion] = LESION_INTENSITY + rng.normal(0.0, spec.noise / 2.0,
                                                        size=int(lesion.sum()))
            tag_class: Optional[int] = None
            if spec.shortcut and rng.uniform() < p_tag:
                tag_class = int(rng.integers(spec.n_classes)) if random_code else label
                img[TAG_OFFSET:tag_end, TAG_OFFSET:tag_end] = codes[tag_class]
            np.clip(img, 0.0, 1.0, out=img)
            samples.append(Sample(id=next_id, image=img[None], label=label,
                                  esm=ExpertMask(mask),
                                  provenance=Provenance(SHAPE_NAMES[label], tag_class)))
            split_of[next_id] = split
            next_id += 1
    return SyntheticDataset(spec=spec, samples=samples, split_of=split_of)


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    samples: list[Sample]
    split_of: dict[int, str]

    def __post_init__(self):
        self._by_id = {s.id: s for s in self.samples}

    def ids(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise ContractError(f"unknown split {split!r}")
        return sorted(i for i, s in self.split_of.items() if s == split)

    def sample(self, sample_id: int) -> Sample:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise ContractError(f"unknown sample id {sample_id}") from None

    def oracle_annotate(self, sample_id: int) -> tuple[int, ExpertMask]:
        """Ground-truth label and mask, standing in for the expert."""
        s = self.sample(sample_id)
        return s.label, s.esm

    def annotated(self, sample_id: int) -> Sample:
        return self.sample(sample_id)

    def scoring_view(self, sample_id: int) -> Sample:
        return self.sample(sample_id).unlabeled()


def split(dataset: SyntheticDataset, spec: Optional[DatasetSpec] = None) -> PoolState:
    """Pool state with a class-balanced seed set (floor division; the
    remainder of the seed block goes back to the pool)."""
    spec = spec or dataset.spec
    per_class = spec.n_seed // spec.n_classes
    if per_class < 1:
        raise ContractError(f"seed size {spec.n_seed} cannot cover {spec.n_classes} classes")
    seed_ids = dataset.ids("seed")
    by_class: dict[int, list[int]] = {}
    for i in seed_ids:
        by_class.setdefault(dataset.sample(i).label, []).append(i)
    chosen: list[int] = []
    for c in range(spec.n_classes):
        have = sorted(by_class.get(c, []))
        if len(have) < per_class:
            raise ContractError(f"seed block has {len(have)} samples of class {c}, "
                                f"needs {per_class}")
        chosen.extend(have[:per_class])
    chosen = sorted(chosen)
    leftovers = sorted(set(seed_ids) - set(chosen))
    state = PoolState(labeled=chosen, pool=sorted(dataset.ids("pool") + leftovers),
                      test=dataset.ids("test"))
    state.check()
    return state


# ---------------------------------------------------------------------------
# on-disk format

_GRID_MAGIC = b"EGR1"
_MANIFEST_HEADER = "# egal dataset manifest v1"
_SPEC_KEYS = ("n_classes", "image_size", "n_pool", "n_seed", "n_test", "noise",
              "p_shortcut_train", "p_shortcut_test", "seed", "shortcut")
_COLUMNS = ("id", "split", "label", "shape", "tag_class", "image_sha256", "mask_sha256")


def _write_grid(path: Path, grid: np.ndarray) -> None:
    h, w = grid.shape
    with open(path, "wb") as fh:
        fh.write(_GRID_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(grid, dtype="<f8").tobytes())


def _read_grid(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != _GRID_MAGIC:
        raise FormatVersionError(f"{path.name}: not a grid file (bad magic)")
    h, w = struct.unpack("<II", raw[4:12])
    expect = 12 + 8 * h * w
    if len(raw) != expect:
        raise TruncatedFileError(f"{path.name}: expected {expect} bytes, found {len(raw)}")
    return np.frombuffer(raw[12:], dtype="<f8").reshape(h, w).astype(np.float64)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def save(dataset: SyntheticDataset, root) -> None:
    """Write manifest + per-sample grid files; byte-deterministic."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    spec = dataset.spec
    rows = []
    for s in sorted(dataset.samples, key=lambda s: s.id):
        img_path = root / "images" / f"{s.id}.bin"
        mask_path = root / "masks" / f"{s.id}.bin"
        _write_grid(img_path, s.image[0])
        _write_grid(mask_path, s.esm.grid)
        tag = s.provenance.tag_class if s.provenance else None
        rows.append((s.id, dataset.split_of[s.id], s.label, s.provenance.shape,
                     -1 if tag is None else tag, _sha256(img_path), _sha256(mask_path)))
    lines = [_MANIFEST_HEADER]
    for key in _SPEC_KEYS:
        lines.append(f"{key}\t{_fmt(getattr(spec, key))}")
    lines.append("\t".join(_COLUMNS))
    for row in rows:
        lines.append("\t".join(str(v) for v in row))
    (root / "manifest.tsv").write_text("\n".join(lines) + "\n")


def _parse_spec(pairs: dict[str, str]) -> DatasetSpec:
    unknown = set(pairs) - set(_SPEC_KEYS)
    if unknown:
        raise FormatVersionError(f"manifest has unknown field(s): {sorted(unknown)}")
    missing = set(_SPEC_KEYS) - set(pairs)
    if missing:
        raise FormatVersionError(f"manifest missing field(s): {sorted(missing)}")
    return DatasetSpec(
        n_classes=int(pairs["n_classes"]),
        image_size=int(pairs["image_size"]),
        n_pool=int(pairs["n_pool"]),
        n_seed=int(pairs["n_seed"]),
        n_test=int(pairs["n_test"]),
        noise=float(pairs["noise"]),
        p_shortcut_train=float(pairs["p_shortcut_train"]),
        p_shortcut_test=None if pairs["p_shortcut_test"] == "none"
        else float(pairs["p_shortcut_test"]),
        seed=int(pairs["seed"]),
        shortcut=pairs["shortcut"] == "1",
    )


def load(root) -> SyntheticDataset:
    """Read a dataset directory back, verifying checksums and format."""
    root = Path(root)
    manifest = root / "manifest.tsv"
    if not manifest.exists():
        raise DatasetError(f"no manifest.tsv under {root}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != _MANIFEST_HEADER:
        raise FormatVersionError("unrecognized manifest header")
    pairs: dict[str, str] = {}
    idx = 1
    while idx < len(lines) and "\t" in lines[idx] and lines[idx].split("\t")[0] != "id":
        key, value = lines[idx].split("\t", 1)
        pairs[key] = value
        idx += 1
    spec = _parse_spec(pairs)
    if idx >= len(lines) or tuple(lines[idx].split("\t")) != _COLUMNS:
        raise FormatVersionError("manifest sample table has unexpected columns")

    samples: list[Sample] = []
    split_of: dict[int, str] = {}
    for line in lines[idx + 1:]:
        if not line:
            continue
        sid_s, split_name, label_s, shape, tag_s, img_sha, mask_sha = line.split("\t")
        sid = int(sid_s)
        if split_name not in SPLITS:
            raise FormatVersionError(f"unknown split {split_name!r} for sample {sid}")
        img_path = root / "images" / f"{sid}.bin"
        mask_path = root / "masks" / f"{sid}.bin"
        for path, want in ((img_path, img_sha), (mask_path, mask_sha)):
            if not path.exists():
                raise DatasetError(f"missing grid file {path.name}")
            if _sha256(path) != want:
                raise ChecksumError(f"checksum mismatch for {path.name}")
        image = _read_grid(img_path)
        mask = _read_grid(mask_path)
        tag = int(tag_s)
        samples.append(Sample(id=sid, image=image[None], label=int(label_s),
                              esm=ExpertMask(mask),
                              provenance=Provenance(shape, None if tag < 0 else tag)))
        split_of[sid] = split_name
    return SyntheticDataset(spec=spec, samples=samples, split_of=split_of)


def export_sample_pgm(dataset: SyntheticDataset, sample_id: int, out_dir) -> list[Path]:
    """Image and mask graymaps for quick eyeballing."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    s = dataset.sample(sample_id)
    paths = [out_dir / f"sample_{sample_id}_image.pgm", out_dir / f"sample_{sample_id}_mask.pgm"]
    write_pgm(s.image[0], paths[0])
    write_pgm(s.esm.grid, paths[1])
    return paths
