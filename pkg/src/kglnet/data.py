"""Patch-pair datasets: the on-disk pack format, loaders, a synthetic
cross-spectral generator, and training batch iteration.

Pack layout (one directory per pack)::

    manifest.json   format marker plus name/patch_size/channels/spectra/
                    n_pairs/split/subset/provenance
    a.bin           n_pairs * 64 * 64 unsigned bytes, row-major, spectrum A
    b.bin           same for spectrum B; row i of both stores is a positive pair
    labels.csv      optional evaluation pairs: "idx_a,idx_b,label" with header

Patch bytes are the canonical storage; loaders expose them as float32 in
[0, 1] via value = byte / 255. Training consumes aligned positives only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    PackFormatError,
    PackMissingFileError,
    PackSizeError,
)

PACK_FORMAT = "kglnet-patchpack-v1"
PATCH_SIZE = 64

_MANIFEST_KEYS = ("format", "name", "patch_size", "channels", "spectra", "n_pairs", "split")


@dataclass
class PatchPack:
    """An aligned cross-spectral patch-pair dataset."""

    name: str
    spectra: tuple[str, str]
    n_pairs: int
    split: str
    a: np.ndarray  # [n_pairs, 64, 64] uint8
    b: np.ndarray  # [n_pairs, 64, 64] uint8
    subset: str = ""
    provenance: str = ""
    labels: np.ndarray | None = None  # [m, 3] int64 rows (idx_a, idx_b, label)
    patch_size: int = PATCH_SIZE
    channels: int = 1
    source: Path | None = None

    def __post_init__(self):
        for store, spectrum in ((self.a, "a"), (self.b, "b")):
            if store.shape != (self.n_pairs, self.patch_size, self.patch_size):
                raise PackSizeError(
                    f"store '{spectrum}' has shape {store.shape}, expected "
                    f"({self.n_pairs}, {self.patch_size}, {self.patch_size})"
                )
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            bad = (labels[:, 2] != 0) & (labels[:, 2] != 1)
            if bad.any():
                raise DataError("evaluation labels must be 0 or 1")
            if labels[:, :2].min(initial=0) < 0 or labels[:, :2].max(initial=-1) >= self.n_pairs:
                raise DataError("evaluation pair indices out of range")
            self.labels = labels

    def patches_float(self, spectrum: str, indices) -> np.ndarray:
        """Patches as float32 [len(indices), 1, P, P] mapped to [0, 1]."""
        store = self.a if spectrum == "a" else self.b
        out = store[np.asarray(indices)].astype(np.float32) / 255.0
        return out[:, None, :, :]

    def digest(self) -> str:
        """Content hash over both stores and the label list."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.a).tobytes())
        h.update(np.ascontiguousarray(self.b).tobytes())
        if self.labels is not None:
            h.update(np.ascontiguousarray(self.labels).tobytes())
        return h.hexdigest()


def save_patch_pack(pack: PatchPack, path) -> Path:
    """Write a pack directory; byte-deterministic for identical content."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": PACK_FORMAT,
        "name": pack.name,
        "patch_size": pack.patch_size,
        "channels": pack.channels,
        "spectra": list(pack.spectra),
        "n_pairs": pack.n_pairs,
        "split": pack.split,
        "subset": pack.subset,
        "provenance": pack.provenance,
    }
    (root / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    (root / "a.bin").write_bytes(np.ascontiguousarray(pack.a).tobytes())
    (root / "b.bin").write_bytes(np.ascontiguousarray(pack.b).tobytes())
    if pack.labels is not None:
        lines = ["idx_a,idx_b,label"]
        lines += [f"{ia},{ib},{lb}" for ia, ib, lb in pack.labels.tolist()]
        (root / "labels.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return root


def load_patch_pack(path) -> PatchPack:
    """Load a pack directory with lazily mapped patch stores."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise PackFormatError(f"{root} is not a patch pack: missing manifest.json")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise PackFormatError(f"unreadable manifest in {root}: {exc}") from exc
    if manifest.get("format") != PACK_FORMAT:
        raise PackFormatError(
            f"unsupported pack format {manifest.get('format')!r}, expected {PACK_FORMAT!r}"
        )
    missing = [k for k in _MANIFEST_KEYS if k not in manifest]
    if missing:
        raise PackFormatError(f"manifest missing keys: {', '.join(missing)}")

    n = int(manifest["n_pairs"])
    p = int(manifest["patch_size"])
    stores = {}
    for stem in ("a", "b"):
        store_path = root / f"{stem}.bin"
        if not store_path.is_file():
            raise PackMissingFileError(f"missing patch store {store_path}")
        expected = n * p * p
        actual = store_path.stat().st_size
        if actual != expected:
            raise PackSizeError(
                f"{store_path} holds {actual} bytes, expected {expected} "
                f"({n} patches of {p}x{p})"
            )
        stores[stem] = np.memmap(store_path, dtype=np.uint8, mode="r", shape=(n, p, p))

    labels = None
    labels_path = root / "labels.csv"
    if labels_path.is_file():
        labels = _read_labels_csv(labels_path)

    return PatchPack(
        name=manifest["name"],
        spectra=tuple(manifest["spectra"]),
        n_pairs=n,
        split=manifest["split"],
        a=stores["a"],
        b=stores["b"],
        subset=manifest.get("subset", ""),
        provenance=manifest.get("provenance", ""),
        labels=labels,
        patch_size=p,
        channels=int(manifest["channels"]),
        source=root,
    )


def _read_labels_csv(path: Path) -> np.ndarray:
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    if not lines or lines[0].replace(" ", "") != "idx_a,idx_b,label":
        raise PackFormatError(f"{path} must start with header 'idx_a,idx_b,label'")
    if len(lines) == 1:
        return np.zeros((0, 3), dtype=np.int64)
    try:
        rows = [[int(v) for v in line.split(",")] for line in lines[1:]]
    except ValueError as exc:
        raise PackFormatError(f"non-integer entry in {path}: {exc}") from exc
    arr = np.asarray(rows, dtype=np.int64)
    if arr.shape[1] != 3:
        raise PackFormatError(f"{path} rows must have exactly 3 columns")
    return arr


# ---------------------------------------------------------------------------
# Synthetic cross-spectral generator


_SCENE_SIZE = 128
_OFFSET_STRIDE = 8
_OFFSET_GRID = (_SCENE_SIZE - PATCH_SIZE) // _OFFSET_STRIDE + 1  # 9x9 crop positions


@dataclass(frozen=True)
class SynthConfig:
    """Controls the procedural cross-spectral pair generator.

    Pairs are 64x64 crops of a library of larger procedural scenes, with
    ``pairs_per_scene`` crops (at distinct grid offsets) taken from each
    scene. Crops of the same scene overlap, so the non-matching pool has
    the difficulty skew of real patch data: most negatives are trivially
    different, a minority are near-duplicates. ``severity`` scales the
    pixel-level nonlinearity between the two spectra (regional intensity
    inversions/gamma curves plus blur); ``noise`` is the additive Gaussian
    standard deviation in [0, 1] intensity units;
    ``hard_negative_fraction`` sets the share of evaluation negatives
    drawn from the same scene as their anchor. Generation is a pure
    function of the config.
    """

    n_pairs: int
    octaves: int = 3
    severity: float = 0.5
    noise: float = 0.02
    seed: int = 0
    pairs_per_scene: int = 8
    hard_negative_fraction: float = 0.5
    name: str = "synthetic"
    split: str = "train"
    subset: str = "synthetic"

    def __post_init__(self):
        if self.n_pairs < 1:
            raise ConfigError("n_pairs must be positive")
        if not 1 <= self.octaves <= 6:
            raise ConfigError("octaves must be in [1, 6]")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError("severity must be in [0, 1]")
        if not 0.0 <= self.noise <= 1.0:
            raise ConfigError("noise must be in [0, 1]")
        if not 1 <= self.pairs_per_scene <= _OFFSET_GRID**2:
            raise ConfigError(f"pairs_per_scene must be in [1, {_OFFSET_GRID**2}]")
        if not 0.0 <= self.hard_negative_fraction <= 1.0:
            raise ConfigError("hard_negative_fraction must be in [0, 1]")


def _value_noise(rng: np.random.Generator, n: int, res: int, size: int) -> np.ndarray:
    """Bilinear interpolation of a random lattice, vectorized over n patches."""
    nodes = rng.random((n, res, res))
    t = np.linspace(0.0, res - 1.0, size)
    i0 = np.minimum(t.astype(np.int64), res - 2)
    frac = t - i0
    w0, w1 = 1.0 - frac, frac
    rows0 = nodes[:, i0, :]
    rows1 = nodes[:, i0 + 1, :]
    vert = rows0 * w0[None, :, None] + rows1 * w1[None, :, None]
    cols0 = vert[:, :, i0]
    cols1 = vert[:, :, i0 + 1]
    return cols0 * w0[None, None, :] + cols1 * w1[None, None, :]


def _blur(fields: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 5-tap Gaussian with reflect padding."""
    d = np.arange(-2, 3, dtype=np.float64)
    taps = np.exp(-0.5 * (d / sigma) ** 2)
    taps /= taps.sum()
    out = np.pad(fields, ((0, 0), (2, 2), (0, 0)), mode="reflect")
    out = sum(taps[k] * out[:, k : k + fields.shape[1], :] for k in range(5))
    out = np.pad(out, ((0, 0), (0, 0), (2, 2)), mode="reflect")
    out = sum(taps[k] * out[:, :, k : k + fields.shape[2]] for k in range(5))
    return out


def generate_synthetic(config: SynthConfig) -> PatchPack:
    """Build a deterministic synthetic pack.

    Scenes are multi-octave value-noise canvases; spectrum B applies a
    severity-scaled spectral distortion to each scene (smooth regions get
    an inverted or monotone gamma remap, then blur and additive noise).
    Each pair is one crop window taken from both spectra of its scene, so
    at severity 0 and noise 0, B equals A byte for byte. Crop offsets
    within a scene are distinct grid cells, at least one feature-map cell
    apart.

    The evaluation list pairs every positive with one mismatched
    negative; a ``hard_negative_fraction`` share of those come from the
    anchor's own scene (overlapping content, the confusable cases), the
    rest from other scenes.
    """
    rng = np.random.default_rng(config.seed)
    n, size = config.n_pairs, PATCH_SIZE
    n_scenes = -(-n // config.pairs_per_scene)
    scene_of = np.minimum(np.arange(n) // config.pairs_per_scene, n_scenes - 1)
    counts = np.bincount(scene_of, minlength=n_scenes)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])

    canvas = _SCENE_SIZE
    base = np.zeros((n_scenes, canvas, canvas))
    amp_total = 0.0
    for o in range(config.octaves):
        amp = 0.5**o
        base += amp * _value_noise(rng, n_scenes, 4 * 2**o, canvas)
        amp_total += amp
    base /= amp_total
    lo = base.min(axis=(1, 2), keepdims=True)
    hi = base.max(axis=(1, 2), keepdims=True)
    base = (base - lo) / np.maximum(hi - lo, 1e-9)

    region_field = _value_noise(rng, n_scenes, 3, canvas)
    q = np.quantile(region_field, [1 / 3, 2 / 3], axis=(1, 2))  # [2, n_scenes]
    regions = (region_field > q[0][:, None, None]).astype(np.int64)
    regions += (region_field > q[1][:, None, None]).astype(np.int64)

    invert = rng.random((n_scenes, 3)) < 0.35
    gammas = np.exp(rng.uniform(np.log(0.4), np.log(2.5), (n_scenes, 3)))
    sidx = np.arange(n_scenes)[:, None, None]
    gamma_map = gammas[sidx, regions]
    invert_map = invert[sidx, regions]

    remapped = np.where(invert_map, (1.0 - base) ** gamma_map, base**gamma_map)
    other = base + config.severity * (remapped - base)
    if config.severity > 0:
        other = _blur(other, 0.8 * config.severity)
    if config.noise > 0:
        other = other + rng.normal(0.0, config.noise, other.shape)
    other = np.clip(other, 0.0, 1.0)

    scenes_a = np.round(base * 255.0).astype(np.uint8)
    scenes_b = np.round(other * 255.0).astype(np.uint8)

    cells = np.empty(n, dtype=np.int64)
    for s in range(n_scenes):
        cells[starts[s] : starts[s] + counts[s]] = rng.choice(
            _OFFSET_GRID**2, size=counts[s], replace=False
        )
    oy = (cells // _OFFSET_GRID) * _OFFSET_STRIDE
    ox = (cells % _OFFSET_GRID) * _OFFSET_STRIDE
    rows = oy[:, None] + np.arange(size)[None, :]
    cols = ox[:, None] + np.arange(size)[None, :]
    a = scenes_a[scene_of[:, None, None], rows[:, :, None], cols[:, None, :]]
    b = scenes_b[scene_of[:, None, None], rows[:, :, None], cols[:, None, :]]

    idx = np.arange(n, dtype=np.int64)
    positives = np.stack([idx, idx, np.ones(n, dtype=np.int64)], axis=1)
    if n > 1:
        cnt = counts[scene_of]
        rank = idx - starts[scene_of]
        # uniform over the anchor's scene, skipping the anchor itself
        spin = rng.integers(0, np.maximum(cnt - 1, 1))
        same_scene = starts[scene_of] + (rank + 1 + spin) % cnt
        # uniform over everything outside the anchor's contiguous scene block
        draw = rng.integers(0, np.maximum(n - cnt, 1))
        cross_scene = np.where(draw < starts[scene_of], draw, draw + cnt)
        want_hard = (rng.random(n) < config.hard_negative_fraction) & (cnt >= 2)
        if n_scenes == 1:
            neg_partner = same_scene
        else:
            neg_partner = np.where(want_hard, same_scene, cross_scene)
        negatives = np.stack([idx, neg_partner, np.zeros(n, dtype=np.int64)], axis=1)
        labels = np.concatenate([positives, negatives], axis=0)
    else:
        labels = positives

    return PatchPack(
        name=config.name,
        spectra=("vis", "nir"),
        n_pairs=n,
        split=config.split,
        a=a,
        b=b,
        subset=config.subset,
        provenance=f"synthetic seed={config.seed} octaves={config.octaves} "
        f"severity={config.severity} noise={config.noise} "
        f"pairs_per_scene={config.pairs_per_scene}",
        labels=labels,
    )


# ---------------------------------------------------------------------------
# Batch iteration


@dataclass
class PatchPairBatch:
    """One training batch of aligned positive pairs, float32 in [0, 1]."""

    a: np.ndarray  # [B, 1, P, P]
    b: np.ndarray  # [B, 1, P, P]
    indices: np.ndarray  # [B] pair indices into the pack


def training_batches(
    pack: PatchPack, batch_size: int, epoch_seed: int, augment_flip: bool = False
) -> Iterator[PatchPairBatch]:
    """Seeded per-epoch shuffle over aligned positives; drops the short tail.

    Only index-aligned pairs are emitted: mining assumes every batch entry
    is a true match. ``augment_flip`` mirrors a random half of each batch
    horizontally — both spectra together, so pairs stay aligned; it is off
    by default.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be at least 2")
    if pack.n_pairs < batch_size:
        raise DataError(
            f"pack '{pack.name}' has {pack.n_pairs} pairs, fewer than batch_size={batch_size}"
        )
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(pack.n_pairs)
    n_batches = pack.n_pairs // batch_size
    for k in range(n_batches):
        idx = np.sort(order[k * batch_size : (k + 1) * batch_size])
        a = pack.patches_float("a", idx)
        b = pack.patches_float("b", idx)
        if augment_flip:
            flip = rng.random(batch_size) < 0.5
            a[flip] = a[flip, :, :, ::-1]
            b[flip] = b[flip, :, :, ::-1]
        yield PatchPairBatch(a=a, b=b, indices=idx)


def batches_per_epoch(pack: PatchPack, batch_size: int) -> int:
    return pack.n_pairs // batch_size


# ---------------------------------------------------------------------------
# External conversion

_LAYOUTS = ("paired_dirs",)


def convert_external(src_layout: str, path, name: str | None = None, split: str = "test") -> PatchPack:
    """Convert an external patch collection into a pack.

    Supported layouts:

    ``paired_dirs``
        ``path`` contains exactly two subdirectories (sorted names become
        the spectrum names), each holding the same set of image filenames;
        images with matching stems form aligned pairs. Images must already
        be cropped to 64x64; color sources are converted to luminance. An
        optional ``labels.csv`` next to the subdirectories is carried over.
    """
    if src_layout not in _LAYOUTS:
        raise DataError(
            f"unrecognized layout {src_layout!r}; known layouts: {', '.join(_LAYOUTS)}"
        )
    from PIL import Image

    root = Path(path)
    if not root.is_dir():
        raise DataError(f"source directory {root} does not exist")
    subdirs = sorted(p for p in root.iterdir() if p.is_dir())
    if len(subdirs) != 2:
        raise DataError(
            f"layout 'paired_dirs' expects exactly two spectrum subdirectories in {root}, "
            f"found {len(subdirs)}"
        )
    files_a = sorted(p for p in subdirs[0].iterdir() if p.is_file())
    files_b = sorted(p for p in subdirs[1].iterdir() if p.is_file())
    stems_a = [p.stem for p in files_a]
    stems_b = [p.stem for p in files_b]
    if stems_a != stems_b:
        raise DataError(
            f"spectrum directories disagree: {subdirs[0].name} has {len(files_a)} files, "
            f"{subdirs[1].name} has {len(files_b)}; stems must match pairwise"
        )
    if not files_a:
        raise DataError(f"no image files found under {root}")

    def read_store(files: Sequence[Path]) -> np.ndarray:
        patches = []
        for f in files:
            img = Image.open(f).convert("L")
            if img.size != (PATCH_SIZE, PATCH_SIZE):
                raise DataError(
                    f"{f} is {img.size[0]}x{img.size[1]}; patches must be "
                    f"{PATCH_SIZE}x{PATCH_SIZE} (converters do not crop)"
                )
            patches.append(np.asarray(img, dtype=np.uint8))
        return np.stack(patches)

    labels = None
    labels_path = root / "labels.csv"
    if labels_path.is_file():
        labels = _read_labels_csv(labels_path)

    pack_name = name or root.name
    return PatchPack(
        name=pack_name,
        spectra=(subdirs[0].name, subdirs[1].name),
        n_pairs=len(files_a),
        split=split,
        a=read_store(files_a),
        b=read_store(files_b),
        subset=pack_name,
        provenance=f"converted:{src_layout}:{root.resolve()}",
        labels=labels,
    )
