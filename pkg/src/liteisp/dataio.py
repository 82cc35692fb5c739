"""Dataset manifests, on-disk layouts and the synthetic RAW/RGB generator.

RAW patches are 16-bit grayscale PNG mosaics and RGB targets 8-bit PNG.
A manifest is serialized as a line-oriented text index::

    # liteisp-manifest v1
    # pairing_mode=paired
    # bayer_pattern=RGGB
    # black_level=0
    # white_level=1020
    # patch_size=448
    raw/0.png<TAB>rgb/0.png

Paths are stored relative to the index file's directory when possible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .raw_pipeline import PATTERNS, RawPatch, demosaic, mosaic_rgb, pack

log = logging.getLogger(__name__)

INDEX_HEADER = "# liteisp-manifest v1"
PAIRING_MODES = ("paired", "unpaired")
IMAGE_SUFFIXES = (".png",)

# Sensor defaults per layout. ZRR mosaics carry 10-bit data whose usable
# maximum is conventionally 4*255; the Fujifilm set is treated the same way
# unless overridden.
LAYOUTS = {
    "zrr": {"raw_dir": "raw", "rgb_dir": "rgb", "bayer_pattern": "RGGB", "black_level": 0, "white_level": 1020},
    "fuji": {"raw_dir": "raw", "rgb_dir": "rgb", "bayer_pattern": "RGGB", "black_level": 0, "white_level": 1020},
    "generic": {"raw_dir": "raw", "rgb_dir": "rgb", "bayer_pattern": "RGGB", "black_level": 0, "white_level": 65535},
}
SYNTH_WHITE_LEVEL = 65535


class ManifestError(ValueError):
    pass


@dataclass
class ManifestEntry:
    raw_path: Path
    rgb_path: Path | None = None

    @property
    def stem(self) -> str:
        return self.raw_path.stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    pairing_mode: str = "paired"
    patch_size: int = 448
    bayer_pattern: str = "RGGB"
    black_level: float = 0
    white_level: float = 1020

    def __post_init__(self):
        if self.pairing_mode not in PAIRING_MODES:
            raise ManifestError(f"pairing_mode must be one of {PAIRING_MODES}, got {self.pairing_mode!r}")
        if self.bayer_pattern not in PATTERNS:
            raise ManifestError(f"unknown Bayer pattern {self.bayer_pattern!r}")
        if self.patch_size % 2:
            raise ManifestError(f"patch_size must be even, got {self.patch_size}")
        if self.pairing_mode == "paired":
            orphans = [e.stem for e in self.entries if e.rgb_path is None]
            if orphans:
                raise ManifestError(f"paired manifest has RAW patches without targets: {', '.join(orphans)}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def stems(self) -> list[str]:
        return [e.stem for e in self.entries]

    def subset(self, indices) -> "DatasetManifest":
        return replace(self, entries=[self.entries[i] for i in indices])

    def as_unpaired(self) -> "DatasetManifest":
        return replace(self, pairing_mode="unpaired", entries=[ManifestEntry(e.raw_path) for e in self.entries])

    def validate_files(self):
        missing = [str(p) for e in self.entries for p in (e.raw_path, e.rgb_path) if p is not None and not p.exists()]
        if missing:
            raise ManifestError(f"manifest references missing files: {', '.join(missing[:10])}")

    def raw_patch(self, i: int) -> RawPatch:
        return read_raw(self.entries[i].raw_path, self.bayer_pattern, self.black_level, self.white_level)

    def rgb(self, i: int) -> np.ndarray:
        path = self.entries[i].rgb_path
        if path is None:
            raise ManifestError(f"entry {self.entries[i].stem!r} has no RGB target")
        return read_rgb(path)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        base = path.parent.resolve()

        def rel(p: Path) -> str:
            p = p.resolve()
            try:
                return p.relative_to(base).as_posix()
            except ValueError:
                return str(p)

        lines = [
            INDEX_HEADER,
            f"# pairing_mode={self.pairing_mode}",
            f"# bayer_pattern={self.bayer_pattern}",
            f"# black_level={self.black_level:g}",
            f"# white_level={self.white_level:g}",
            f"# patch_size={self.patch_size}",
        ]
        for e in self.entries:
            lines.append(rel(e.raw_path) + ("\t" + rel(e.rgb_path) if e.rgb_path is not None else ""))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        base = path.parent
        meta: dict[str, str] = {}
        entries = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                if "=" in line:
                    k, v = line[1:].strip().split("=", 1)
                    meta[k.strip()] = v.strip()
                continue
            cols = line.split("\t")
            raw = base / cols[0]
            rgb = base / cols[1] if len(cols) > 1 and cols[1] else None
            entries.append(ManifestEntry(raw, rgb))
        return cls(
            entries=entries,
            pairing_mode=meta.get("pairing_mode", "paired"),
            patch_size=int(meta.get("patch_size", 448)),
            bayer_pattern=meta.get("bayer_pattern", "RGGB"),
            black_level=float(meta.get("black_level", 0)),
            white_level=float(meta.get("white_level", 1020)),
        )


def read_raw(path, pattern="RGGB", black_level=0, white_level=1020) -> RawPatch:
    with Image.open(path) as im:
        mosaic = np.array(im)
    if mosaic.ndim != 2:
        raise ManifestError(f"{path}: RAW PNG must be single-channel, got shape {mosaic.shape}")
    return RawPatch(mosaic.astype(np.uint16), pattern, black_level, white_level)


def read_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im.convert("RGB"))
    return arr.astype(np.float32) / 255.0


def write_raw(path, mosaic_counts: np.ndarray):
    Image.fromarray(np.asarray(mosaic_counts, dtype=np.uint16)).save(path)


def write_rgb(path, img: np.ndarray):
    """Save a float image in [0, 1] as 8-bit PNG."""
    Image.fromarray(to_uint8(img)).save(path)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def _images(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _read_exclusions(exclude) -> set[str]:
    if exclude is None:
        return set()
    if isinstance(exclude, (str, Path)):
        lines = Path(exclude).read_text().splitlines()
        return {ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")}
    return set(exclude)


def load_manifest(
    root_dir,
    layout: str = "zrr",
    pairing_mode: str = "paired",
    raw_dir: str | None = None,
    rgb_dir: str | None = None,
    exclude=None,
    bayer_pattern: str | None = None,
    black_level: float | None = None,
    white_level: float | None = None,
) -> DatasetManifest:
    """Scan a dataset directory into a manifest, sorted by stem.

    ``exclude`` is an iterable of stems or a file listing one stem per line;
    excluded patches are dropped before pairing is checked.
    """
    if layout not in LAYOUTS:
        raise ManifestError(f"unknown layout {layout!r}; expected one of {sorted(LAYOUTS)}")
    defaults = LAYOUTS[layout]
    if layout != "generic" and (raw_dir or rgb_dir):
        raise ManifestError("raw_dir/rgb_dir may only be customised for the generic layout")
    root = Path(root_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    raw_root = root / (raw_dir or defaults["raw_dir"])
    if not raw_root.is_dir():
        raise FileNotFoundError(f"RAW directory {raw_root} does not exist")
    skip = _read_exclusions(exclude)
    raws = {k: v for k, v in _images(raw_root).items() if k not in skip}
    rgbs: dict[str, Path] = {}
    rgb_root = root / (rgb_dir or defaults["rgb_dir"])
    if pairing_mode == "paired":
        if not rgb_root.is_dir():
            raise FileNotFoundError(f"RGB directory {rgb_root} does not exist (needed for paired mode)")
        rgbs = _images(rgb_root)
        orphans = sorted(set(raws) - set(rgbs))
        if orphans:
            raise ManifestError(f"RAW patches without a matching RGB target: {', '.join(orphans)}")
    elif pairing_mode != "unpaired":
        raise ManifestError(f"pairing_mode must be one of {PAIRING_MODES}, got {pairing_mode!r}")
    stems = sorted(raws)
    entries = [ManifestEntry(raws[s], rgbs.get(s)) for s in stems]
    patch_size = defaults.get("patch_size", 0)
    if entries:
        with Image.open(entries[0].raw_path) as im:
            patch_size = im.size[1]
    return DatasetManifest(
        entries=entries,
        pairing_mode=pairing_mode,
        patch_size=patch_size,
        bayer_pattern=bayer_pattern or defaults["bayer_pattern"],
        black_level=defaults["black_level"] if black_level is None else black_level,
        white_level=defaults["white_level"] if white_level is None else white_level,
    )


def split_manifest(m: DatasetManifest, val_count: int, test_count: int, seed: int = 0):
    """Seeded disjoint (train, val, test) split; each part keeps manifest order."""
    if val_count < 0 or test_count < 0:
        raise ManifestError("split counts must be non-negative")
    if val_count + test_count >= len(m):
        raise ManifestError(
            f"val_count + test_count = {val_count + test_count} leaves no training data out of {len(m)}"
        )
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(len(m))
    val = sorted(perm[:val_count].tolist())
    test = sorted(perm[val_count : val_count + test_count].tolist())
    train = sorted(perm[val_count + test_count :].tolist())
    return m.subset(train), m.subset(val), m.subset(test)


@dataclass(frozen=True)
class SyntheticDomainSpec:
    """Known RAW->RGB transform: ``rgb = (color_matrix @ cam) ** (1 / gamma)``."""

    color_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    gamma: float = 1.0
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        mat = self.matrix
        if mat.shape != (3, 3):
            raise ValueError(f"color_matrix must be 3x3, got {mat.shape}")
        if abs(np.linalg.det(mat)) < 1e-8:
            raise ValueError("color_matrix must be invertible")
        if not 0.2 < self.gamma < 5.0:
            raise ValueError(f"gamma must lie in (0.2, 5.0), got {self.gamma}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @property
    def matrix(self) -> np.ndarray:
        return np.asarray(self.color_matrix, dtype=np.float64)


def procedural_rgb(rng: np.random.Generator, size: int) -> np.ndarray:
    """A textured test image: smooth noise field, gradient, sinusoids, soft polygons."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((size, size, 3))
    base = rng.uniform(0.15, 0.85, size=3)
    grad_dir = rng.normal(size=2)
    ramp = grad_dir[0] * (yy - 0.5) + grad_dir[1] * (xx - 0.5)
    for c in range(3):
        field_ = ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma=size / 8, mode="wrap")
        field_ /= np.abs(field_).max() + 1e-12
        img[..., c] = base[c] + 0.2 * field_ + 0.15 * ramp * rng.uniform(0.5, 1.0)
    for _ in range(rng.integers(1, 4)):
        period = rng.uniform(10.0, 32.0) / size
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (np.cos(theta) * xx + np.sin(theta) * yy) / period + phase)
        img += 0.08 * wave[..., None] * rng.uniform(-1, 1, size=3)
    ss = 4
    for _ in range(rng.integers(1, 4)):
        canvas = Image.new("L", (size * ss, size * ss), 0)
        center = rng.uniform(0.2, 0.8, size=2) * size * ss
        radius = rng.uniform(0.1, 0.3) * size * ss
        k = rng.integers(3, 7)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
        pts = [(center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)) for a in angles]
        ImageDraw.Draw(canvas).polygon(pts, fill=255)
        mask = np.asarray(canvas.resize((size, size), Image.BOX), dtype=np.float64) / 255.0
        mask = ndimage.gaussian_filter(mask, 0.7)
        color = rng.uniform(0.1, 0.9, size=3)
        alpha = rng.uniform(0.4, 0.8)
        img = img * (1 - alpha * mask[..., None]) + alpha * mask[..., None] * color
    return np.clip(img, 0.0, 1.0)


def rgb_to_camera(rgb: np.ndarray, spec: SyntheticDomainSpec) -> np.ndarray:
    """Undo the domain transform: inverse gamma, then the inverse colour matrix."""
    lin = np.clip(rgb, 0.0, 1.0) ** spec.gamma
    cam = lin @ np.linalg.inv(spec.matrix).T
    return np.clip(cam, 0.0, 1.0)


def camera_to_rgb(cam: np.ndarray, spec: SyntheticDomainSpec) -> np.ndarray:
    lin = np.clip(cam @ spec.matrix.T, 0.0, 1.0)
    return lin ** (1.0 / spec.gamma)


def synthesize_raw(rgb: np.ndarray, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    """16-bit mosaic counts (RGGB) whose ideal rendering is ``rgb``."""
    mosaic = mosaic_rgb(rgb_to_camera(rgb, spec), "RGGB")
    if spec.noise_sigma > 0:
        mosaic = mosaic + rng.normal(0.0, spec.noise_sigma, size=mosaic.shape)
    return np.round(np.clip(mosaic, 0.0, 1.0) * SYNTH_WHITE_LEVEL).astype(np.uint16)


def generate_synthetic(spec: SyntheticDomainSpec, n: int, patch_size: int, out_dir) -> DatasetManifest:
    """Write ``n`` paired patches under ``out_dir/{raw,rgb}`` plus ``index.txt``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if patch_size % 2 or patch_size < 2:
        raise ValueError(f"patch_size must be even and positive, got {patch_size}")
    out = Path(out_dir)
    (out / "raw").mkdir(parents=True, exist_ok=True)
    (out / "rgb").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    width = max(4, len(str(n - 1)))
    entries = []
    for i in range(n):
        stem = f"{i:0{width}d}"
        target = to_uint8(procedural_rgb(rng, patch_size))
        counts = synthesize_raw(target.astype(np.float64) / 255.0, spec, rng)
        raw_path, rgb_path = out / "raw" / f"{stem}.png", out / "rgb" / f"{stem}.png"
        write_raw(raw_path, counts)
        Image.fromarray(target).save(rgb_path)
        entries.append(ManifestEntry(raw_path, rgb_path))
    manifest = DatasetManifest(entries, "paired", patch_size, "RGGB", 0, SYNTH_WHITE_LEVEL)
    manifest.save(out / "index.txt")
    return manifest


@dataclass
class PatchArrays:
    """A manifest decoded into training tensors (numpy, channels-last)."""

    packed: np.ndarray  # (N, h, w, 4)
    demosaiced: np.ndarray  # (N, H, W, 3)
    rgb: np.ndarray | None = None  # (N, H, W, 3)
    stems: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.packed)


def decode_entry(m: DatasetManifest, i: int, demosaic_algo: str = "bilinear"):
    """Decode one entry to ``(packed, demosaiced, rgb-or-None)``; pure function of the files."""
    raw = m.raw_patch(i)
    rgb = m.rgb(i) if m.entries[i].rgb_path is not None else None
    return pack(raw), demosaic(raw, demosaic_algo), rgb


def load_patches(m: DatasetManifest, demosaic_algo: str = "bilinear", with_rgb: bool | None = None) -> PatchArrays:
    if len(m) == 0:
        raise ManifestError("manifest is empty")
    with_rgb = (m.pairing_mode == "paired") if with_rgb is None else with_rgb
    packed, demo, rgbs = [], [], []
    for i in range(len(m)):
        p, d, r = decode_entry(m, i, demosaic_algo)
        packed.append(p)
        demo.append(d)
        if with_rgb:
            if r is None:
                raise ManifestError(f"entry {m.entries[i].stem!r} has no RGB target")
            rgbs.append(r)
    return PatchArrays(
        np.stack(packed), np.stack(demo), np.stack(rgbs) if with_rgb else None, m.stems
    )


def load_rgb_pool(m: DatasetManifest) -> np.ndarray:
    """All RGB targets of a manifest, for use as an unpaired target-domain pool."""
    imgs = [read_rgb(e.rgb_path) for e in m.entries if e.rgb_path is not None]
    if not imgs:
        raise ManifestError("target pool is empty: manifest has no RGB images")
    return np.stack(imgs)
