"""Market-style dataset scanning, a synthetic banded re-ID generator,
training augmentation and P x K identity batching."""

from __future__ import annotations

import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
_NAME_RE = re.compile(r"^(-?\d+)_c(\d+)(?:s\d+)?_(.+)\.(png|jpg|jpeg)$", re.IGNORECASE)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    path: str
    pid: int
    cam: int
    split: str


def parse_name(name: str) -> tuple[int, int]:
    """``0002_c1_000451.png`` -> (2, 0); cameras become 0-based."""
    m = _NAME_RE.match(name)
    if not m:
        raise ValueError(f"not a Market-style filename: {name!r}")
    pid, cam = int(m.group(1)), int(m.group(2)) - 1
    if pid < -1 or cam < 0:
        raise ValueError(f"bad id/camera in {name!r}")
    return pid, cam


@dataclass
class DatasetIndex:
    samples: list[Sample]
    class_index: dict[int, int]
    errors: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    @property
    def num_classes(self) -> int:
        return len(self.class_index)

    @property
    def num_cameras(self) -> int:
        return max((s.cam for s in self.samples), default=-1) + 1

    def train_labels(self) -> np.ndarray:
        return np.array([self.class_index[s.pid] for s in self.split("train")], dtype=np.int64)


def scan_dataset(root: str | Path) -> DatasetIndex:
    """Walk ``root/{train,query,gallery}`` in lexicographic order.

    Malformed names are skipped and collected in ``errors``; junk (-1) images
    are dropped from the train split. Train ids map to contiguous class indices.
    """
    root = Path(root)
    samples, errors = [], []
    for split in SPLITS:
        d = root / split
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            if not p.is_file():
                continue
            try:
                pid, cam = parse_name(p.name)
            except ValueError as e:
                errors.append(str(e))
                log.warning("skipping %s: %s", p, e)
                continue
            if split == "train" and pid == -1:
                continue
            samples.append(Sample(str(p), pid, cam, split))
    train_ids = sorted({s.pid for s in samples if s.split == "train"})
    return DatasetIndex(samples, {pid: i for i, pid in enumerate(train_ids)}, errors)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def normalize(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 pixels -> (v / 255 - 0.5) / 0.5 per channel."""
    return ((np.asarray(img, dtype=dtype) / 255.0 - 0.5) / 0.5).astype(dtype, copy=False)


# ---------------------------------------------------------------- synthetic data


@dataclass
class SynthConfig:
    num_ids: int = 50
    num_test_ids: int = 50
    cams: int = 4
    images_per_id_per_cam: int = 6
    height: int = 64
    width: int = 32
    parts_per_identity: int = 4
    styles_per_band: int = 4
    camera_tint_strength: float = 0.35
    noise_sigma: float = 18.0
    jitter: int = 3
    person_width: int = 24  # centred columns holding the identity; 0 -> full width
    clutter_block: int = 4
    seed: int = 0

    def __post_init__(self):
        for name in ("num_ids", "cams", "images_per_id_per_cam", "height", "width",
                     "parts_per_identity", "styles_per_band"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_test_ids < 0:
            raise ConfigError("num_test_ids must be >= 0")
        if self.parts_per_identity > self.height:
            raise ConfigError("more bands than pixel rows")
        if self.styles_per_band ** self.parts_per_identity < self.num_ids + self.num_test_ids:
            raise ConfigError("not enough distinct band combinations for the requested identities")
        if self.noise_sigma < 0 or self.camera_tint_strength < 0 or self.jitter < 0:
            raise ConfigError("noise, tint and jitter must be non-negative")
        if not 0 <= self.person_width <= self.width:
            raise ConfigError("person_width must lie in [0, width]")
        if self.clutter_block < 1:
            raise ConfigError("clutter_block must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def band_edges(height: int, bands: int) -> np.ndarray:
    """Row boundaries that tile ``height`` exactly with ``bands`` near-equal bands."""
    return np.round(np.linspace(0, height, bands + 1)).astype(int)


def _band_styles(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Per band, ``styles_per_band`` looks: (base rgb, accent rgb, pattern, period)."""
    n = cfg.parts_per_identity * cfg.styles_per_band
    base = rng.uniform(40, 215, size=(n, 3))
    accent = np.clip(base + rng.choice([-1, 1], size=(n, 3)) * rng.uniform(40, 90, size=(n, 3)), 0, 255)
    pattern = rng.integers(0, 4, size=n)
    period = rng.integers(2, 6, size=n)
    styles = np.zeros((n, 9))
    styles[:, :3], styles[:, 3:6], styles[:, 6], styles[:, 7] = base, accent, pattern, period
    return styles.reshape(cfg.parts_per_identity, cfg.styles_per_band, 9)


def _paint_band(canvas: np.ndarray, r0: int, r1: int, style: np.ndarray) -> None:
    rows, cols = np.mgrid[r0:r1, 0 : canvas.shape[1]]
    period = int(style[7])
    pattern = int(style[6])
    if pattern == 0:
        mask = np.zeros(rows.shape, dtype=bool)
    elif pattern == 1:
        mask = (cols // period) % 2 == 1
    elif pattern == 2:
        mask = ((rows - r0) // period) % 2 == 1
    else:
        mask = ((cols // period) + ((rows - r0) // period)) % 2 == 1
    canvas[r0:r1] = np.where(mask[..., None], style[3:6], style[:3])


def render_identity(codes: Sequence[int], styles: np.ndarray, cfg: SynthConfig, offsets: np.ndarray | None = None) -> np.ndarray:
    """Clean float image for one identity; ``offsets`` shift the inner band edges."""
    edges = band_edges(cfg.height, cfg.parts_per_identity)
    if offsets is not None:
        edges = edges.copy()
        edges[1:-1] = np.clip(edges[1:-1] + offsets, 1, cfg.height - 1)
        edges = np.maximum.accumulate(edges)
    canvas = np.zeros((cfg.height, cfg.width, 3))
    for b, code in enumerate(codes):
        _paint_band(canvas, edges[b], edges[b + 1], styles[b, code])
    return canvas


def synth_identity_codes(cfg: SynthConfig) -> np.ndarray:
    """Distinct band-style combinations, train identities first."""
    rng = np.random.default_rng([cfg.seed, 1])
    total = cfg.num_ids + cfg.num_test_ids
    space = cfg.styles_per_band ** cfg.parts_per_identity
    flat = rng.choice(space, size=total, replace=False)
    digits = [(flat // cfg.styles_per_band**b) % cfg.styles_per_band for b in range(cfg.parts_per_identity)]
    return np.stack(digits, axis=1)


def _camera_tints(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    s = cfg.camera_tint_strength
    gain = 1.0 + s * rng.uniform(-1, 1, size=(cfg.cams, 3))
    shift = 60.0 * s * rng.uniform(-1, 1, size=(cfg.cams, 3))
    return gain, shift


def _clutter(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Identity-free background: blocks of random colour."""
    b = cfg.clutter_block
    tiles = rng.uniform(0, 255, size=(-(-cfg.height // b), -(-cfg.width // b), 3))
    return np.repeat(np.repeat(tiles, b, axis=0), b, axis=1)[: cfg.height, : cfg.width]


def synth_image(codes, styles, cam: int, tints, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    offsets = rng.integers(-cfg.jitter, cfg.jitter + 1, size=cfg.parts_per_identity - 1) if cfg.jitter else None
    img = render_identity(codes, styles, cfg, offsets)
    if 0 < cfg.person_width < cfg.width:
        # the identity occupies a centred strip; the rest is per-image clutter
        left = (cfg.width - cfg.person_width) // 2
        person = img[:, left : left + cfg.person_width].copy()
        img = _clutter(cfg, rng)
        img[:, left : left + cfg.person_width] = person
    gain, shift = tints
    img = img * gain[cam] + shift[cam]
    if cfg.noise_sigma:
        img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def synth_generate(cfg: SynthConfig, root: str | Path) -> DatasetIndex:
    """Write a Market-style synthetic dataset under ``root`` and return its index.

    Train identities get ``images_per_id_per_cam`` images per camera. Each
    test identity contributes its first image per camera to ``query`` and the
    rest to ``gallery``. Ids are 1-based in filenames, as are cameras.
    """
    root = Path(root)
    for split in SPLITS:
        (root / split).mkdir(parents=True, exist_ok=True)
    styles = _band_styles(np.random.default_rng([cfg.seed, 0]), cfg)
    codes = synth_identity_codes(cfg)
    tints = _camera_tints(np.random.default_rng([cfg.seed, 2]), cfg)

    counter = 0
    for ident in range(cfg.num_ids + cfg.num_test_ids):
        is_train = ident < cfg.num_ids
        pid = ident + 1
        for cam in range(cfg.cams):
            for k in range(cfg.images_per_id_per_cam):
                rng = np.random.default_rng([cfg.seed, 3, ident, cam, k])
                img = synth_image(codes[ident], styles, cam, tints, cfg, rng)
                split = "train" if is_train else ("query" if k == 0 else "gallery")
                counter += 1
                Image.fromarray(img).save(root / split / f"{pid:04d}_c{cam + 1}_{counter:06d}.png")
    return scan_dataset(root)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_p: float = 0.5
    pad: int = 4
    erase_p: float = 0.5
    erase_area: tuple[float, float] = (0.02, 0.2)
    erase_ratio: float = 0.3

    def __post_init__(self):
        lo, hi = self.erase_area
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"erase area bounds must satisfy 0 < lo <= hi < 1, got {self.erase_area}")
        if not 0 <= self.flip_p <= 1 or not 0 <= self.erase_p <= 1:
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.pad < 0:
            raise ConfigError("pad must be non-negative")


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, ::-1].copy()


def pad_crop(img: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    if pad == 0:
        return img.copy()
    H, W = img.shape[:2]
    padded = np.pad(img, ((pad, pad), (pad, pad), (0, 0)))
    top, left = rng.integers(0, 2 * pad + 1, size=2)
    return padded[top : top + H, left : left + W].copy()


def erase_box(shape, area: tuple[float, float], ratio: float, rng: np.random.Generator,
              attempts: int = 100) -> tuple[int, int, int, int] | None:
    """Rectangle (top, left, h, w) whose pixel area fraction lies within ``area``."""
    H, W = shape[:2]
    lo, hi = area
    for _ in range(attempts):
        target = rng.uniform(lo, hi) * H * W
        aspect = np.exp(rng.uniform(np.log(ratio), -np.log(ratio)))
        h = int(round(np.sqrt(target * aspect)))
        w = int(round(np.sqrt(target / aspect)))
        if not (0 < h < H and 0 < w < W):
            continue
        if not lo <= h * w / (H * W) <= hi:
            continue
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        return top, left, h, w
    return None


def augment(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Flip, pad-and-crop, then random erasing filled with the per-channel mean."""
    out = img
    if rng.random() < cfg.flip_p:
        out = hflip(out)
    out = pad_crop(out, cfg.pad, rng)
    if rng.random() < cfg.erase_p:
        box = erase_box(out.shape, cfg.erase_area, cfg.erase_ratio, rng)
        if box is not None:
            t, l, h, w = box
            fill = out.reshape(-1, out.shape[-1]).mean(axis=0)
            out[t : t + h, l : l + w] = np.round(fill).astype(out.dtype) if out.dtype == np.uint8 else fill
    return out


# ---------------------------------------------------------------- batching


class PKSampler:
    """Batches of ``P`` identities x ``K`` instances.

    Each epoch visits every identity at least once: ids are shuffled and cut
    into groups of P, the last group topped up with other ids. Identities with
    fewer than K images repeat their images in a cycled permutation.
    """

    def __init__(self, labels: Sequence[int], P: int, K: int, seed: int = 0):
        labels = np.asarray(labels)
        self.P, self.K, self.seed = P, K, seed
        self.ids = np.unique(labels)
        if P < 2 or K < 1:
            raise ConfigError(f"need P >= 2 and K >= 1, got P={P}, K={K}")
        if self.ids.size < P:
            raise ConfigError(f"only {self.ids.size} identities available for P={P}")
        self.index = {int(pid): np.flatnonzero(labels == pid) for pid in self.ids}
        self._epoch = 0

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def __len__(self) -> int:
        return -(-self.ids.size // self.P)

    def _instances(self, pid: int, rng: np.random.Generator) -> list[int]:
        pool = self.index[pid]
        perm = rng.permutation(pool.size)
        if pool.size < self.K:
            perm = np.resize(perm, self.K)
        return pool[perm[: self.K]].tolist()

    def batches(self, epoch: int) -> Iterator[list[int]]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(self.ids)
        for start in range(0, order.size, self.P):
            group = list(order[start : start + self.P])
            if len(group) < self.P:
                rest = np.setdiff1d(self.ids, group)
                group += list(rng.choice(rest, size=self.P - len(group), replace=False))
            batch = []
            for pid in group:
                batch.extend(self._instances(int(pid), rng))
            yield batch

    def __iter__(self) -> Iterator[list[int]]:
        epoch = self._epoch
        self._epoch += 1
        return self.batches(epoch)
