"""Manifests, score rescaling, crop/flip preprocessing and the synthetic two-domain benchmark."""

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ConfigError, InputError

log = logging.getLogger(__name__)

MOS = "mos_higher_better"
DMOS = "dmos_higher_worse"
CONVENTIONS = (MOS, DMOS)


@dataclass
class Record:
    path: Path
    score: float | None = None


@dataclass
class Manifest:
    records: list[Record]
    score_convention: str = MOS
    raw_range: tuple[float, float] = (0.0, 5.0)
    source_file: Path | None = None

    def __len__(self):
        return len(self.records)

    @property
    def labeled(self) -> bool:
        return bool(self.records) and all(r.score is not None for r in self.records)

    @property
    def paths(self) -> list[Path]:
        return [r.path for r in self.records]

    def scores(self) -> np.ndarray:
        if not self.labeled:
            raise InputError(f"manifest {self.source_file} has unlabeled records")
        return np.array([r.score for r in self.records], dtype=np.float64)

    def rescaled_scores(self) -> np.ndarray:
        return rescale_scores(self.scores(), self.score_convention, self.raw_range)


def rescale_scores(raw, convention: str = MOS, raw_range=(0.0, 5.0)) -> np.ndarray:
    lo, hi = (float(v) for v in raw_range)
    if not lo < hi:
        raise ConfigError(f"degenerate score range [{lo}, {hi}]")
    raw = np.asarray(raw, dtype=np.float64)
    if convention == MOS:
        y = 5.0 * (raw - lo) / (hi - lo)
    elif convention == DMOS:
        y = 5.0 * (hi - raw) / (hi - lo)
    else:
        raise ConfigError(f"unknown score convention {convention!r} (expected one of {CONVENTIONS})")
    return np.clip(y, 0.0, 5.0)


def load_manifest(path, score_convention: str = MOS, raw_range=(0.0, 5.0), check_files: bool = True) -> Manifest:
    """Read a ``path,score`` CSV; relative image paths resolve against the CSV's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    lo, hi = raw_range
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:1]] != ["path"] or len(header) > 2:
            raise InputError(f"{path}:1: expected header 'path,score', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) > 2:
                raise InputError(f"{path}:{lineno}: expected at most 2 columns, got {len(row)}")
            img = Path(row[0].strip())
            if not img.is_absolute():
                img = path.parent / img
            if check_files and not img.is_file():
                raise FileNotFoundError(f"{path}:{lineno}: image not found: {img}")
            score = None
            if len(row) == 2 and row[1].strip():
                try:
                    score = float(row[1])
                except ValueError:
                    raise InputError(f"{path}:{lineno}: non-numeric score {row[1]!r}") from None
                if not (math.isfinite(score) and lo <= score <= hi):
                    raise InputError(f"{path}:{lineno}: score {score} outside declared range [{lo}, {hi}]")
            records.append(Record(img, score))
    return Manifest(records, score_convention, (lo, hi), path)


def write_manifest(path, rows, with_scores: bool = True):
    """``rows`` is an iterable of (relative_path, score_or_None)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "score"])
        for p, s in rows:
            w.writerow([p, f"{s:.6f}" if with_scores and s is not None else ""])


def read_image(path) -> np.ndarray:
    """Decode to a (3, H, W) float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def preprocess(image: np.ndarray, mode: str, crop: int, rng: np.random.Generator | None = None, name=None) -> np.ndarray:
    """Random crop + horizontal flip (train) or center crop (test) of a (3, H, W) image."""
    h, w = image.shape[-2:]
    if h < crop or w < crop:
        raise InputError(f"image {name or ''} is {h}x{w}, smaller than crop {crop}")
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode preprocessing needs an rng")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
        flip = rng.random() < 0.5
    elif mode == "test":
        top, left, flip = (h - crop) // 2, (w - crop) // 2, False
    else:
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    out = image[..., top : top + crop, left : left + crop]
    if flip:
        out = hflip(out)
    return np.ascontiguousarray(out)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1]


@dataclass
class Normalizer:
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def __call__(self, batch: np.ndarray) -> np.ndarray:
        m = np.asarray(self.mean, dtype=np.float32)[:, None, None]
        s = np.asarray(self.std, dtype=np.float32)[:, None, None]
        return (batch - m) / s


@dataclass
class ImageSet:
    """Images of one domain decoded once and held in memory as uint8."""

    images: list[np.ndarray]
    names: list[str]
    scores: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_manifest(cls, manifest: Manifest, with_scores: bool) -> "ImageSet":
        imgs = []
        for p in manifest.paths:
            with Image.open(p) as im:
                imgs.append(np.asarray(im.convert("RGB"), dtype=np.uint8).transpose(2, 0, 1).copy())
        scores = manifest.rescaled_scores() if with_scores else None
        return cls(imgs, [str(p) for p in manifest.paths], scores)

    def __len__(self):
        return len(self.images)

    def batch(self, idx, mode: str, crop: int, rng=None, normalize: Normalizer | None = None) -> np.ndarray:
        out = np.stack(
            [preprocess(self.images[i].astype(np.float32) / 255.0, mode, crop, rng, self.names[i]) for i in idx]
        )
        return normalize(out) if normalize is not None else out


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator, drop_last: bool = True) -> list[np.ndarray]:
    order = rng.permutation(n)
    stop = n - n % batch_size if drop_last and n >= batch_size else n
    return [order[i : i + batch_size] for i in range(0, stop, batch_size)]


def paired_epoch(n_source: int, n_target: int, batch_size: int, rng: np.random.Generator):
    """Index batches for one UDA epoch.

    The longer domain is traversed once; the shorter one cycles through fresh
    permutations until the longer is exhausted.
    """
    n_long = max(n_source, n_target)
    b = min(batch_size, n_long)
    n_steps = n_long // b

    def stream(n):
        while True:
            yield from rng.permutation(n)

    src_it, tgt_it = stream(n_source), stream(n_target)
    for _ in range(n_steps):
        s = np.fromiter((next(src_it) for _ in range(min(b, n_source))), dtype=np.int64)
        t = np.fromiter((next(tgt_it) for _ in range(min(b, n_target))), dtype=np.int64)
        yield s, t


# --------------------------------------------------------------------------
# synthetic benchmark

PSNR_LO, PSNR_HI = 15.0, 45.0
TOY_SIZE = 64
BLUR_SIGMAS = (1.2, 1.8, 2.8, 4.5, 8.0)
NOISE_STDS = (0.012, 0.022, 0.04, 0.07, 0.13)
PIXEL_BLOCKS = (2, 4, 8, 16, 32)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB of two [0, 1] arrays; identical inputs give +inf."""
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def psnr_to_label(db: float) -> float:
    db = min(max(db, PSNR_LO), PSNR_HI)
    return 5.0 * (db - PSNR_LO) / (PSNR_HI - PSNR_LO)


def pristine_texture(rng: np.random.Generator, size: int = TOY_SIZE) -> np.ndarray:
    """(size, size, 3) float image: random-frequency sinusoids plus soft blobs.

    Sinusoid amplitudes fall off as 1/frequency so that mild degradations
    leave PSNR high and label ranges cover [0, 5] in both domains.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    img = np.zeros((size, size, 3))
    for _ in range(int(rng.integers(4, 9))):
        freq = np.exp(rng.uniform(np.log(0.5), np.log(16.0)))
        theta = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        img += rng.uniform(0.1, 0.3) / freq * wave[..., None] * rng.uniform(0.3, 1.0, size=3)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, size=2)
        r = rng.uniform(0.05, 0.25)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img += rng.uniform(-0.4, 0.4) * blob[..., None] * rng.uniform(0.3, 1.0, size=3)
    img += rng.uniform(0.2, 0.8, size=3)
    lo, hi = img.min(), img.max()
    if hi - lo > 0.9:
        img = (img - lo) / (hi - lo) * 0.9 + 0.05
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def gaussian_noise(img: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    return np.clip(img + rng.normal(0.0, std, size=img.shape), 0.0, 1.0)


def pixelate(img: np.ndarray, block: int) -> np.ndarray:
    """Replace each block x block tile by its mean (partial tiles at the border included)."""
    h, w = img.shape[:2]
    out = np.empty_like(img)
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            tile = img[y0 : y0 + block, x0 : x0 + block]
            out[y0 : y0 + block, x0 : x0 + block] = tile.mean(axis=(0, 1))
    return out


@dataclass
class ToyDomains:
    source_manifest: Path
    target_manifest: Path
    target_scores: Path
    source_scores: Path


def _save_png(arr: np.ndarray, path: Path):
    try:
        Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def generate_toy_domains(out_dir, n_source: int = 400, n_target: int = 400, seed: int = 0) -> ToyDomains:
    """Write a deterministic source (blur / noise) and target (pixelation) benchmark.

    Layout under ``out_dir``::

        pristine/{source,target}_NNNN.png
        source/NNNN.png, target/NNNN.png
        source.csv          path,score (labels in [0, 5])
        target.csv          path,score with empty scores (training input)
        target_scores.csv   path,score (evaluation only)
        source_meta.csv, target_meta.csv   degradation type/level and PSNR

    Labels are computed from the 8-bit images as written, so recomputing PSNR
    from the files reproduces them.
    """
    out = Path(out_dir)
    try:
        for sub in ("pristine", "source", "target"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory not writable: {out}: {exc}") from exc

    root = np.random.SeedSequence(seed)
    src_seq, tgt_seq = root.spawn(2)

    def build(domain: str, n: int, seq: np.random.SeedSequence):
        rows, meta = [], []
        for i, child in enumerate(seq.spawn(n)):
            rng = np.random.default_rng(child)
            clean = quantize(pristine_texture(rng))
            clean_f = clean.astype(np.float64) / 255.0
            level = int(rng.integers(0, 5))
            if domain == "source":
                kind = "blur" if rng.random() < 0.5 else "noise"
                if kind == "blur":
                    deg = gaussian_blur(clean_f, BLUR_SIGMAS[level])
                else:
                    deg = gaussian_noise(clean_f, NOISE_STDS[level], rng)
            else:
                kind = "pixelate"
                deg = pixelate(clean_f, PIXEL_BLOCKS[level])
            deg_q = quantize(deg)
            db = psnr(deg_q / 255.0, clean_f)
            label = psnr_to_label(db)
            name = f"{i:04d}.png"
            _save_png(clean, out / "pristine" / f"{domain}_{name}")
            _save_png(deg_q, out / domain / name)
            rows.append((f"{domain}/{name}", label))
            meta.append((f"{domain}/{name}", f"pristine/{domain}_{name}", kind, level + 1, db))
        return rows, meta

    src_rows, src_meta = build("source", n_source, src_seq)
    tgt_rows, tgt_meta = build("target", n_target, tgt_seq)

    paths = ToyDomains(
        source_manifest=out / "source.csv",
        target_manifest=out / "target.csv",
        target_scores=out / "target_scores.csv",
        source_scores=out / "source.csv",
    )
    write_manifest(paths.source_manifest, src_rows)
    write_manifest(paths.target_manifest, tgt_rows, with_scores=False)
    write_manifest(paths.target_scores, tgt_rows)
    for name, meta in (("source_meta.csv", src_meta), ("target_meta.csv", tgt_meta)):
        with (out / name).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "pristine", "degradation", "level", "psnr"])
            for p, c, k, lv, db in meta:
                w.writerow([p, c, k, lv, "inf" if math.isinf(db) else f"{db:.6f}"])
    log.info("wrote toy benchmark to %s (%d source, %d target)", out, n_source, n_target)
    return paths


def resolve(path, base) -> Path:
    p = Path(path)
    return p if p.is_absolute() else Path(os.path.normpath(Path(base) / p))
