"""Dataset ingestion: directories or zip archives of images to [-1, 1] batches.

Images are decoded eagerly (desk-scale sets fit in memory), normalized to
8-bit RGB, squared according to the crop policy, and resized to the target
resolution. The stream of training batches is an epoch-free infinite
iterator whose content at step t is a pure function of (shuffle seed, t),
so resumed runs see identical data.
"""

from __future__ import annotations

import hashlib
import io
import zipfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")
CROP_POLICIES = ("center_crop", "stretch")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSource:
    path: str
    resolution: int
    crop_policy: str = "center_crop"
    xflip: bool = False

    def validate(self) -> None:
        if self.resolution < 4 or (self.resolution & (self.resolution - 1)) != 0:
            raise DatasetError(
                f"resolution must be a power of two >= 4, got {self.resolution}"
            )
        if self.crop_policy not in CROP_POLICIES:
            raise DatasetError(
                f"crop_policy must be one of {CROP_POLICIES}, got {self.crop_policy!r}"
            )


def _list_entries(path: Path):
    """(name, bytes-reader) pairs in sorted name order."""
    if path.is_dir():
        names = sorted(
            str(p.relative_to(path))
            for p in path.rglob("*")
            if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file()
        )
        return [(name, (path / name).read_bytes) for name in names]
    if path.suffix.lower() == ".zip":
        zf = zipfile.ZipFile(path)
        names = sorted(
            n for n in zf.namelist() if Path(n).suffix.lower() in IMAGE_EXTENSIONS
        )
        return [(name, (lambda n=name: zf.read(n))) for name in names]
    raise DatasetError(f"{path} is neither a directory nor a zip archive")


class ImageDataset:
    """Decoded, normalized image store with deterministic batch sampling."""

    def __init__(self, source: DatasetSource, decode_workers: int = 4):
        source.validate()
        self.source = source
        path = Path(source.path)
        if not path.exists():
            raise DatasetError(f"dataset path does not exist: {path}")
        entries = _list_entries(path)
        if not entries:
            raise DatasetError(f"no images found under {path}")
        self.names = [name for name, _ in entries]

        hasher = hashlib.sha256()
        raw: list[bytes] = []
        for name, read in entries:
            blob = read()
            hasher.update(name.encode())
            hasher.update(blob)
            raw.append(blob)
        self.content_hash = hasher.hexdigest()

        def decode(item):
            name, blob = item
            try:
                img = Image.open(io.BytesIO(blob))
                img = img.convert("RGB")  # normalizes bit depth to 8-bit
            except Exception as e:
                raise DatasetError(f"cannot decode image {name!r}: {e}") from e
            return _square_resize(img, source.resolution, source.crop_policy)

        with ThreadPoolExecutor(max_workers=decode_workers) as pool:
            decoded = list(pool.map(decode, zip(self.names, raw)))
        self.pixels = np.stack(decoded)  # (N, R, R, 3) uint8

    @property
    def num_base_images(self) -> int:
        return self.pixels.shape[0]

    @property
    def num_items(self) -> int:
        return self.num_base_images * (2 if self.source.xflip else 1)

    def item(self, index: int) -> np.ndarray:
        n = self.num_base_images
        if not 0 <= index < self.num_items:
            raise DatasetError(f"item index {index} out of range 0..{self.num_items - 1}")
        if index < n:
            return self.pixels[index]
        return self.pixels[index - n][:, ::-1, :]  # x-flip amplification

    def batch_at(self, seed: int, step: int, batch_size: int) -> torch.Tensor:
        """Batch for a given step; a pure function of (seed, step)."""
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(step,))
        )
        replace = self.num_items < batch_size
        idx = rng.choice(self.num_items, size=batch_size, replace=replace)
        stack = np.stack([self.item(int(i)) for i in idx])
        return _to_unit_range(stack)

    def batches(self, batch_size: int, seed: int, start_step: int = 0):
        """Infinite deterministic batch stream keyed to the step counter."""
        step = start_step
        while True:
            yield self.batch_at(seed, step, batch_size)
            step += 1

    def all_images(self, limit: int | None = None) -> torch.Tensor:
        n = self.num_base_images if limit is None else min(limit, self.num_base_images)
        return _to_unit_range(self.pixels[:n])


def _square_resize(img: Image.Image, resolution: int, crop_policy: str) -> np.ndarray:
    if crop_policy == "center_crop" and img.width != img.height:
        side = min(img.width, img.height)
        left = (img.width - side) // 2
        top = (img.height - side) // 2
        img = img.crop((left, top, left + side, top + side))
    if img.size != (resolution, resolution):
        img = img.resize((resolution, resolution), Image.LANCZOS)
    return np.asarray(img, dtype=np.uint8)


def _to_unit_range(pixels: np.ndarray) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(pixels)).float()
    x = x.permute(0, 3, 1, 2) / 127.5 - 1.0
    return x


def ingest_dataset(source: DatasetSource, decode_workers: int = 4) -> ImageDataset:
    return ImageDataset(source, decode_workers=decode_workers)


def synthesize_dataset(
    directory, n_images: int, resolution: int, seed: int = 0
) -> Path:
    """Write a small synthetic image set (shapes on gradient backgrounds).

    Deterministic given the seed; used by tests and desk-scale experiments
    where no real dataset is available.
    """
    from PIL import ImageDraw

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    for i in range(n_images):
        top = rng.integers(0, 256, size=3)
        bottom = rng.integers(0, 256, size=3)
        rows = np.linspace(0, 1, resolution)[:, None, None]
        grad = (1 - rows) * top[None, None, :] + rows * bottom[None, None, :]
        canvas = np.repeat(grad, resolution, axis=1).astype(np.uint8)
        img = Image.fromarray(canvas)
        draw = ImageDraw.Draw(img)
        for _ in range(int(rng.integers(1, 4))):
            color = tuple(int(c) for c in rng.integers(0, 256, size=3))
            x0, y0 = rng.integers(0, resolution - 8, size=2)
            w, h = rng.integers(4, max(resolution // 2, 5), size=2)
            box = (int(x0), int(y0), int(min(x0 + w, resolution - 1)),
                   int(min(y0 + h, resolution - 1)))
            if rng.random() < 0.5:
                draw.ellipse(box, fill=color)
            else:
                draw.rectangle(box, fill=color)
        img.save(directory / f"img_{i:05d}.png")
    return directory
