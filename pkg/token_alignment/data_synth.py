"""
Two-domain synthetic detection data.

Source scenes are colored circles, squares and triangles on a dark background;
the target domain is the same scenes under a fog-like corruption (blur, haze
toward white, noise), so labels are shared and only appearance shifts.

Layout on disk::

    <root>/{source,target}/{train,val}/images/<id>.ppm
    <root>/{source,target}/{train,val}/annotations.jsonl
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw, UnidentifiedImageError
from scipy import ndimage
from torch import Tensor
from torch.utils.data import Dataset

from . import constants
from .detr_core import GroundTruthSet
from .exceptions import ConfigurationError, DataError, GenerationError, InvalidInputError, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SceneSpec:
    image_size: Tuple[int, int] = constants.IMAGE_SIZE  # (height, width)
    object_count_range: Tuple[int, int] = constants.OBJECT_COUNT_RANGE
    size_range: Tuple[int, int] = constants.OBJECT_SIZE_RANGE
    palette: Tuple[Tuple[int, int, int], ...] = constants.SHAPE_PALETTE
    min_separation: int = constants.MIN_SEPARATION
    max_retries: int = constants.PLACEMENT_RETRIES
    seed: int = constants.SEED


@dataclass(frozen=True)
class DomainShiftSpec:
    blur_radius: int = 0
    haze: float = 0.0
    noise_std: float = 0.0
    seed: int = constants.SEED

    @classmethod
    def from_preset(cls, name: str, seed: int = constants.SEED) -> "DomainShiftSpec":
        if name not in constants.SHIFT_PRESETS:
            raise ConfigurationError(
                f"Unknown shift preset '{name}'; expected one of {', '.join(constants.SHIFT_PRESETS)}."
            )
        return cls(seed=seed, **constants.SHIFT_PRESETS[name])

    @property
    def is_identity(self) -> bool:
        return self.blur_radius == 0 and self.haze == 0 and self.noise_std == 0


@dataclass
class AnnotationRecord:
    """
    One image's labels. ``objects`` holds ``{"bbox": [cx, cy, w, h], "category": c}``
    with normalized boxes and ``c`` in ``1..3``.
    """

    id: str
    width: int
    height: int
    objects: List[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "width": self.width,
            "height": self.height,
            "objects": [{"bbox": list(obj["bbox"]), "category": obj["category"]} for obj in self.objects],
        }

    def ground_truth(self) -> GroundTruthSet:
        return GroundTruthSet.from_objects(self.objects)


def to_uint8(image: Tensor) -> np.ndarray:
    """``3 x H x W`` floats in [0, 1] to an ``H x W x 3`` byte array."""
    array = image.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(array * 255).astype(np.uint8)


def from_uint8(array: np.ndarray) -> Tensor:
    return torch.from_numpy(np.ascontiguousarray(array)).permute(2, 0, 1).float() / 255


def _draw_shape(mask: Image.Image, category: int, left: int, top: int, size: int) -> None:
    right, bottom = left + size - 1, top + size - 1
    draw = ImageDraw.Draw(mask)
    if category == 1:
        draw.ellipse([left, top, right, bottom], fill=255)
    elif category == 2:
        draw.rectangle([left, top, right, bottom], fill=255)
    else:
        draw.polygon([(left, bottom), (right, bottom), ((left + right) / 2, top)], fill=255)


def _apart(box, other, separation: int) -> bool:
    left, top, size = box
    other_left, other_top, other_size = other
    return (
        left >= other_left + other_size + separation
        or other_left >= left + size + separation
        or top >= other_top + other_size + separation
        or other_top >= top + size + separation
    )


def generate_scene(spec: SceneSpec, index: int) -> Tuple[Tensor, AnnotationRecord]:
    """
    Render scene ``index``. A pure function of ``(spec, index)``.

    Shape squares keep at least ``min_separation`` pixels between them along
    one axis, so each box is the tight pixel extent of its shape.

    Raises:
        GenerationError: If a shape cannot be placed within ``max_retries`` draws.
    """
    height, width = spec.image_size
    min_size, max_size = spec.size_range
    if max_size > min(height, width):
        raise GenerationError(f"Shapes up to {max_size}px do not fit a {height}x{width} image.")

    rng = np.random.default_rng([spec.seed, index])
    background = tuple(int(v) for v in rng.integers(*constants.BACKGROUND_RANGE, size=3, endpoint=True))
    canvas = Image.new("RGB", (width, height), background)

    low, high = spec.object_count_range
    count = int(rng.integers(low, high, endpoint=True))
    placed = []
    objects = []
    for object_number in range(count):
        for _ in range(spec.max_retries):
            size = int(rng.integers(min_size, max_size, endpoint=True))
            left = int(rng.integers(0, width - size, endpoint=True))
            top = int(rng.integers(0, height - size, endpoint=True))
            if all(_apart((left, top, size), other, spec.min_separation) for other in placed):
                break
        else:
            raise GenerationError(
                f"Scene {index} (seed {spec.seed}): could not place object {object_number + 1} of {count} "
                f"after {spec.max_retries} attempts in a {height}x{width} image."
            )
        placed.append((left, top, size))

        category = int(rng.integers(1, constants.NUM_FOREGROUND_CLASSES, endpoint=True))
        color = tuple(spec.palette[int(rng.integers(len(spec.palette)))])
        mask = Image.new("L", (width, height), 0)
        _draw_shape(mask, category, left, top, size)
        extent = mask.getbbox()
        if extent is None:
            raise GenerationError(f"Scene {index}: object {object_number + 1} rendered empty.")
        canvas.paste(color, mask=mask)

        x0, y0, x1, y1 = extent
        objects.append(
            {
                "bbox": [(x0 + x1) / 2 / width, (y0 + y1) / 2 / height, (x1 - x0) / width, (y1 - y0) / height],
                "category": category,
            }
        )

    record = AnnotationRecord(id=f"{index:06d}", width=width, height=height, objects=objects)
    return from_uint8(np.asarray(canvas)), record


def gaussian_kernel(radius: int) -> np.ndarray:
    sigma = radius / 2
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets ** 2) / (2 * sigma ** 2))
    return kernel / kernel.sum()


def _image_digest(array: np.ndarray) -> int:
    return int.from_bytes(hashlib.sha256(np.ascontiguousarray(array).tobytes()).digest()[:8], "little")


def apply_domain_shift(image: Tensor, spec: DomainShiftSpec) -> Tensor:
    """
    Separable Gaussian blur, then a haze blend toward white, then clipped Gaussian
    noise seeded by ``(spec.seed, image content)``. Boxes are untouched.
    """
    if spec.is_identity:
        return image.clone()

    original = image.detach().cpu().numpy()
    array = original.astype(np.float64)
    if spec.blur_radius > 0:
        kernel = gaussian_kernel(spec.blur_radius)
        array = ndimage.convolve1d(array, kernel, axis=1, mode="nearest")
        array = ndimage.convolve1d(array, kernel, axis=2, mode="nearest")
    if spec.haze > 0:
        array = (1 - spec.haze) * array + spec.haze
    if spec.noise_std > 0:
        rng = np.random.default_rng([spec.seed, _image_digest(original)])
        array = array + rng.normal(0.0, spec.noise_std, size=array.shape)
    return torch.from_numpy(np.clip(array, 0.0, 1.0)).to(image.dtype)


def write_dataset(directory, images: Sequence[Tensor], annotations: Sequence[AnnotationRecord]) -> Path:
    """
    Write one split: 8-bit binary PPM images plus a JSON-lines annotation file.
    """
    if len(images) != len(annotations):
        raise InvalidInputError(f"{len(images)} images but {len(annotations)} annotation records.")
    directory = Path(directory)
    images_dir = directory / constants.IMAGES_DIRNAME
    images_dir.mkdir(parents=True, exist_ok=True)

    for image, record in zip(images, annotations):
        Image.fromarray(to_uint8(image)).save(images_dir / f"{record.id}.ppm", format="PPM")

    with open(directory / constants.ANNOTATIONS_FILENAME, "w", encoding="utf-8") as handle:
        for record in annotations:
            handle.write(json.dumps(record.to_json()) + "\n")
    return directory


def _parse_record(path: Path, offset: int, line: bytes) -> AnnotationRecord:
    from .serializers import AnnotationRecordSerializer

    try:
        text = line.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(path, offset + exc.start, "invalid UTF-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(path, offset + len(text[:exc.pos].encode("utf-8")), exc.msg)

    serializer = AnnotationRecordSerializer(data=payload)
    if not serializer.is_valid():
        raise ParseError(path, offset, f"invalid annotation record: {serializer.errors}")
    return AnnotationRecord(**serializer.validated_data)


def load_image(path) -> Tensor:
    """
    Read an RGB image file into a ``3 x H x W`` tensor in [0, 1].

    Raises:
        DataError: If the file does not exist.
        ParseError: If Pillow cannot decode it.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Missing image {path}.")
    try:
        with Image.open(path) as handle:
            handle.load()
            picture = handle.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise ParseError(path, 0, f"unreadable image: {exc}")
    return from_uint8(np.asarray(picture))


def _read_image(path: Path, record: AnnotationRecord) -> Tensor:
    image = load_image(path)
    height, width = image.shape[-2:]
    if (width, height) != (record.width, record.height):
        raise ParseError(path, 0, f"image is {width}x{height}, record '{record.id}' says {record.width}x{record.height}")
    return image


def read_dataset(directory) -> List[Tuple[Tensor, AnnotationRecord]]:
    """
    Read one split written by ``write_dataset``.

    Raises:
        DataError: If the directory, annotation file or an image is missing.
        ParseError: On a malformed annotation line or image.
    """
    directory = Path(directory)
    annotations_path = directory / constants.ANNOTATIONS_FILENAME
    if not annotations_path.is_file():
        raise DataError(f"No {constants.ANNOTATIONS_FILENAME} in {directory}.")

    samples = []
    offset = 0
    for line in annotations_path.read_bytes().split(b"\n"):
        if line.strip():
            record = _parse_record(annotations_path, offset, line)
            image = _read_image(directory / constants.IMAGES_DIRNAME / f"{record.id}.ppm", record)
            samples.append((image, record))
        offset += len(line) + 1
    return samples


def split_directory(root, domain: str, split: str) -> Path:
    return Path(root) / domain / split


def generate_domain_pair(
    root,
    scene_spec: SceneSpec,
    shift_spec: DomainShiftSpec,
    num_train: int,
    num_val: int,
    workers: int = 1,
) -> dict:
    """
    Generate source and fog-shifted target splits. Validation indices continue
    after the training ones. Returns the number of images per split.
    """
    root = Path(root)
    counts = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for split, start, count in (("train", 0, num_train), ("val", num_train, num_val)):
            scenes = list(pool.map(partial(generate_scene, scene_spec), range(start, start + count)))
            images = [image for image, _ in scenes]
            records = [record for _, record in scenes]
            shifted = list(pool.map(partial(apply_domain_shift, spec=shift_spec), images))

            write_dataset(split_directory(root, "source", split), images, records)
            write_dataset(split_directory(root, "target", split), shifted, records)
            counts[split] = count
            logger.info("Wrote %d %s images per domain under %s", count, split, root)

    metadata = {"scene": asdict(scene_spec), "shift": asdict(shift_spec), "counts": counts}
    (root / "dataset.json").write_text(json.dumps(metadata, indent=2), encoding="utf-8")
    return counts


class SyntheticDetectionDataset(Dataset):
    """A split held in memory: ``(image, GroundTruthSet, record)`` items."""

    def __init__(self, samples: Sequence[Tuple[Tensor, AnnotationRecord]]):
        self.samples = list(samples)

    @classmethod
    def from_directory(cls, root, domain: str, split: str) -> "SyntheticDetectionDataset":
        return cls(read_dataset(split_directory(root, domain, split)))

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, index):
        image, record = self.samples[index]
        return image, record.ground_truth(), record


def collate_samples(batch):
    images, targets, records = zip(*batch)
    return torch.stack(images), list(targets), list(records)
