"""Feature-map extraction and batch-norm recalibration."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .fmap import write_fmap
from .models import LoadedModel, bn_stats_hash

DEFAULT_RESIZE = 724
DEFAULT_BATCH_SIZE = 16

IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".webp")


def preprocess(
    model: LoadedModel,
    image_path,
    bbox: Sequence[float] | None = None,
    resize: int = DEFAULT_RESIZE,
) -> torch.Tensor:
    """Load, optionally crop, resize, and normalize one image to a CHW tensor."""
    with Image.open(image_path) as img:
        img = img.convert("RGB")
        if bbox is not None:
            x1, y1, x2, y2 = bbox
            if not (x1 < x2 and y1 < y2):
                raise ValueError(f"malformed bbox {tuple(bbox)}")
            img = img.crop((
                int(math.floor(x1)), int(math.floor(y1)),
                int(math.ceil(x2)), int(math.ceil(y2)),
            ))
        img = img.resize((resize, resize), Image.BILINEAR)
        pixels = np.asarray(img, dtype=np.float32) / 255.0
    mean = np.asarray(model.spec.input_mean, dtype=np.float32)
    std = np.asarray(model.spec.input_std, dtype=np.float32)
    pixels = (pixels - mean) / std
    return torch.from_numpy(np.ascontiguousarray(pixels.transpose(2, 0, 1)))


def extract(
    model: LoadedModel,
    image_path,
    out_path,
    bbox: Sequence[float] | None = None,
    resize: int = DEFAULT_RESIZE,
) -> tuple[int, int, int]:
    """Run one image through the trunk in inference mode and dump the FMAP.

    Returns the (C, H, W) shape of the written activation tensor.
    """
    tensor = preprocess(model, image_path, bbox=bbox, resize=resize)
    model.trunk.eval()
    with torch.inference_mode():
        activation = model.trunk(tensor[None])[0]
    array = activation.detach().cpu().numpy().astype(np.float32)
    if array.shape[0] != model.spec.channels:
        raise RuntimeError(
            f"{model.spec.name} produced {array.shape[0]} channels, "
            f"expected {model.spec.channels}"
        )
    write_fmap(array, out_path)
    return array.shape


def recalibrate_bn(
    model: LoadedModel,
    image_paths: Iterable,
    passes: int = 1,
    batch_size: int = DEFAULT_BATCH_SIZE,
    resize: int = DEFAULT_RESIZE,
) -> str:
    """Refresh batch-norm running statistics on the extraction corpus.

    Forward passes run in training mode with gradients disabled and no
    parameter updates; the model is returned to inference mode afterwards.
    Returns the new statistics hash. Deterministic for a fixed image order,
    pass count, and batch size.
    """
    paths = list(image_paths)
    if not paths:
        raise ValueError("recalibration needs at least one image")
    if passes < 1:
        raise ValueError(f"passes must be >= 1, got {passes}")
    model.trunk.train()
    try:
        with torch.no_grad():
            for _ in range(passes):
                for start in range(0, len(paths), batch_size):
                    batch = torch.stack([
                        preprocess(model, p, resize=resize)
                        for p in paths[start : start + batch_size]
                    ])
                    model.trunk(batch)
    finally:
        model.trunk.eval()
    return bn_stats_hash(model.trunk)


def find_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(
        p for p in directory.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES
    )


def locate_image(directory, name: str) -> Path:
    """Resolve an image by ground-truth name (extension may be omitted)."""
    directory = Path(directory)
    direct = directory / name
    if direct.is_file():
        return direct
    for suffix in IMAGE_SUFFIXES:
        candidate = directory / f"{name}{suffix}"
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"no image file for {name!r} under {directory}")


def load_query_bboxes(gt_path) -> dict[str, tuple[float, ...] | None]:
    """Query name -> bbox from the engine's ground-truth JSON schema."""
    doc = json.loads(Path(gt_path).read_text())
    if "queries" not in doc:
        raise ValueError("ground truth JSON lacks a 'queries' field")
    out = {}
    for entry in doc["queries"]:
        bbox = entry.get("bbox")
        out[entry["name"]] = tuple(bbox) if bbox else None
    return out
