"""File writers for masks (binary PGM and CSV) and benchmark tables."""
import base64
import csv
import logging
from pathlib import Path
from typing import Iterable

import numpy as np

from ..models.errors import ConfigError
from ..models.schemas import BenchRecord

logger = logging.getLogger(__name__)


def mask_to_pgm_bytes(mask: np.ndarray) -> bytes:
    """Binary P5 graymap, one byte per pixel: 0 masked, 255 attended."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ConfigError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    height, width = mask.shape
    header = f"P5\n{width} {height}\n255\n".encode("ascii")
    return header + np.where(mask, 255, 0).astype(np.uint8).tobytes()


def mask_to_pgm_base64(mask: np.ndarray) -> str:
    return base64.b64encode(mask_to_pgm_bytes(mask)).decode("ascii")


def write_mask_pgm(mask: np.ndarray, path) -> Path:
    data = mask_to_pgm_bytes(mask)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    logger.info("wrote %s", path)
    return path


def write_mask_csv(mask: np.ndarray, path) -> Path:
    """Row-per-line 0/1 mirror of a mask."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise ConfigError(f"mask must be a non-empty 2-D array, got shape {mask.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([f"k{j}" for j in range(mask.shape[1])])
        writer.writerows(mask.astype(np.uint8).tolist())
    logger.info("wrote %s", path)
    return path


def write_bench_csv(records: Iterable[BenchRecord], path) -> Path:
    fields = list(BenchRecord.model_fields)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record.model_dump())
    logger.info("wrote %s", path)
    return path
