"""Run-directory persistence: config snapshots, images, masks, metrics, and
manifests. A persisted run can be re-executed from its config + seeds alone."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import ConfigError
from .mask import EditMask, save_mask_png
from .pipeline import EditConfig

RUN_SCHEMA_VERSION = 1


def save_image_png(image: Tensor, path) -> None:
    """Write a (3, H, W) tensor in [-1, 1] as an 8-bit PNG (symmetric scaling)."""
    arr = image.detach().cpu().numpy()
    arr = np.clip((arr + 1.0) / 2.0 * 255.0, 0.0, 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0), mode="RGB").save(path)


def load_image_png(path) -> Tensor:
    """Read an RGB PNG back into a (3, H, W) tensor in [-1, 1]."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1) / 255.0 * 2.0 - 1.0)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_run_dir(run_dir, config: EditConfig, manifest: dict,
                  images: Optional[dict[str, Tensor]] = None,
                  mask: Optional[EditMask] = None, patch_size: int = 4,
                  metrics: Optional[dict] = None,
                  diagnostics: Optional[dict] = None) -> Path:
    """Lay out one run directory: config.json, manifest.json, PNGs, mask
    exports at both resolutions, metrics.json, diagnostics.json."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(config.to_json() + "\n")
    write_json(run_dir / "manifest.json", {"schema_version": RUN_SCHEMA_VERSION, **manifest})
    for name, img in (images or {}).items():
        save_image_png(img, run_dir / f"{name}.png")
    if mask is not None:
        save_mask_png(mask, run_dir / "mask_patch.png")
        save_mask_png(mask, run_dir / "mask_pixel.png", patch_size=patch_size)
    if metrics is not None:
        write_json(run_dir / "metrics.json", metrics)
    if diagnostics is not None:
        write_json(run_dir / "diagnostics.json", diagnostics)
    return run_dir


def read_run_config(run_dir) -> EditConfig:
    path = Path(run_dir) / "config.json"
    if not path.exists():
        raise ConfigError(f"no config.json in {run_dir}")
    return EditConfig.from_json(path.read_text())
