"""Batch export: images through the backbone into .efvp and EFMT files."""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from vitexport.config import ExportConfig, load_geo_sidecar
from vitexport.formats import ExportRecord, write_container, write_matrix
from vitexport.model import Backbone, LayerCapture, load_backbone
from vitexport.scores import cls_score_map, global_descriptor, select_keypoints

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

# DINOv2 preprocessing constants (ImageNet statistics)
_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


def load_image_tensor(path, size: int) -> torch.Tensor:
    """Square-resized, normalized (3, size, size) float tensor."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((size, size), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    arr = (arr - _MEAN) / _STD
    return torch.from_numpy(arr.transpose(2, 0, 1))


def list_images(directory) -> list[Path]:
    root = Path(directory)
    return sorted(p for p in root.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _record_from_capture(
    image_id: str, geo: tuple, cap: LayerCapture, threshold: float
) -> ExportRecord:
    scores, descriptors = select_keypoints(cap, threshold)
    return ExportRecord(
        image_id=image_id,
        geo=geo,
        global_descriptor=global_descriptor(cap),
        local_scores=scores,
        local_descriptors=descriptors,
    )


def export(cfg: ExportConfig, out_path) -> Path:
    """Export every readable image in the directory; returns the .efvp path.

    Unreadable images are skipped with a warning and listed in the
    ``export_log.json`` written next to the output; a missing geo row is an
    error.
    """
    backbone = load_backbone(cfg.model)
    geo_tags = load_geo_sidecar(cfg.geo_sidecar) if cfg.geo_sidecar else None
    images = list_images(cfg.image_dir)
    if not images:
        raise ValueError(f"no images found under {cfg.image_dir}")

    if geo_tags is not None:
        missing = [p.stem for p in images if p.stem not in geo_tags]
        if missing:
            raise ValueError(f"geo sidecar is missing rows for: {missing[:5]}")

    records: list[ExportRecord] = []
    skipped: list[dict] = []
    for path in images:
        try:
            tensor = load_image_tensor(path, cfg.image_size)
        except OSError as e:
            warnings.warn(f"skipping unreadable image {path.name}: {e}")
            skipped.append({"file": path.name, "reason": str(e)})
            continue
        cap = backbone.capture(tensor, cfg.layer_offset)
        geo = geo_tags[path.stem] if geo_tags is not None else ("none",)
        records.append(_record_from_capture(path.stem, geo, cap, cfg.score_threshold))

    if not records:
        raise ValueError("every image failed to load; nothing to export")
    d_g = records[0].global_descriptor.shape[0]
    d_l = records[0].local_descriptors.shape[1] if records[0].local_descriptors.size else d_g

    out_path = Path(out_path)
    write_container(out_path, d_g, d_l, records)
    log = {
        "model": cfg.model,
        "layer_offset": cfg.layer_offset,
        "capture_point": "input of the selected block's qkv projection (post-LayerNorm)",
        "image_size": cfg.image_size,
        "score_threshold": cfg.score_threshold,
        "exported": [r.image_id for r in records],
        "skipped": skipped,
    }
    out_path.with_name("export_log.json").write_text(json.dumps(log, indent=2) + "\n")
    return out_path


MATRIX_NAMES = ("tokens", "w_q", "w_k", "w_v", "b_q", "b_k", "b_v")


def export_matrices(cfg: ExportConfig, image_path, out_dir) -> dict[str, Path]:
    """Dump the raw capture for one image as EFMT files, one per matrix."""
    backbone = load_backbone(cfg.model)
    tensor = load_image_tensor(image_path, cfg.image_size)
    cap = backbone.capture(tensor, cfg.layer_offset)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    written: dict[str, Path] = {}
    for name in MATRIX_NAMES:
        path = out_dir / f"{stem}.{name}.efmt"
        write_matrix(path, getattr(cap, name))
        written[name] = path
    meta = {
        "image": Path(image_path).name,
        "model": cfg.model,
        "layer_offset": cfg.layer_offset,
        "heads": cap.heads,
        "n_registers": cap.n_registers,
    }
    meta_path = out_dir / f"{stem}.capture.json"
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    written["meta"] = meta_path
    return written


def scores_for_image(cfg: ExportConfig, image_path) -> np.ndarray:
    """Convenience: just the patch score map for one image."""
    backbone = load_backbone(cfg.model)
    tensor = load_image_tensor(image_path, cfg.image_size)
    return cls_score_map(backbone.capture(tensor, cfg.layer_offset))
