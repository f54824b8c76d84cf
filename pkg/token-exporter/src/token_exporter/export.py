"""Token export: images in, qtok/ktok/desc .vgsb files plus manifest out."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ImageDecodeError
from .model import load_model
from .vgsb import write_blob

DEFAULT_LAYER = 22
MANIFEST_NAME = "manifest.json"
_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class ExportManifest:
    model_name: str
    model_version: str
    layer: int
    head_averaged: bool
    hook: str
    patch_size: int
    images: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "model_version": self.model_version,
            "layer": self.layer,
            "head_averaged": self.head_averaged,
            "hook": self.hook,
            "patch_size": self.patch_size,
            "images": list(self.images),
            "outputs": dict(self.outputs),
        }


def list_images(image_dir: str) -> list[str]:
    names = [n for n in sorted(os.listdir(image_dir))
             if n.lower().endswith(_IMAGE_SUFFIXES)]
    if not names:
        raise ValueError(f"no images found under {image_dir}")
    return names


def load_image(path: str) -> np.ndarray:
    """Decode to (h, w, 3) float64 in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError) as err:
        raise ImageDecodeError(f"cannot decode {path}: {err}") from err
    return arr


def export_tokens(image_dir: str, out_dir: str, layer: int = DEFAULT_LAYER,
                  model_name: str | None = None,
                  head: int | None = None) -> ExportManifest:
    """Write qtok_/ktok_/desc_<stem>.vgsb per image, then the manifest.

    Tokens are the pre-softmax Q/K head projections of the requested
    attention block, head-averaged unless ``head`` selects one. File
    stems reuse the image stems, so frames named by integer id drop
    straight into dataset directories. The manifest is written last; a
    crashed export leaves no manifest behind.
    """
    model = (load_model(model_name) if model_name is not None else load_model())
    cfg = model.config
    names = list_images(image_dir)
    os.makedirs(out_dir, exist_ok=True)

    manifest = ExportManifest(
        model_name=cfg.name,
        model_version=cfg.version,
        layer=layer,
        head_averaged=head is None,
        hook="pre-softmax q/k projections of the attention block, "
             + ("averaged across heads" if head is None else f"head {head}"),
        patch_size=cfg.patch_size,
    )

    for name in names:
        image = load_image(os.path.join(image_dir, name))
        q, k, desc = model.forward_tokens(image, layer, head=head)
        expected = model.token_count(image.shape[0], image.shape[1])
        if q.shape[0] != expected:
            raise AssertionError(
                f"{name}: produced {q.shape[0]} tokens, expected {expected}")
        stem = os.path.splitext(name)[0]
        files = {
            "qtok": f"qtok_{stem}.vgsb",
            "ktok": f"ktok_{stem}.vgsb",
            "desc": f"desc_{stem}.vgsb",
        }
        write_blob(os.path.join(out_dir, files["qtok"]), q.astype(np.float32))
        write_blob(os.path.join(out_dir, files["ktok"]), k.astype(np.float32))
        write_blob(os.path.join(out_dir, files["desc"]), desc.astype(np.float32))
        manifest.images.append(name)
        manifest.outputs[name] = files

    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=1)
        fh.write("\n")
    return manifest
