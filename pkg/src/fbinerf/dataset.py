"""Dataset persistence.

Layout on disk:

    root/
      images/frame_0000.png      8-bit RGB
      cameras.json               one record per frame (shared schema below)
      depth/frame_0000.raw       optional, 32-bit little-endian float
      depth/frame_0000.meta      JSON dims for the raw file
      depth/frame_0000_mask.png  validity mask (255 = valid)
      priors/...                 optional depth priors, same format as depth/

Camera records: {"model", "fx", "fy", "cx", "cy", "width", "height",
"k1", "k2", "k3", "pose": [6 floats]} with pose as axis-angle + translation
(camera-to-world).  Images round-trip bit-exactly; depth maps use +inf in
memory for invalid pixels, encoded as 0 plus a mask on disk.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .cameras import FisheyeCamera, PinholeCamera
from .errors import (
    CorruptDepthFile,
    DimensionMismatch,
    MissingCameraRecord,
    MissingPriors,
)
from .geometry import PoseSE3
from .synth import PosedPinhole, SyntheticScene, render_all

log = logging.getLogger(__name__)

_FRAME = "frame_{:04d}"


@dataclass
class Dataset:
    """In-memory dataset: float images in [0, 1], posed cameras, depth maps."""

    images: list
    cameras: list
    depths: list | None = None
    priors: list | None = None

    def __post_init__(self):
        if len(self.images) != len(self.cameras):
            raise ValueError("images and cameras differ in length")

    @property
    def kind(self) -> str:
        return "fisheye" if isinstance(self.cameras[0], FisheyeCamera) else "pinhole"

    @property
    def camera(self) -> PinholeCamera:
        """Shared pinhole intrinsics (first record)."""
        cam = self.cameras[0]
        return cam.intrinsics if isinstance(cam, FisheyeCamera) else cam.camera

    @property
    def poses(self):
        return [c.pose for c in self.cameras]


def camera_record(cam) -> dict:
    if isinstance(cam, FisheyeCamera):
        intr, model, ks = cam.intrinsics, "fisheye", (cam.k1, cam.k2, cam.k3)
    elif isinstance(cam, PosedPinhole):
        intr, model, ks = cam.camera, "pinhole", (0.0, 0.0, 0.0)
    else:
        raise TypeError(f"cannot serialize camera of type {type(cam).__name__}")
    return {
        "model": model,
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "width": intr.width,
        "height": intr.height,
        "k1": ks[0],
        "k2": ks[1],
        "k3": ks[2],
        "pose": list(map(float, cam.pose.as_vector())),
    }


def camera_from_record(rec: dict):
    try:
        intr = PinholeCamera(
            rec["fx"], rec["fy"], rec["cx"], rec["cy"], int(rec["width"]), int(rec["height"])
        )
        pose = PoseSE3.from_vector(rec["pose"])
        model = rec["model"]
    except (KeyError, TypeError) as exc:
        raise MissingCameraRecord(f"malformed camera record: {exc}") from exc
    if model == "fisheye":
        return FisheyeCamera(intr, pose, rec.get("k1", 0.0), rec.get("k2", 0.0), rec.get("k3", 0.0))
    if model == "pinhole":
        return PosedPinhole(intr, pose)
    raise MissingCameraRecord(f"unknown camera model {model!r}")


def save_image(path, image: np.ndarray) -> None:
    """Quantize [0, 1] floats to 8-bit RGB and write a PNG."""
    arr = np.asarray(image, dtype=np.float64)
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_depth(dirpath, stem: str, depth: np.ndarray) -> None:
    dirpath = Path(dirpath)
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.isfinite(depth)
    raw = np.where(valid, depth, 0.0).astype("<f4")
    raw.tofile(dirpath / f"{stem}.raw")
    meta = {"height": depth.shape[0], "width": depth.shape[1], "dtype": "<f4"}
    (dirpath / f"{stem}.meta").write_text(json.dumps(meta, sort_keys=True) + "\n")
    Image.fromarray(np.where(valid, 255, 0).astype(np.uint8), mode="L").save(
        dirpath / f"{stem}_mask.png", format="PNG"
    )


def load_depth(dirpath, stem: str) -> np.ndarray:
    dirpath = Path(dirpath)
    meta_path = dirpath / f"{stem}.meta"
    raw_path = dirpath / f"{stem}.raw"
    try:
        meta = json.loads(meta_path.read_text())
        h, w = int(meta["height"]), int(meta["width"])
    except (OSError, ValueError, KeyError) as exc:
        raise CorruptDepthFile(f"unreadable meta for {stem}: {exc}") from exc
    try:
        raw = np.fromfile(raw_path, dtype="<f4")
    except OSError as exc:
        raise CorruptDepthFile(f"unreadable raw depth for {stem}: {exc}") from exc
    if raw.size != h * w:
        raise CorruptDepthFile(
            f"{stem}.raw holds {raw.size} values, expected {h}x{w}={h * w}"
        )
    depth = raw.reshape(h, w).astype(np.float64)
    mask_path = dirpath / f"{stem}_mask.png"
    if mask_path.exists():
        with Image.open(mask_path) as im:
            mask = np.asarray(im.convert("L")) > 0
        if mask.shape != (h, w):
            raise CorruptDepthFile(f"mask dims {mask.shape} do not match {stem}.meta")
        depth = np.where(mask, depth, np.inf)
    return depth


def save_dataset(ds: Dataset, path) -> None:
    """Write the full on-disk layout; overwrites files in place."""
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for i, (image, cam) in enumerate(zip(ds.images, ds.cameras)):
        save_image(root / "images" / f"{_FRAME.format(i)}.png", image)
        records.append(camera_record(cam))
    (root / "cameras.json").write_text(json.dumps(records, indent=2) + "\n")
    for name, maps in (("depth", ds.depths), ("priors", ds.priors)):
        if maps is None:
            continue
        sub = root / name
        sub.mkdir(parents=True, exist_ok=True)
        for i, depth in enumerate(maps):
            save_depth(sub, _FRAME.format(i), depth)


def load_dataset(path) -> Dataset:
    root = Path(path)
    image_paths = sorted((root / "images").glob("frame_*.png"))
    if not image_paths:
        raise MissingCameraRecord(f"no images found under {root / 'images'}")
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise MissingCameraRecord(f"{cam_path} is missing")
    records = json.loads(cam_path.read_text())
    images, cameras = [], []
    for i, img_path in enumerate(image_paths):
        if i >= len(records):
            raise MissingCameraRecord(f"no camera record for {img_path.name}")
        image = load_image(img_path)
        cam = camera_from_record(records[i])
        intr = cam.intrinsics if isinstance(cam, FisheyeCamera) else cam.camera
        if image.shape[:2] != (intr.height, intr.width):
            raise DimensionMismatch(
                f"{img_path.name} is {image.shape[1]}x{image.shape[0]}, camera record "
                f"says {intr.width}x{intr.height}"
            )
        images.append(image)
        cameras.append(cam)

    def load_maps(name):
        sub = root / name
        if not sub.is_dir():
            return None
        maps = []
        for i, image in enumerate(images):
            depth = load_depth(sub, _FRAME.format(i))
            if depth.shape != image.shape[:2]:
                raise DimensionMismatch(
                    f"{name}/{_FRAME.format(i)} dims {depth.shape} do not match image "
                    f"{image.shape[:2]}"
                )
            maps.append(depth)
        return maps

    return Dataset(images, cameras, load_maps("depth"), load_maps("priors"))


def dataset_from_scene(scene: SyntheticScene) -> Dataset:
    """Render a synthetic scene into an in-memory dataset with true depth."""
    images, depths = render_all(scene)
    return Dataset(list(images), list(scene.cameras), depths=list(depths))


def _fill_invalid(depth: np.ndarray) -> np.ndarray:
    """Replace non-finite pixels with the median of the finite ones."""
    finite = np.isfinite(depth)
    if not np.any(finite):
        raise CorruptDepthFile("depth map has no valid pixels")
    return np.where(finite, depth, np.median(depth[finite]))


def init_depth(ds: Dataset, source: str, *, constant: float = 2.0, align: bool = True):
    """Initial depth maps per frame from priors, a constant, or ground truth.

    With `align`, prior maps are rescaled per frame so their median matches
    the frame's true median depth, which removes the global scale ambiguity
    monocular priors carry.
    """
    shapes = [im.shape[:2] for im in ds.images]
    if source == "constant":
        if constant <= 0:
            raise ValueError("constant depth must be positive")
        return [np.full(s, float(constant)) for s in shapes]
    if source == "ground_truth":
        if ds.depths is None:
            raise CorruptDepthFile("dataset has no depth/ maps for ground_truth init")
        return [_fill_invalid(d) for d in ds.depths]
    if source == "priors":
        if ds.priors is None:
            raise MissingPriors("dataset has no priors/ directory")
        out = []
        for i, prior in enumerate(ds.priors):
            filled = _fill_invalid(prior)
            if align and ds.depths is not None:
                ref = ds.depths[i]
                ref_med = np.median(ref[np.isfinite(ref)])
                scale = float(ref_med) / float(np.median(filled))
                filled = filled * scale
            out.append(filled)
        return out
    raise ValueError(f"unknown depth init source {source!r}")
