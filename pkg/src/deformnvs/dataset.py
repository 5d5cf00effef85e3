"""On-disk scene datasets: manifest.json + .ten arrays.

The manifest schema is the repo's single ingestion format; anything
converted into it (synthetic or real) can be trained on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tenio
from .geometry import Camera


class DatasetError(ValueError):
    pass


@dataclass
class FlowPair:
    """Pixel-displacement images between a target and a source frame."""

    tgt: int
    src: int
    fwd: np.ndarray  # (H, W, 2) tgt->src displacement, pixels
    bwd: np.ndarray  # (H, W, 2) src->tgt displacement, pixels
    occl: np.ndarray  # (H, W) bool, occlusion labels for the fwd direction


@dataclass
class Frame:
    index: int
    timestamp: float
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) float32 in [0, 1]
    camera: Camera
    cse: np.ndarray | None = None  # (H, W, D_CSE)
    depth: np.ndarray | None = None  # (H, W)


class SceneDataset:
    def __init__(
        self,
        scene_id: str,
        frames: list[Frame],
        bounding_center: np.ndarray,
        bounding_radius: float,
        flow_pairs: dict[tuple[int, int], FlowPair] | None = None,
    ):
        self.scene_id = scene_id
        self.frames = frames
        self.bounding_center = np.asarray(bounding_center, dtype=np.float64)
        self.bounding_radius = float(bounding_radius)
        self.flow_pairs = flow_pairs or {}

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames[0].image.shape[0]

    @property
    def width(self) -> int:
        return self.frames[0].image.shape[1]

    @property
    def d_cse(self) -> int:
        cse = self.frames[0].cse
        return 0 if cse is None else cse.shape[-1]

    def near_far(self, camera: Camera) -> tuple[float, float]:
        """Scene depth bounds for a camera: bounding sphere padded by 10%."""
        dist = float(np.linalg.norm(camera.center - self.bounding_center))
        r = 1.1 * self.bounding_radius
        return max(dist - r, 0.05), dist + r

    def flow_sources_for(self, tgt: int) -> list[int]:
        return [s for (t, s) in self.flow_pairs if t == tgt]


def load_dataset(path: str | Path, load_flow: bool = True) -> SceneDataset:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"no manifest.json under {root}")
    try:
        with open(manifest_path) as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed manifest: {e}") from e
    h, w = manifest["H"], manifest["W"]
    frames = []
    for fr in manifest["frames"]:
        cam = Camera.from_dict(fr["camera"], h, w)
        ts = float(fr["timestamp"])
        if not (0.0 <= ts <= 1.0):
            raise DatasetError(f"frame {fr['index']}: timestamp {ts} outside [0, 1]")
        frames.append(
            Frame(
                index=int(fr["index"]),
                timestamp=ts,
                image=tenio.load_ten(root / fr["image"]).astype(np.float32),
                mask=tenio.load_ten(root / fr["mask"]).astype(np.float32),
                camera=cam,
                cse=tenio.load_ten(root / fr["cse"]).astype(np.float32) if fr.get("cse") else None,
                depth=tenio.load_ten(root / fr["depth"]).astype(np.float32) if fr.get("depth") else None,
            )
        )
    flow_pairs = {}
    if load_flow:
        for fp in manifest.get("flow_pairs", []):
            key = (int(fp["tgt"]), int(fp["src"]))
            flow_pairs[key] = FlowPair(
                tgt=key[0],
                src=key[1],
                fwd=tenio.load_ten(root / fp["fwd"]).astype(np.float32),
                bwd=tenio.load_ten(root / fp["bwd"]).astype(np.float32),
                occl=tenio.load_ten(root / fp["occl"]).astype(bool),
            )
    bs = manifest["bounding_sphere"]
    return SceneDataset(
        scene_id=manifest.get("scene_id", root.name),
        frames=frames,
        bounding_center=np.array(bs["center"]),
        bounding_radius=bs["radius"],
        flow_pairs=flow_pairs,
    )
