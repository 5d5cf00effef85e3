"""Single-object mask tracking over per-frame candidate masks.

A hidden Markov model over candidate indices: the unary potential is the
candidate confidence (uniform when absent), the pairwise potential is the
IoU of consecutive bounding boxes, and the maximum-probability path is
found by exact dynamic programming.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import tenio

KAPPA = 1e-3
EMPTY_BOX = (0, 0, 0, 0)


def bbox(mask: np.ndarray, threshold: float = 0.5) -> tuple[int, int, int, int]:
    """Tight (x0, y0, x1, y1) box over pixels >= threshold, exclusive upper
    bounds; an all-background mask gives the zero-area empty box."""
    ys, xs = np.nonzero(mask >= threshold)
    if ys.size == 0:
        return EMPTY_BOX
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def box_iou(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    area_a = max(0, a[2] - a[0]) * max(0, a[3] - a[1])
    area_b = max(0, b[2] - b[0]) * max(0, b[3] - b[1])
    if area_a == 0 or area_b == 0:
        return 0.0
    ix = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (area_a + area_b - inter)


def viterbi_track(
    candidates: list[np.ndarray],
    confidences: list[np.ndarray] | None = None,
    kappa: float = KAPPA,
) -> list[int]:
    """Choose one candidate per frame maximizing
    sum_j log(unary_j) + sum_j log(iou(box_j, box_{j+1}) + kappa).

    candidates: per frame, an (N_j, H, W) stack. Ties break toward the
    lowest candidate index, scanning frames left to right.
    """
    n_frames = len(candidates)
    if n_frames == 0:
        return []
    boxes = [[bbox(m) for m in frame] for frame in candidates]
    unaries = []
    for j, frame in enumerate(candidates):
        n = len(frame)
        if n < 1:
            raise ValueError(f"frame {j} has no candidates")
        if confidences is not None and confidences[j] is not None:
            c = np.asarray(confidences[j], dtype=np.float64)
            if c.shape != (n,):
                raise ValueError(f"frame {j}: {n} candidates but {c.shape} confidences")
            u = np.log(np.maximum(c, 1e-12))
        else:
            u = np.full(n, -np.log(n))
        unaries.append(u)
    # suffix DP so the path is reconstructed front to back; with argmax picking
    # the first maximum, ties resolve to the lexicographically smallest path
    trans = [
        np.array([[np.log(box_iou(a, b) + kappa) for b in boxes[j + 1]] for a in boxes[j]])
        for j in range(n_frames - 1)
    ]  # trans[j][k, k'] from frame j candidate k to frame j+1 candidate k'
    suffix = unaries[-1].copy()
    suffixes = [suffix]
    for j in range(n_frames - 2, -1, -1):
        suffix = unaries[j] + np.max(trans[j] + suffix[None, :], axis=1)
        suffixes.append(suffix)
    suffixes.reverse()
    path = [int(np.argmax(suffixes[0]))]
    for j in range(n_frames - 1):
        nxt = trans[j][path[-1]] + suffixes[j + 1]
        path.append(int(np.argmax(nxt)))
    return path


def path_score(
    candidates: list[np.ndarray],
    path: list[int],
    confidences: list[np.ndarray] | None = None,
    kappa: float = KAPPA,
) -> float:
    """Log-probability of a specific candidate path (brute-force helper)."""
    boxes = [bbox(candidates[j][k]) for j, k in enumerate(path)]
    s = 0.0
    for j, k in enumerate(path):
        n = len(candidates[j])
        if confidences is not None and confidences[j] is not None:
            s += float(np.log(max(float(confidences[j][k]), 1e-12)))
        else:
            s += -np.log(n)
    for j in range(1, len(path)):
        s += float(np.log(box_iou(boxes[j - 1], boxes[j]) + kappa))
    return s


def load_candidates(cand_dir: str | Path) -> tuple[list[np.ndarray], list[np.ndarray] | None]:
    """Read NNNN.masks.ten stacks plus the optional confidences.json."""
    cand_dir = Path(cand_dir)
    files = sorted(cand_dir.glob("*.masks.ten"))
    if not files:
        raise FileNotFoundError(f"no candidate masks in {cand_dir}")
    stacks = [tenio.load_ten(f) for f in files]
    conf_file = cand_dir / "confidences.json"
    confidences = None
    if conf_file.exists():
        raw = json.loads(conf_file.read_text())
        confidences = [
            np.asarray(raw[str(int(f.name.split(".")[0]))], dtype=np.float64) for f in files
        ]
    return stacks, confidences


def write_track(out_dir: str | Path, candidates: list[np.ndarray], path: list[int]) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for j, k in enumerate(path):
        tenio.save_ten(out_dir / f"{j:04d}.mask.ten", candidates[j][k].astype(np.float32))
    (out_dir / "indices.json").write_text(json.dumps({"indices": path}) + "\n")
