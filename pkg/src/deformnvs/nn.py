"""Small neural-net building blocks on top of the autodiff core."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tenio
from .autodiff import tensor as T
from .autodiff.gradcheck import register_op_check
from .autodiff.tensor import Tensor


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1) -> Tensor:
    """Same-padded 2D convolution, NHWC: (B,H,W,Cin) * (kh,kw,Cin,Cout)."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    bsz, h, wid, cin = x.shape
    kh, kw, cin_w, cout = w.shape
    if cin != cin_w:
        raise ValueError(f"conv channel mismatch: input {cin}, kernel {cin_w}")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wid + 2 * pw - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (B, Ho, Wo, Cin, kh, kw) -> columns ordered (kh, kw, Cin)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(bsz * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(bsz, ho, wo, cout)

    def bw(g):
        gflat = g.reshape(-1, cout)
        gcol = (gflat @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                gxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride, :] += gcol[
                    :, :, :, di, dj, :
                ]
        gx = gxp[:, ph : ph + h, pw : pw + wid, :]
        gw = (cols.T @ gflat).reshape(w.shape)
        gb = gflat.sum(axis=0)
        return gx, gw, gb

    return T.record_op(out, (x, w, b), bw, "conv2d")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x (..., Din) @ w (Din, Dout) + b."""
    out = T.matmul(x, w)
    if b is not None:
        out = T.add(out, T.broadcast_to(b, out.shape))
    return out


class ParamStore(dict):
    """Named parameter tensors with init helpers and .ten checkpointing."""

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        self.rng = rng or np.random.default_rng()
        self.dtype = np.dtype(dtype)

    def xavier(self, name: str, fan_in: int, fan_out: int, shape=None) -> Tensor:
        scale = np.sqrt(2.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        t = Tensor(self.rng.normal(0.0, scale, size=shape).astype(self.dtype), requires_grad=True)
        self[name] = t
        return t

    def zeros(self, name: str, shape) -> Tensor:
        t = Tensor(np.zeros(shape, dtype=self.dtype), requires_grad=True)
        self[name] = t
        return t

    def ones(self, name: str, shape) -> Tensor:
        t = Tensor(np.ones(shape, dtype=self.dtype), requires_grad=True)
        self[name] = t
        return t

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def save(self, dir_path: str | Path, step: int = 0, extra: dict | None = None) -> None:
        root = Path(dir_path)
        root.mkdir(parents=True, exist_ok=True)
        index = {"step": step, "params": {}, "extra": extra or {}}
        for name in sorted(self):
            t = self[name]
            fname = name.replace("/", "__") + ".ten"
            tenio.save_ten(root / fname, t.data)
            index["params"][name] = {
                "file": fname,
                "shape": list(t.shape),
                "dtype": t.dtype.name,
            }
        with open(root / "index.json", "w") as f:
            json.dump(index, f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, dir_path: str | Path) -> tuple["ParamStore", dict]:
        root = Path(dir_path)
        with open(root / "index.json") as f:
            index = json.load(f)
        store = cls()
        for name, meta in index["params"].items():
            arr = tenio.load_ten(root / meta["file"])
            if list(arr.shape) != meta["shape"]:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            store[name] = Tensor(arr, requires_grad=True)
        return store, index


def _conv_case(rng):
    def loss(x, w, b):
        return T.sum_(T.power(conv2d(x, w, b, stride=2), 2.0))

    return (
        loss,
        [rng.uniform(-1, 1, (1, 6, 6, 2)), rng.uniform(-1, 1, (3, 3, 2, 4)) * 0.5, rng.uniform(-0.2, 0.2, 4)],
    )


register_op_check("conv2d", _conv_case)
