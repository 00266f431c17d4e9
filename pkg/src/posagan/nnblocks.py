"""Differentiable building blocks shared by the generator and discriminator.

Everything here is plain torch ops, so gradients flow through autograd; the
test-suite cross-checks every primitive against central finite differences.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import Rng

__all__ = [
    "LEAKY_SLOPE", "ADAIN_EPS", "init_orthogonal", "init_module", "roi_align",
    "adain", "ConvLSTM", "ResBlock", "conv3", "ParameterStore",
    "save_arrays", "load_arrays", "CheckpointError", "finite_difference_grad",
]

LEAKY_SLOPE = 0.2   # leaky-ReLU slope used in every block
ADAIN_EPS = 1e-5


def init_orthogonal(shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    """Orthogonal matrix of the given shape (flattened to rows x cols).

    Columns are orthonormal when cols <= rows, rows otherwise.  1-D shapes
    (biases) fall back to zeros.
    """
    if len(shape) < 2:
        return np.zeros(shape, dtype=np.float64)
    rows, cols = shape[0], int(np.prod(shape[1:]))
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    if rows < cols:
        q = q.T
    return np.ascontiguousarray(q.reshape(shape))


def init_module(module: nn.Module, rng: Rng, prefix: str = "model",
                zero_names: tuple[str, ...] = ()) -> None:
    """Orthogonally initialise all >=2-D parameters, zero the rest.

    Parameter names in ``zero_names`` (suffix match) are zeroed regardless of
    rank; used for the discriminator's scoring heads.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if any(name.endswith(z) or name == z for z in zero_names):
                p.zero_()
                continue
            arr = init_orthogonal(tuple(p.shape), rng.stream("init", prefix, name))
            p.copy_(torch.from_numpy(np.asarray(arr)).to(p.dtype))


def roi_align(fm: torch.Tensor, boxes: torch.Tensor, out_size: int,
              spatial_scale: float = 1.0, sampling_ratio: int = 2) -> torch.Tensor:
    """Bilinear RoI pooling of ``fm`` (C,H,W or N,C,H,W) to out_size x out_size.

    ``boxes`` is (m, 4) of (x0, y0, x1, y1) in image coordinates, or (m, 5)
    with a leading batch index for batched feature maps.  Each output bin
    averages ``sampling_ratio``^2 regularly spaced bilinear samples; feature
    values sit at cell centers and samples are clamped to the border.
    """
    squeeze = fm.dim() == 3
    if squeeze:
        fm = fm.unsqueeze(0)
    n, c, h, w = fm.shape
    boxes = torch.as_tensor(boxes, dtype=fm.dtype)
    if boxes.dim() != 2 or boxes.shape[1] not in (4, 5):
        raise ValueError("boxes must be (m, 4) or (m, 5 incl. batch index)")
    if boxes.shape[1] == 5:
        batch_idx = boxes[:, 0].long()
        boxes = boxes[:, 1:]
    else:
        batch_idx = torch.zeros(boxes.shape[0], dtype=torch.long)
    m = boxes.shape[0]
    scaled = boxes * spatial_scale
    bw = scaled[:, 2] - scaled[:, 0]
    bh = scaled[:, 3] - scaled[:, 1]
    if (bw <= 0).any() or (bh <= 0).any():
        raise ValueError("boxes must have positive width and height")
    r = sampling_ratio
    # sample positions: out_size bins x r samples per bin, fractions of the box
    frac = (torch.arange(out_size * r, dtype=fm.dtype) + 0.5) / (out_size * r)
    xs = scaled[:, 0, None] + bw[:, None] * frac[None, :]   # (m, out*r)
    ys = scaled[:, 1, None] + bh[:, None] * frac[None, :]
    # bilinear weights on the cell-center grid, clamped at borders
    def interp_1d(coord, size):
        u = coord - 0.5
        lo = torch.clamp(torch.floor(u), 0, size - 1)
        hi = torch.clamp(lo + 1, max=size - 1)
        t = torch.clamp(u - lo, 0.0, 1.0)
        return lo.long(), hi.long(), t
    x_lo, x_hi, tx = interp_1d(xs, w)
    y_lo, y_hi, ty = interp_1d(ys, h)
    fmb = fm[batch_idx]                                     # (m, C, H, W)
    flat = fmb.reshape(m, c, h * w)
    def gather(yi, xi):
        idx = (yi[:, :, None] * w + xi[:, None, :]).reshape(m, 1, -1)
        return flat.gather(2, idx.expand(m, c, idx.shape[-1])).reshape(m, c, yi.shape[1], xi.shape[1])
    v00 = gather(y_lo, x_lo)
    v01 = gather(y_lo, x_hi)
    v10 = gather(y_hi, x_lo)
    v11 = gather(y_hi, x_hi)
    tx2 = tx[:, None, None, :]
    ty2 = ty[:, None, :, None]
    vals = ((1 - ty2) * ((1 - tx2) * v00 + tx2 * v01)
            + ty2 * ((1 - tx2) * v10 + tx2 * v11))          # (m, C, out*r, out*r)
    vals = vals.reshape(m, c, out_size, r, out_size, r)
    return vals.mean(dim=(3, 5))


def adain(content: torch.Tensor, scale: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Per-channel (x - mean)/(std + eps) * scale + bias over the spatial dims.

    ``content`` is (C, H, W) or (m, C, H, W); scale/bias broadcast over the
    leading dims with trailing channel length C.
    """
    spatial = (-2, -1)
    mu = content.mean(dim=spatial, keepdim=True)
    var = content.var(dim=spatial, keepdim=True, unbiased=False)
    normed = (content - mu) / (var.sqrt() + ADAIN_EPS)
    s = scale[..., :, None, None]
    b = bias[..., :, None, None]
    return normed * s + b


def conv3(cin: int, cout: int, stride: int = 1, pad_mode: str = "replicate") -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=pad_mode)


class ResBlock(nn.Module):
    """Pre-activation residual block; preserves constant inputs (replicate pad)."""

    def __init__(self, channels: int, pad_mode: str = "replicate"):
        super().__init__()
        self.c1 = conv3(channels, channels, pad_mode=pad_mode)
        self.c2 = conv3(channels, channels, pad_mode=pad_mode)

    def forward(self, x):
        h = self.c1(F.leaky_relu(x, LEAKY_SLOPE))
        h = self.c2(F.leaky_relu(h, LEAKY_SLOPE))
        return x + h


class ConvLSTMCell(nn.Module):
    """Standard convolutional LSTM cell with 3x3 gate convolutions, no peepholes."""

    def __init__(self, in_channels: int, hidden_channels: int):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = nn.Conv2d(in_channels + hidden_channels, 4 * hidden_channels,
                               3, padding=1)

    def forward(self, x, state):
        h, c = state
        i, f, g, o = self.gates(torch.cat([x, h], dim=1)).chunk(4, dim=1)
        c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h_new = torch.sigmoid(o) * torch.tanh(c_new)
        return h_new, c_new


class ConvLSTM(nn.Module):
    """Stacked cLSTM; consumes a feature-map sequence and returns the final
    top-layer hidden state.

    Input is (m, C, H, W) for a single sequence or (B, m, C, H, W) with an
    optional per-sample ``lengths`` vector; padded steps beyond a sample's
    length leave its state untouched.
    """

    def __init__(self, in_channels: int, hidden_channels: int, layers: int):
        super().__init__()
        cells = []
        for k in range(layers):
            cells.append(ConvLSTMCell(in_channels if k == 0 else hidden_channels,
                                      hidden_channels))
        self.cells = nn.ModuleList(cells)

    def forward(self, seq: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        squeeze = seq.dim() == 4
        if squeeze:
            seq = seq.unsqueeze(0)
        b, m, cin, hh, ww = seq.shape
        if m < 1:
            raise ValueError("empty sequence")
        dt, dev = seq.dtype, seq.device
        states = [(torch.zeros(b, cell.hidden_channels, hh, ww, dtype=dt, device=dev),
                   torch.zeros(b, cell.hidden_channels, hh, ww, dtype=dt, device=dev))
                  for cell in self.cells]
        for t in range(m):
            x = seq[:, t]
            for k, cell in enumerate(self.cells):
                h_new, c_new = cell(x, states[k])
                if lengths is not None:
                    alive = (lengths > t).to(dt)[:, None, None, None]
                    h_new = alive * h_new + (1 - alive) * states[k][0]
                    c_new = alive * c_new + (1 - alive) * states[k][1]
                states[k] = (h_new, c_new)
                x = h_new
        top = states[-1][0]
        return top.squeeze(0) if squeeze else top


# --- parameter store / checkpoint serialization -----------------------------
#
# Checkpoint format (little-endian throughout):
#   magic  b"POSA"  | version u32 = 1 | count u32
#   per entry: name_len u16, name utf-8, kind u8, ndim u8, dims u32 * ndim,
#              raw payload (kind 0: float32, 1: int64, 2: uint8 bytes)

MAGIC = b"POSA"
VERSION = 1
_KINDS = {0: np.float32, 1: np.int64, 2: np.uint8}
_KIND_OF = {np.dtype(np.float32): 0, np.dtype(np.int64): 1, np.dtype(np.uint8): 2}


class CheckpointError(RuntimeError):
    pass


class ParameterStore(OrderedDict):
    """Named, shaped array collection with checkpoint serialization.

    Keys are unique names; values are numpy arrays.  Shapes are fixed at
    first assignment.
    """

    def __setitem__(self, name: str, value: np.ndarray):
        value = np.asarray(value)
        if name in self and self[name].shape != value.shape:
            raise ValueError(f"{name}: shape {value.shape} != existing {self[name].shape}")
        super().__setitem__(name, value)

    def save(self, path) -> None:
        save_arrays(path, self)

    @classmethod
    def load(cls, path) -> "ParameterStore":
        return cls(load_arrays(path))


def save_arrays(path, arrays: "OrderedDict[str, np.ndarray]") -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            if arr.dtype not in _KIND_OF:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", _KIND_OF[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_arrays(path) -> "OrderedDict[str, np.ndarray]":
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    with open(path, "rb") as f:
        data = f.read()
    try:
        if data[:4] != MAGIC:
            raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        off = 12
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off); off += 2
            name = data[off:off + nlen].decode(); off += nlen
            kind, ndim = struct.unpack_from("<BB", data, off); off += 2
            shape = struct.unpack_from(f"<{ndim}I", data, off); off += 4 * ndim
            dtype = np.dtype(_KINDS[kind]).newbyteorder("<")
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if off + nbytes > len(data):
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(data[off:off + nbytes], dtype=dtype).reshape(shape)
            out[name] = arr.astype(_KINDS[kind])
            off += nbytes
        if off != len(data):
            raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    except (struct.error, KeyError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    return out


def finite_difference_grad(fn, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Central finite differences of scalar ``fn`` w.r.t. every entry of ``x``.

    Independent oracle for autograd; use float64 tensors.
    """
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        fp = float(torch.as_tensor(fn(x)).detach())
        flat[i] = orig - eps
        fm = float(torch.as_tensor(fn(x)).detach())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad
