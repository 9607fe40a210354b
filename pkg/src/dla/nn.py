"""Pre-activation residual CNN for patch classification, written on numpy.

The 5 slices of a 41x41x5 patch are treated as input channels of a 2D
network.  Activations are laid out ``(channels, batch, height, width)`` so a
convolution is a single ``(out, in*k*k) @ (in*k*k, batch*h*w)`` product.

Parameters and gradients are plain ordered ``dict``s mapping a name such as
``"block1.conv2.weight"`` to a float64 array.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from dla.errors import ShapeMismatchError, VolumeFormatError

__all__ = [
    "Architecture",
    "forward",
    "init_params",
    "load_checkpoint",
    "loss_and_grad",
    "save_checkpoint",
    "softmax",
]

Params = Dict[str, np.ndarray]

_CHUNK_ROWS = 64

POOLING = ("avg", "flatten")


@dataclass(frozen=True)
class Architecture:
    """Network shape.

    ``conv_layers`` counts the 3x3 convolutions after the input layer, two
    per residual block.  ``stage_boundaries`` lists the indices (among those
    convolutions) where a block downsamples by 2 and doubles its channels;
    by default blocks ``n/3`` and ``2n/3`` for ``n`` blocks.

    ``pooling`` decides how the final feature map reaches the classifier:
    ``"avg"`` averages over positions, ``"flatten"`` keeps every position so
    the output can depend on where a structure sits relative to the centre.
    """

    conv_layers: int = 8
    base_channels: int = 16
    stage_boundaries: Optional[Tuple[int, ...]] = None
    patch_size: int = 41
    n_slices: int = 5
    n_classes: int = 3
    input_filter: int = 5
    hu_scale: float = 1000.0
    pooling: str = "avg"

    def __post_init__(self):
        if self.conv_layers < 2 or self.conv_layers % 2:
            raise ValueError("conv_layers must be a positive even number")
        for name in ("base_channels", "patch_size", "n_slices", "n_classes", "input_filter"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.input_filter % 2 == 0:
            raise ValueError("input_filter must be odd")
        if self.hu_scale <= 0:
            raise ValueError("hu_scale must be positive")
        if self.pooling not in POOLING:
            raise ValueError(f"pooling must be one of {POOLING}, got {self.pooling!r}")
        if self.stage_boundaries is None:
            n_blocks = self.conv_layers // 2
            blocks = sorted({k * n_blocks // 3 for k in (1, 2)} - {0})
            object.__setattr__(self, "stage_boundaries", tuple(2 * b for b in blocks))
        bounds = tuple(int(b) for b in self.stage_boundaries)
        for b in bounds:
            if b % 2 or not 0 <= b < self.conv_layers:
                raise ValueError(f"stage boundary {b} must be an even conv index below {self.conv_layers}")
        if len(set(bounds)) != len(bounds):
            raise ValueError("stage boundaries must be distinct")
        object.__setattr__(self, "stage_boundaries", tuple(sorted(bounds)))

    @property
    def n_blocks(self) -> int:
        return self.conv_layers // 2

    def blocks(self) -> List[Tuple[int, int, int]]:
        """``(in_channels, out_channels, stride)`` for every residual block."""
        out, ch = [], self.base_channels
        for i in range(self.n_blocks):
            if 2 * i in self.stage_boundaries:
                out.append((ch, 2 * ch, 2))
                ch *= 2
            else:
                out.append((ch, ch, 1))
        return out

    @property
    def final_channels(self) -> int:
        return self.base_channels * 2 ** len(self.stage_boundaries)

    @property
    def final_size(self) -> int:
        """Side of the last feature map; each stride-2 block maps n to ceil(n / 2)."""
        n = self.patch_size
        for _ in self.stage_boundaries:
            n = (n - 1) // 2 + 1
        return n

    @property
    def n_features(self) -> int:
        if self.pooling == "avg":
            return self.final_channels
        return self.final_channels * self.final_size ** 2

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        k = self.input_filter
        shapes = {
            "input.weight": (self.base_channels, self.n_slices, k, k),
            "input.bias": (self.base_channels,),
        }
        for i, (cin, cout, stride) in enumerate(self.blocks()):
            shapes[f"block{i}.conv1.weight"] = (cout, cin, 3, 3)
            shapes[f"block{i}.conv1.bias"] = (cout,)
            shapes[f"block{i}.conv2.weight"] = (cout, cout, 3, 3)
            shapes[f"block{i}.conv2.bias"] = (cout,)
            if stride != 1 or cin != cout:
                shapes[f"block{i}.proj.weight"] = (cout, cin, 1, 1)
                shapes[f"block{i}.proj.bias"] = (cout,)
        shapes["fc.weight"] = (self.n_classes, self.n_features)
        shapes["fc.bias"] = (self.n_classes,)
        return shapes

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


def init_params(arch: Architecture, seed=0) -> Params:
    """Variance-scaling (fan-in, gain 2) normal weights and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def zeros_like_params(arch: Architecture) -> Params:
    return {name: np.zeros(shape) for name, shape in arch.param_shapes().items()}


def check_params(params: Params, arch: Architecture):
    shapes = arch.param_shapes()
    if list(params) != list(shapes):
        raise ShapeMismatchError("parameter names do not match the architecture")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"{name}: expected {shape}, got {params[name].shape}")


# --------------------------------------------------------------------------
# layers


def _im2col(x, k, stride, pad):
    c, b, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if k == 1 and pad == 0:
        return np.ascontiguousarray(x[:, :, ::stride, ::stride]).reshape(c, b * ho * wo), ho, wo
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, b, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * k * k, b * ho * wo), ho, wo


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    c, b, h, w = x_shape
    if k == 1 and pad == 0:
        dx = np.zeros(x_shape)
        dx[:, :, ::stride, ::stride] = dcols.reshape(c, b, ho, wo)
        return dx
    dcols = dcols.reshape(c, k, k, b, ho, wo)
    dxp = np.zeros((c, b, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


def _conv(x, weight, bias, stride, pad, cache):
    cout, _, k, _ = weight.shape
    cols, ho, wo = _im2col(x, k, stride, pad)
    out = weight.reshape(cout, -1) @ cols
    out += bias[:, None]
    if cache is not None:
        cache.append((cols, x.shape, stride, pad, ho, wo))
    return out.reshape(cout, x.shape[1], ho, wo)


def _conv_backward(dout, weight, saved):
    cols, x_shape, stride, pad, ho, wo = saved
    cout, _, k, _ = weight.shape
    d2 = dout.reshape(cout, -1)
    dw = (d2 @ cols.T).reshape(weight.shape)
    db = d2.sum(axis=1)
    dcols = weight.reshape(cout, -1).T @ d2
    return _col2im(dcols, x_shape, k, stride, pad, ho, wo), dw, db


def _relu(x):
    return np.maximum(x, 0.0)


def _check_input(x, arch):
    x = np.asarray(x, dtype=np.float64)
    expected = (arch.n_slices, arch.patch_size, arch.patch_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeMismatchError(f"expected batch of shape (B, {expected}), got {x.shape}")
    return x


def _forward_rows(params, arch, x, caches=None):
    """Logits for a chunk of rows; fills ``caches`` for backprop if given."""
    h = np.ascontiguousarray((x / arch.hu_scale).transpose(1, 0, 2, 3))
    k = arch.input_filter
    conv_cache = [] if caches is not None else None
    h = _conv(h, params["input.weight"], params["input.bias"], 1, k // 2, conv_cache)
    block_caches = []
    for i, (cin, cout, stride) in enumerate(arch.blocks()):
        p = f"block{i}."
        local = [] if caches is not None else None
        a = _relu(h)
        h1 = _conv(a, params[p + "conv1.weight"], params[p + "conv1.bias"], stride, 1, local)
        h2 = _conv(_relu(h1), params[p + "conv2.weight"], params[p + "conv2.bias"], 1, 1, local)
        if p + "proj.weight" in params:
            skip = _conv(a, params[p + "proj.weight"], params[p + "proj.bias"], stride, 0, local)
        else:
            skip = h
        if caches is not None:
            block_caches.append((h, h1, local))
        h = h2 + skip
    if arch.pooling == "avg":
        pooled = h.mean(axis=(2, 3)).T
    else:
        pooled = h.transpose(1, 0, 2, 3).reshape(h.shape[1], -1)
    logits = pooled @ params["fc.weight"].T + params["fc.bias"]
    if caches is not None:
        caches.update(input=conv_cache, blocks=block_caches, pooled=pooled, final_hw=h.shape[2:])
    return logits


def forward(params: Params, arch: Architecture, x, chunk_rows: int = _CHUNK_ROWS) -> np.ndarray:
    """Class logits of shape (B, n_classes) for patches ``x`` of shape (B, S, P, P) in HU."""
    x = _check_input(x, arch)
    out = np.empty((x.shape[0], arch.n_classes))
    for s in range(0, x.shape[0], chunk_rows):
        out[s:s + chunk_rows] = _forward_rows(params, arch, x[s:s + chunk_rows])
    return out


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max shift; works on any (..., C) array."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _backward_rows(params, arch, caches, dlogits, grads):
    """Accumulate parameter gradients of ``sum(dlogits * logits)`` into ``grads``."""
    pooled = caches["pooled"]
    grads["fc.weight"] += dlogits.T @ pooled
    grads["fc.bias"] += dlogits.sum(axis=0)
    dpooled = dlogits @ params["fc.weight"]  # (B, features)
    hh, ww = caches["final_hw"]
    if arch.pooling == "avg":
        d = dpooled.T / (hh * ww)
        dh = np.broadcast_to(d[:, :, None, None], d.shape + (hh, ww))
    else:
        dh = dpooled.reshape(dpooled.shape[0], -1, hh, ww).transpose(1, 0, 2, 3)

    for i in reversed(range(arch.n_blocks)):
        p = f"block{i}."
        h_in, h1, local = caches["blocks"][i]
        has_proj = p + "proj.weight" in params
        dh2 = dh
        da2, dw, db = _conv_backward(dh2, params[p + "conv2.weight"], local[1])
        grads[p + "conv2.weight"] += dw
        grads[p + "conv2.bias"] += db
        dh1 = da2 * (h1 > 0)
        da, dw, db = _conv_backward(dh1, params[p + "conv1.weight"], local[0])
        grads[p + "conv1.weight"] += dw
        grads[p + "conv1.bias"] += db
        if has_proj:
            dap, dw, db = _conv_backward(dh, params[p + "proj.weight"], local[2])
            grads[p + "proj.weight"] += dw
            grads[p + "proj.bias"] += db
            dh = (da + dap) * (h_in > 0)
        else:
            dh = da * (h_in > 0) + dh
    _, dw, db = _conv_backward(dh, params["input.weight"], caches["input"][0])
    grads["input.weight"] += dw
    grads["input.bias"] += db


def loss_and_grad(
    params: Params, arch: Architecture, x, labels, chunk_rows: int = _CHUNK_ROWS
) -> Tuple[float, Params]:
    """Mean softmax cross-entropy over the batch and its exact gradient.

    ``labels`` are class codes 1..n_classes.
    """
    x = _check_input(x, arch)
    labels = np.asarray(labels)
    if labels.shape != (x.shape[0],):
        raise ShapeMismatchError(f"labels shape {labels.shape} does not match batch {x.shape[0]}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if labels.min() < 1 or labels.max() > arch.n_classes:
        raise ValueError(f"labels must lie in 1..{arch.n_classes}")
    targets = labels.astype(np.intp) - 1
    grads = zeros_like_params(arch)
    total = 0.0
    for s in range(0, x.shape[0], chunk_rows):
        caches = {}
        logits = _forward_rows(params, arch, x[s:s + chunk_rows], caches)
        t = targets[s:s + chunk_rows]
        logp = _log_softmax(logits)
        rows = np.arange(t.size)
        total += -logp[rows, t].sum()
        dlogits = np.exp(logp)
        dlogits[rows, t] -= 1.0
        _backward_rows(params, arch, caches, dlogits, grads)
    n = x.shape[0]
    for g in grads.values():
        g /= n
    return total / n, grads


# --------------------------------------------------------------------------
# checkpoint file

_CKPT_MAGIC = b"DLAM"
_CKPT_VERSION = 1
_ARCH_HEAD = struct.Struct("<4sH7Id I")


def save_checkpoint(path, params: Params, arch: Architecture) -> None:
    check_params(params, arch)
    bounds = arch.stage_boundaries
    head = _ARCH_HEAD.pack(
        _CKPT_MAGIC, _CKPT_VERSION, arch.conv_layers, arch.base_channels, arch.patch_size,
        arch.n_slices, arch.n_classes, arch.input_filter, POOLING.index(arch.pooling), arch.hu_scale,
        len(bounds),
    )
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(struct.pack(f"<{len(bounds)}I", *bounds))
        for name in arch.param_shapes():
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> Tuple[Params, Architecture]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _CKPT_MAGIC:
        raise VolumeFormatError(f"{path}: not a DLAM checkpoint")
    if len(raw) < _ARCH_HEAD.size:
        raise VolumeFormatError(f"{path}: truncated header")
    (_, version, conv_layers, base, patch, slices, n_classes, k, pool_code, hu_scale, n_bounds) = \
        _ARCH_HEAD.unpack_from(raw)
    if pool_code >= len(POOLING):
        raise VolumeFormatError(f"{path}: unknown pooling code {pool_code}")
    if version != _CKPT_VERSION:
        raise VolumeFormatError(f"{path}: unsupported checkpoint version {version}")
    offset = _ARCH_HEAD.size
    bounds = struct.unpack_from(f"<{n_bounds}I", raw, offset)
    offset += 4 * n_bounds
    arch = Architecture(conv_layers, base, tuple(bounds), patch, slices, n_classes, k, hu_scale,
                        POOLING[pool_code])
    shapes = arch.param_shapes()
    expected = 8 * arch.n_params()
    if len(raw) - offset != expected:
        raise VolumeFormatError(f"{path}: parameter payload is {len(raw) - offset} bytes, expected {expected}")
    params = {}
    for name, shape in shapes.items():
        n = int(np.prod(shape))
        params[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
        offset += 8 * n
    return params, arch
