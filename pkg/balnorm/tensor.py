"""Dense float64 tensors, reductions and 2-D convolution kernels.

Tensors are plain C-ordered ``numpy`` arrays of dtype float64. Every function in
this module is pure: inputs are never written to, so arrays can be shared freely
between workers.
"""

import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
import numpy.typing as npt

from .errors import ConvSpecError, FormatError, InvalidAxisError, ShapeMismatchError

Tensor = npt.NDArray[np.float64]

BNT1_MAGIC = b"BNT1"


def as_tensor(data, shape: Optional[Sequence[int]] = None) -> Tensor:
    """Build a float64 tensor from nested data, or from flat row-major data plus a shape."""
    arr = np.array(data, dtype=np.float64, order="C")
    if shape is None:
        return arr
    shape = tuple(int(d) for d in shape)
    if any(d <= 0 for d in shape):
        raise ShapeMismatchError("tensor shape", "positive dimensions", shape)
    if int(np.prod(shape)) != arr.size:
        raise ShapeMismatchError("flat data length", int(np.prod(shape)), arr.size)
    return arr.reshape(shape)


class PaddingMode(str, Enum):
    CYCLIC = "cyclic"
    ZERO = "zero"


@dataclass(frozen=True)
class ConvSpec:
    """Stride and padding for a 2-D convolution.

    ``pad`` is ``(pad_h, pad_w)``; ``None`` means ``kernel // 2`` on each axis, the
    "same" padding at stride one for odd kernels.
    """

    stride: int = 1
    padding_mode: PaddingMode = PaddingMode.CYCLIC
    pad: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.stride < 1:
            raise ConvSpecError(f"stride must be positive, got {self.stride}")
        object.__setattr__(self, "padding_mode", PaddingMode(self.padding_mode))
        if self.pad is not None:
            pad = tuple(int(p) for p in self.pad)
            if len(pad) != 2 or min(pad) < 0:
                raise ConvSpecError(f"pad must be two non-negative integers, got {self.pad}")
            object.__setattr__(self, "pad", pad)

    def resolve_pad(self, kh: int, kw: int) -> Tuple[int, int]:
        if self.pad is not None:
            return self.pad
        return kh // 2, kw // 2

    def output_size(self, h: int, w: int, kh: int, kw: int) -> Tuple[int, int]:
        ph, pw = self.resolve_pad(kh, kw)
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeMismatchError("padded input vs kernel", f">= {kh}x{kw}", (h + 2 * ph, w + 2 * pw))
        hout = (h + 2 * ph - kh) // self.stride + 1
        wout = (w + 2 * pw - kw) // self.stride + 1
        if self.padding_mode is PaddingMode.CYCLIC and (hout * self.stride != h or wout * self.stride != w):
            raise ConvSpecError(
                f"cyclic padding needs output {h}/{self.stride} x {w}/{self.stride}, "
                f"pad {(ph, pw)} with kernel {kh}x{kw} gives {hout}x{wout}"
            )
        return hout, wout


def _check_conv_shapes(x: Tensor, w: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError("conv input rank", 4, x.ndim)
    if w.ndim != 4:
        raise ShapeMismatchError("conv kernel rank", 4, w.ndim)
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatchError("input channels (x vs w)", w.shape[1], x.shape[1])


def conv_patch_index(
    h: int, w: int, kh: int, kw: int, spec: ConvSpec
) -> Tuple[np.ndarray, np.ndarray, Tuple[int, int]]:
    """Row/column gather indices of every receptive field.

    Returns index arrays broadcasting to ``[Hout, Wout, kh, kw]`` into the source
    grid (the raw input for cyclic mode, the zero-padded input otherwise) together
    with the output size.
    """
    hout, wout = spec.output_size(h, w, kh, kw)
    ph, pw = spec.resolve_pad(kh, kw)
    rows = np.arange(hout)[:, None] * spec.stride + np.arange(kh)[None, :]
    cols = np.arange(wout)[:, None] * spec.stride + np.arange(kw)[None, :]
    if spec.padding_mode is PaddingMode.CYCLIC:
        rows = (rows - ph) % h
        cols = (cols - pw) % w
    return rows[:, None, :, None], cols[None, :, None, :], (hout, wout)


def pad_input(x: Tensor, kh: int, kw: int, spec: ConvSpec) -> Tensor:
    if spec.padding_mode is PaddingMode.CYCLIC:
        return x
    ph, pw = spec.resolve_pad(kh, kw)
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def extract_patches(x: Tensor, kh: int, kw: int, spec: ConvSpec) -> Tensor:
    """Receptive fields of ``x`` shaped ``[B, Cin, Hout, Wout, kh, kw]``."""
    rows, cols, _ = conv_patch_index(x.shape[2], x.shape[3], kh, kw, spec)
    return pad_input(x, kh, kw, spec)[:, :, rows, cols]


def conv2d_forward(x: Tensor, w: Tensor, spec: ConvSpec = ConvSpec()) -> Tensor:
    """Cross-correlate ``x`` ``[B,Cin,H,W]`` with ``w`` ``[Cout,Cin,kh,kw]``.

    Cyclic mode wraps indices modulo H and W; zero mode pads with zeros. The output
    is ``[B, Cout, Hout, Wout]`` with ``Hout = (H + 2*pad - kh) // stride + 1``.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_conv_shapes(x, w)
    patches = extract_patches(x, w.shape[2], w.shape[3], spec)
    out = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: Tensor, x: Tensor, w: Tensor, spec: ConvSpec
) -> Tuple[Tensor, Tensor]:
    """Vector-Jacobian products of :func:`conv2d_forward` for ``x`` and ``w``."""
    kh, kw = w.shape[2], w.shape[3]
    rows, cols, _ = conv_patch_index(x.shape[2], x.shape[3], kh, kw, spec)
    padded = pad_input(x, kh, kw, spec)
    patches = padded[:, :, rows, cols]

    grad_w = np.tensordot(grad_out, patches, axes=([0, 2, 3], [0, 2, 3]))
    grad_patches = np.tensordot(grad_out, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    grad_padded = np.zeros_like(padded)
    np.add.at(grad_padded, (slice(None), slice(None), rows, cols), grad_patches)

    if spec.padding_mode is PaddingMode.ZERO:
        ph, pw = spec.resolve_pad(kh, kw)
        grad_padded = grad_padded[:, :, ph : ph + x.shape[2], pw : pw + x.shape[3]]
    return np.ascontiguousarray(grad_padded), grad_w


def conv2d_reference(x: Tensor, w: Tensor, spec: ConvSpec = ConvSpec()) -> Tensor:
    """Direct nested-loop evaluation of :func:`conv2d_forward`, used as an oracle."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _check_conv_shapes(x, w)
    batch, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    hout, wout = spec.output_size(h, wd, kh, kw)
    ph, pw = spec.resolve_pad(kh, kw)
    cyclic = spec.padding_mode is PaddingMode.CYCLIC
    out = np.zeros((batch, cout, hout, wout))
    for b in range(batch):
        for d in range(cout):
            for i in range(hout):
                for j in range(wout):
                    acc = 0.0
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                r = i * spec.stride + p - ph
                                s = j * spec.stride + q - pw
                                if cyclic:
                                    r, s = r % h, s % wd
                                elif not (0 <= r < h and 0 <= s < wd):
                                    continue
                                acc += x[b, c, r, s] * w[d, c, p, q]
                    out[b, d, i, j] = acc
    return out


def reduce_sum(x: Tensor, axes: Iterable[int]) -> Tensor:
    """Sum over ``axes`` and drop them from the shape."""
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(sorted(set(int(a) for a in axes)))
    bad = [a for a in axes if not -x.ndim <= a < x.ndim]
    if bad:
        raise InvalidAxisError(f"axes {bad} out of range for rank {x.ndim}")
    return np.asarray(x.sum(axis=axes), dtype=np.float64)


def l1_norm(x: Tensor) -> float:
    return float(np.abs(np.asarray(x, dtype=np.float64)).sum())


def write_bnt1(stream: BinaryIO, x) -> None:
    """Append one BNT1 record: magic, u32 rank, u32 dims, f32 row-major payload."""
    arr = np.ascontiguousarray(x, dtype="<f4")
    stream.write(BNT1_MAGIC)
    stream.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    stream.write(arr.tobytes(order="C"))


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise FormatError(f"BNT1 record ended inside the {what} ({len(buf)} of {n} bytes)")
    return buf


def read_bnt1(stream: BinaryIO) -> Tensor:
    magic = _read_exact(stream, 4, "magic")
    if magic != BNT1_MAGIC:
        raise FormatError(f"bad BNT1 magic {magic!r}")
    (rank,) = struct.unpack("<I", _read_exact(stream, 4, "rank"))
    dims = struct.unpack(f"<{rank}I", _read_exact(stream, 4 * rank, "dims"))
    count = int(np.prod(dims)) if rank else 1
    payload = _read_exact(stream, 4 * count, "payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def save_bnt1(path: Union[str, Path], x) -> None:
    with open(path, "wb") as f:
        write_bnt1(f, x)


def load_bnt1(path: Union[str, Path]) -> Tensor:
    with open(path, "rb") as f:
        return read_bnt1(f)
