"""Involution: per-pixel, group-shared K x K kernels generated from the input.

Shapes follow (N, C, H, W) for feature maps and (H, W, K, K, G) for kernels,
optionally with a leading batch axis on the kernel. Channel ``k`` uses the
kernel of group ``floor(k * G / C)`` (0-based), borders are zero padded by
``K // 2`` and the stride is 1, so the output has the input's shape.
"""
from __future__ import annotations
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Tuple

import numpy as np

from ..errors import (
    EvenKernelError,
    GroupDivisibilityError,
    IncompatibleKernelSpecError,
    ShapeMismatchError,
    TensorFormatError,
)

MAGIC = b"DGTN"


@dataclass(frozen=True, slots=True, eq=False)
class Tensor4:
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.ndim != 4:
            raise ShapeMismatchError(f"Tensor4 needs 4 dims (N, C, H, W), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeMismatchError(f"all Tensor4 dims must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> Tuple[int, int, int, int]:
        return tuple(self.data.shape)  # type: ignore[return-value]

    @classmethod
    def random(cls, dims: Tuple[int, int, int, int], seed: int) -> "Tensor4":
        return cls(np.random.default_rng(seed).standard_normal(dims))


@dataclass(frozen=True, slots=True, eq=False)
class InvolutionKernel:
    """Kernel of shape (H, W, K, K, G) or batched (N, H, W, K, K, G)."""
    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.ndim not in (5, 6):
            raise ShapeMismatchError(f"kernel needs shape (H, W, K, K, G) or (N, H, W, K, K, G), got {arr.shape}")
        k1, k2 = arr.shape[-3], arr.shape[-2]
        if k1 != k2:
            raise ShapeMismatchError(f"kernel window must be square, got {k1}x{k2}")
        if k1 % 2 == 0:
            raise EvenKernelError(k1)
        if arr.shape[-1] < 1:
            raise ShapeMismatchError("kernel needs at least one group")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def batched(self) -> np.ndarray:
        return self.data if self.data.ndim == 6 else self.data[None]

    @property
    def size(self) -> int:
        return self.data.shape[-2]

    @property
    def groups(self) -> int:
        return self.data.shape[-1]

    @classmethod
    def delta(cls, height: int, width: int, k: int, groups: int = 1) -> "InvolutionKernel":
        data = np.zeros((height, width, k, k, groups))
        data[:, :, k // 2, k // 2, :] = 1.0
        return cls(data)

    @classmethod
    def random(cls, height: int, width: int, k: int, groups: int, seed: int) -> "InvolutionKernel":
        return cls(np.random.default_rng(seed).standard_normal((height, width, k, k, groups)))


@dataclass(frozen=True, slots=True, eq=False)
class KernelGenSpec:
    """Weights of the reduce -> nonlinearity -> span kernel generator."""
    kernel_size: int
    groups: int
    w_reduce: np.ndarray  # (C // r, C)
    b_reduce: np.ndarray  # (C // r,)
    w_span: np.ndarray    # (K * K * G, C // r)
    b_span: np.ndarray    # (K * K * G,)
    activation: Literal["relu", "identity"] = "relu"

    def __post_init__(self) -> None:
        if self.kernel_size % 2 == 0:
            raise EvenKernelError(self.kernel_size)
        hidden = self.w_reduce.shape[0]
        if self.w_reduce.ndim != 2 or hidden < 1 or self.channels % hidden:
            raise IncompatibleKernelSpecError(
                f"reduce weights {self.w_reduce.shape} must map C channels to C // r with C divisible by r"
            )
        if self.b_reduce.shape != (hidden,) or self.w_span.shape[1] != hidden:
            raise IncompatibleKernelSpecError(
                f"reduce/span weights disagree on the hidden width: {self.w_reduce.shape}, {self.w_span.shape}"
            )
        out = self.kernel_size ** 2 * self.groups
        if self.w_span.shape[0] != out or self.b_span.shape != (out,):
            raise IncompatibleKernelSpecError(
                f"span output must be K*K*G={out}, got weights {self.w_span.shape} and bias {self.b_span.shape}"
            )

    @property
    def channels(self) -> int:
        return self.w_reduce.shape[1]

    @property
    def reduction(self) -> int:
        return self.channels // self.w_reduce.shape[0]

    @classmethod
    def random(cls, channels: int, kernel_size: int = 3, groups: int = 1, reduction: int = 4,
               seed: int = 0, zero_bias: bool = False) -> "KernelGenSpec":
        if reduction < 1 or channels % reduction:
            raise IncompatibleKernelSpecError(f"channels {channels} not divisible by reduction {reduction}")
        rng = np.random.default_rng(seed)
        hidden = channels // reduction
        out = kernel_size ** 2 * groups
        bias = (lambda n: np.zeros(n)) if zero_bias else (lambda n: 0.1 * rng.standard_normal(n))
        return cls(
            kernel_size=kernel_size,
            groups=groups,
            w_reduce=rng.standard_normal((hidden, channels)) / np.sqrt(channels),
            b_reduce=bias(hidden),
            w_span=rng.standard_normal((out, hidden)) / np.sqrt(hidden),
            b_span=bias(out),
        )


def _check_compatible(x: Tensor4, kernel: InvolutionKernel) -> np.ndarray:
    n, c, h, w = x.dims
    kd = kernel.batched
    if kd.shape[1:3] != (h, w):
        raise ShapeMismatchError(f"kernel spatial dims {kd.shape[1:3]} do not match input {(h, w)}")
    if kd.shape[0] not in (1, n):
        raise ShapeMismatchError(f"kernel batch {kd.shape[0]} does not match input batch {n}")
    if c % kernel.groups:
        raise GroupDivisibilityError(c, kernel.groups)
    return kd


def group_index(channels: int, groups: int) -> np.ndarray:
    return (np.arange(channels) * groups) // channels


def involute(x: Tensor4, kernel: InvolutionKernel) -> Tensor4:
    kd = _check_compatible(x, kernel)
    n, c, h, w = x.dims
    k, pad = kernel.size, kernel.size // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # (Nk, H, W, K, K, C): each channel picks its group's kernel
    per_channel = kd[..., group_index(c, kernel.groups)]
    out = np.zeros((n, c, h, w))
    for u in range(k):
        for v in range(k):
            weight = np.transpose(per_channel[:, :, :, u, v, :], (0, 3, 1, 2))
            out += weight * xp[:, :, u:u + h, v:v + w]
    return Tensor4(out)


def involute_naive(x: Tensor4, kernel: InvolutionKernel) -> Tensor4:
    """Loop-for-loop evaluation of the involution sum, used as a reference."""
    kd = _check_compatible(x, kernel)
    n, c, h, w = x.dims
    half, g = kernel.size // 2, kernel.groups
    src = x.data
    out = np.zeros((n, c, h, w))
    for b in range(n):
        kb = kd[b if kd.shape[0] > 1 else 0]
        for ch in range(c):
            grp = ch * g // c
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for u in range(-half, half + 1):
                        for v in range(-half, half + 1):
                            ii, jj = i + u, j + v
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += kb[i, j, u + half, v + half, grp] * src[b, ch, ii, jj]
                    out[b, ch, i, j] = acc
    return Tensor4(out)


def generate_kernel(x: Tensor4, spec: KernelGenSpec) -> InvolutionKernel:
    """Per-pixel kernels from each pixel's channel vector (batched over N)."""
    n, c, h, w = x.dims
    if spec.channels != c:
        raise IncompatibleKernelSpecError(f"generator expects {spec.channels} channels, input has {c}")
    pixels = np.transpose(x.data, (0, 2, 3, 1))  # (N, H, W, C)
    hidden = pixels @ spec.w_reduce.T + spec.b_reduce
    if spec.activation == "relu":
        hidden = np.maximum(hidden, 0.0)
    spans = hidden @ spec.w_span.T + spec.b_span  # (N, H, W, G*K*K)
    k, g = spec.kernel_size, spec.groups
    kernels = spans.reshape(n, h, w, g, k, k).transpose(0, 1, 2, 4, 5, 3)
    return InvolutionKernel(kernels)


def involution_block(x: Tensor4, spec: KernelGenSpec) -> Tensor4:
    return involute(x, generate_kernel(x, spec))


# ---------- fixture codec ----------
def save_array(path: Path | str, data: np.ndarray) -> None:
    """Write ``MAGIC, uint32 rank, uint32 dims..., float64 data`` little-endian."""
    arr = np.ascontiguousarray(data, dtype="<f8")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def load_array(path: Path | str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise TensorFormatError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 8:
        raise TensorFormatError(f"{path}: truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise TensorFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - offset != 8 * count:
        raise TensorFormatError(f"{path}: expected {count} float64 values for dims {dims}")
    return np.frombuffer(raw, dtype="<f8", offset=offset).reshape(dims).astype(np.float64)


def save_tensor(path: Path | str, t: Tensor4) -> None:
    save_array(path, t.data)


def load_tensor(path: Path | str) -> Tensor4:
    return Tensor4(load_array(path))


def load_kernel(path: Path | str) -> InvolutionKernel:
    return InvolutionKernel(load_array(path))
