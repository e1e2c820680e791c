# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.
"""Convolution as a matrix product.

Images are (W, H, C) arrays and kernels are (K_x, K_y, C', C) arrays. Only valid (unpadded)
convolutions are supported; padded layers are expressed with pre-padded inputs.

Patch layout is frozen because weight files depend on it: inside a patch column the index of
element (c, i', j') is ``c * K_x * K_y + i' * K_y + j'`` (channel-major, then row, then column),
and output position (i, j) is column ``i * H' + j``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .noise import NoiseConfig, NoisyArray, PhotonBudget, noisy_matmul
from .utils import DimensionMismatch, KernelLargerThanImage, ShapeMismatch


@dataclass(frozen=True)
class PatchMatrix:
    """(K_x K_y C) x (W' H') matrix whose columns are vectorized image patches."""

    data: np.ndarray
    source_shape: tuple[int, int, int]
    kernel_size: tuple[int, int]
    strides: tuple[int, int]

    @property
    def output_size(self) -> tuple[int, int]:
        return output_size(self.source_shape[:2], self.kernel_size, self.strides)


def output_size(
    image_size: tuple[int, int], kernel_size: tuple[int, int], strides: tuple[int, int]
) -> tuple[int, int]:
    """Returns (W', H') of a valid convolution."""
    (w, h), (k_x, k_y), (s_x, s_y) = image_size, kernel_size, strides
    if s_x < 1 or s_y < 1:
        raise ShapeMismatch(f"Strides must be >= 1, got {strides}")
    if w < k_x or h < k_y:
        raise KernelLargerThanImage(
            f"Kernel {k_x}x{k_y} does not fit in a {w}x{h} image without padding"
        )
    return (w - k_x) // s_x + 1, (h - k_y) // s_y + 1


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ShapeMismatch(f"Images must be W x H x C arrays, got shape {image.shape}")
    return image


def im2col(image: np.ndarray, k_x: int, k_y: int, s_x: int = 1, s_y: int = 1) -> PatchMatrix:
    """
    Rearranges the patches of an image into the columns of a matrix.

        Parameters:
            image (ndarray): W x H x C image.
            k_x, k_y (int): Kernel size.
            s_x, s_y (int): Strides.

        Returns:
            patches (PatchMatrix): (k_x k_y C) x (W' H') copy of the patches; overlapping
                patches duplicate data.
    """
    image = _check_image(image)
    w_out, h_out = output_size(image.shape[:2], (k_x, k_y), (s_x, s_y))
    # (W - k_x + 1, H - k_y + 1, C, k_x, k_y)
    windows = sliding_window_view(image, (k_x, k_y), axis=(0, 1))[::s_x, ::s_y]
    data = np.ascontiguousarray(windows.reshape(w_out * h_out, -1).T)
    return PatchMatrix(data, image.shape, (k_x, k_y), (s_x, s_y))  # type: ignore[arg-type]


def im2col_batch(images: np.ndarray, k_x: int, k_y: int, s_x: int, s_y: int) -> np.ndarray:
    """Patch matrix of a (B, W, H, C) batch, columns ordered sample by sample."""
    images = np.asarray(images, dtype=np.float64)
    batch = images.shape[0]
    w_out, h_out = output_size(images.shape[1:3], (k_x, k_y), (s_x, s_y))
    windows = sliding_window_view(images, (k_x, k_y), axis=(1, 2))[:, ::s_x, ::s_y]
    return np.ascontiguousarray(windows.reshape(batch * w_out * h_out, -1).T)


def fold_patches(
    columns: np.ndarray,
    image_shape: tuple[int, ...],
    kernel_size: tuple[int, int],
    strides: tuple[int, int],
) -> np.ndarray:
    """
    Transpose of im2col: scatters patch columns back to image space, summing overlaps.

    `image_shape` is (W, H, C) for a single patch matrix or (B, W, H, C) for a batch one.
    """
    batched = len(image_shape) == 4
    shape = image_shape if batched else (1,) + tuple(image_shape)
    batch, w, h, c = shape
    (k_x, k_y), (s_x, s_y) = kernel_size, strides
    w_out, h_out = output_size((w, h), kernel_size, strides)
    # columns[(c, i', j'), (b, i, j)] -> patches[b, i, j, c, i', j']
    patches = columns.T.reshape(batch, w_out, h_out, c, k_x, k_y)
    image = np.zeros(shape)
    for di in range(k_x):
        for dj in range(k_y):
            image[
                :, di : di + s_x * (w_out - 1) + 1 : s_x, dj : dj + s_y * (h_out - 1) + 1 : s_y, :
            ] += patches[:, :, :, :, di, dj]
    return image if batched else image[0]


def kernel_to_matrix(kernel: np.ndarray) -> np.ndarray:
    """Rearranges a K_x x K_y x C' x C kernel into a C' x (K_x K_y C) matrix."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4:
        raise ShapeMismatch(f"Kernels must be K_x x K_y x C' x C arrays, got {kernel.shape}")
    c_out = kernel.shape[2]
    # (C', C, K_x, K_y) matches the patch layout
    return np.ascontiguousarray(kernel.transpose(2, 3, 0, 1).reshape(c_out, -1))


def matrix_to_kernel(matrix: np.ndarray, kernel_shape: tuple[int, int, int, int]) -> np.ndarray:
    """Inverse of kernel_to_matrix."""
    k_x, k_y, c_out, c_in = kernel_shape
    return np.ascontiguousarray(
        np.asarray(matrix).reshape(c_out, c_in, k_x, k_y).transpose(2, 3, 0, 1)
    )


def _check_kernel(kernel: np.ndarray, image: np.ndarray) -> np.ndarray:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[3] != image.shape[2]:
        raise DimensionMismatch(
            f"Kernel of shape {kernel.shape} does not match {image.shape[2]} input channels"
        )
    return kernel


def conv_direct(
    kernel: np.ndarray, image: np.ndarray, strides: tuple[int, int] = (1, 1)
) -> np.ndarray:
    """Noiseless convolution computed term by term over kernel offsets."""
    image = _check_image(image)
    kernel = _check_kernel(kernel, image)
    k_x, k_y = kernel.shape[:2]
    s_x, s_y = strides
    w_out, h_out = output_size(image.shape[:2], (k_x, k_y), strides)
    out = np.zeros((w_out, h_out, kernel.shape[2]))
    for di in range(k_x):
        for dj in range(k_y):
            rows = slice(di, di + s_x * (w_out - 1) + 1, s_x)
            view = image[rows, dj : dj + s_y * (h_out - 1) + 1 : s_y]
            # sum over input channels l of K[di, dj, k, l] x[., ., l]
            out += view @ kernel[di, dj].T
    return out


def conv_macs(
    image_shape: tuple[int, int, int], kernel_shape: tuple[int, int, int, int], strides
) -> int:
    """W' H' K_x K_y C' C."""
    w_out, h_out = output_size(image_shape[:2], kernel_shape[:2], strides)
    k_x, k_y, c_out, c_in = kernel_shape
    return w_out * h_out * k_x * k_y * c_out * c_in


def conv_via_gemm(
    kernel: np.ndarray,
    image: np.ndarray,
    strides: tuple[int, int],
    noise: NoiseConfig,
    budget: PhotonBudget | None,
    rng: np.random.Generator | None = None,
) -> NoisyArray:
    """
    Convolution as one (noisy) optical GEMM of the kernel matrix with the patch matrix.

        Parameters:
            kernel (ndarray): K_x x K_y x C' x C kernel.
            image (ndarray): W x H x C image.
            strides (tuple): (s_x, s_y).
            noise (NoiseConfig): Noise model.
            budget (PhotonBudget | None): Photons per MAC; None for an exact product.
            rng (Generator | None): Random stream; defaults to `noise.stream()`.

        Returns:
            result (NoisyArray): W' x H' x C' output and the photons of W'H'K_xK_yC'C MACs.
    """
    image = _check_image(image)
    kernel = _check_kernel(kernel, image)
    patches = im2col(image, kernel.shape[0], kernel.shape[1], *strides)
    w_out, h_out = patches.output_size
    product = noisy_matmul(
        kernel_to_matrix(kernel), patches.data, budget, noise, rng or noise.stream()
    )
    values = product.values.T.reshape(w_out, h_out, kernel.shape[2])
    return NoisyArray(values, product.photons_consumed)
