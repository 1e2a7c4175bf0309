"""Centered, orthonormal FFT helpers.

All transforms in this package are unitary (``norm="ortho"``) and centered
(DC in the middle of the array), the common raw k-space convention. Unitarity
makes Parseval checks exact and keeps coil-combined estimators scale-free.
"""

import numpy as np


def fft2c(x: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Centered orthonormal 2-D FFT over ``axes``."""
    shifted = np.fft.ifftshift(x, axes=axes)
    k = np.fft.fftn(shifted, axes=axes, norm="ortho")
    return np.fft.fftshift(k, axes=axes)


def ifft2c(x: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Centered orthonormal 2-D inverse FFT over ``axes``."""
    shifted = np.fft.ifftshift(x, axes=axes)
    img = np.fft.ifftn(shifted, axes=axes, norm="ortho")
    return np.fft.fftshift(img, axes=axes)


def ifft1c(x: np.ndarray, axis: int) -> np.ndarray:
    """Centered orthonormal inverse FFT along a single axis."""
    shifted = np.fft.ifftshift(x, axes=(axis,))
    img = np.fft.ifft(shifted, axis=axis, norm="ortho")
    return np.fft.fftshift(img, axes=(axis,))


def fftnc(x: np.ndarray, axes) -> np.ndarray:
    """Centered orthonormal N-D FFT over ``axes`` (test oracle helper)."""
    shifted = np.fft.ifftshift(x, axes=axes)
    k = np.fft.fftn(shifted, axes=axes, norm="ortho")
    return np.fft.fftshift(k, axes=axes)


def ifftnc(x: np.ndarray, axes) -> np.ndarray:
    """Centered orthonormal N-D inverse FFT over ``axes``."""
    shifted = np.fft.ifftshift(x, axes=axes)
    img = np.fft.ifftn(shifted, axes=axes, norm="ortho")
    return np.fft.fftshift(img, axes=axes)
