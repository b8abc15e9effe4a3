"""Pseudo-target construction by low-frequency Fourier amplitude transplant.

Each source image keeps its own phase spectrum everywhere; inside a small
centered window of the (DC-centered) spectrum its amplitude is replaced by
the reference image's amplitude. The window is ``max(1, floor(beta*H)) x
max(1, floor(beta*W))`` for beta > 0 and empty for beta == 0, nested so a
larger beta always contains a smaller one, and symmetrized about DC so the
swapped spectrum of a real image stays Hermitian.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, DimensionError, NumericError
from .synthdata import DomainSample, DomainTag

DEFAULT_BETA = 0.05


@dataclass
class FdaConfig:
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ArgumentError(f"beta must be in [0, 1], got {self.beta}")


def _window_bounds(size, beta):
    """Half-open index range of the swap window along one axis (DC at size//2)."""
    span = int(np.floor(beta * size))
    if beta > 0:
        span = max(1, span)
    lo = size // 2 - span // 2
    return lo, lo + span


def swap_mask(h, w, beta):
    """Boolean mask of swapped bins on the DC-centered spectrum grid.

    The centered rectangle is unioned with its point mirror about DC so the
    swapped set is conjugate-symmetric: the mixed spectrum of a real image
    stays Hermitian and the inverse transform is real up to rounding. Odd
    window spans (including the default beta at 64 px) are their own mirror.
    """
    r0, r1 = _window_bounds(h, beta)
    c0, c1 = _window_bounds(w, beta)
    mask = np.zeros((h, w), dtype=bool)
    if r1 <= r0 or c1 <= c0:
        return mask
    mask[r0:r1, c0:c1] = True
    my = (2 * (h // 2) - np.arange(h)) % h
    mx = (2 * (w // 2) - np.arange(w)) % w
    return mask | mask[np.ix_(my, mx)]


def _resize_bilinear(img, h, w):
    """Label-free bilinear resample of an (H, W, 3) image to (h, w, 3)."""
    src_h, src_w = img.shape[:2]
    ys = np.clip((np.arange(h) + 0.5) * src_h / h - 0.5, 0, src_h - 1)
    xs = np.clip((np.arange(w) + 0.5) * src_w / w - 0.5, 0, src_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, src_h - 1)
    x1 = np.minimum(x0 + 1, src_w - 1)
    ty = (ys - y0)[:, None, None]
    tx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - tx) + img[y0][:, x1] * tx
    bot = img[y1][:, x0] * (1 - tx) + img[y1][:, x1] * tx
    return top * (1 - ty) + bot * ty


def fda_stylize(src, reference, cfg=None):
    """Transplant the reference's low-frequency amplitude onto `src`.

    Operates per RGB channel: swap amplitudes inside the centered window of
    the shifted spectrum, keep the source phase, invert, take the real part
    and clip to [0, 1]. Never reads any label map.
    """
    cfg = cfg or FdaConfig()
    src = np.asarray(src, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if src.ndim != 3 or src.shape[2] != 3:
        raise DimensionError(f"source must be HxWx3, got {src.shape}")
    if reference.ndim != 3 or reference.shape[2] != 3:
        raise DimensionError(f"reference must be HxWx3, got {reference.shape}")
    if not np.isfinite(src).all() or not np.isfinite(reference).all():
        raise NumericError("non-finite pixel value in stylization input")
    h, w = src.shape[:2]
    if reference.shape[:2] != (h, w):
        reference = _resize_bilinear(reference, h, w)

    window = swap_mask(h, w, cfg.beta)
    if not window.any():
        return src.copy()

    out = np.empty_like(src)
    for ch in range(3):
        f_src = np.fft.fftshift(np.fft.fft2(src[:, :, ch]))
        f_ref = np.fft.fftshift(np.fft.fft2(reference[:, :, ch]))
        amp = np.abs(f_src)
        phase = np.angle(f_src)
        amp[window] = np.abs(f_ref)[window]
        mixed = amp * np.exp(1j * phase)
        out[:, :, ch] = np.real(np.fft.ifft2(np.fft.ifftshift(mixed)))
    return np.clip(out, 0.0, 1.0)


def build_pseudo_target(dataset, reference, cfg=None):
    """Stylize every SOURCE sample; labels are copied bit-for-bit."""
    cfg = cfg or FdaConfig()
    out = []
    for i, sample in enumerate(dataset):
        if sample.domain_tag is not DomainTag.SOURCE:
            raise ArgumentError(f"sample {i} is {sample.domain_tag}, expected SOURCE")
        try:
            styled = fda_stylize(sample.image, reference, cfg)
        except (DimensionError, NumericError) as exc:
            raise type(exc)(f"sample {i}: {exc}") from exc
        out.append(DomainSample(
            image=styled,
            label=sample.label.copy(),
            domain_tag=DomainTag.PSEUDO_TARGET,
        ))
    return out
