"""Classical global and local thresholding baselines.

All functions take grayscale images in [0, 1] (a ``C x H x W`` input is
averaged over channels) and return binary images with 1 for background and
0 for text.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

SAUVOLA_K = 0.2
SAUVOLA_R = 0.5
NIBLACK_K = -0.2
LOCAL_WINDOW = 25
BRADLEY_T = 0.15


def _gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=0) if image.ndim == 3 else image


def histogram256(image: np.ndarray) -> np.ndarray:
    bins = np.clip(np.rint(_gray(image) * 255.0), 0, 255).astype(np.int64)
    return np.bincount(bins.ravel(), minlength=256)


def otsu_threshold(hist) -> int:
    """Bin ``t`` maximising between-class variance of ``[0, t)`` vs ``[t, 256)``.

    Scores are compared in exact integer arithmetic, so ties resolve to the
    lowest ``t``. A histogram with a single occupied bin returns that bin.
    """
    hist = [int(c) for c in hist]
    occupied = [i for i, c in enumerate(hist) if c]
    if not occupied:
        raise ValueError("empty histogram")
    if len(occupied) == 1:
        return occupied[0]
    total = sum(hist)
    total_sum = sum(i * c for i, c in enumerate(hist))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(1, len(hist)):
        n0 += hist[t - 1]
        s0 += (t - 1) * hist[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        # between-class variance * total^2 = (s0*total - n0*total_sum)^2 / (n0*n1)
        num = (s0 * total - n0 * total_sum) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def otsu(image: np.ndarray) -> tuple[int, np.ndarray]:
    """Global Otsu threshold (in 0..255 bin units) and the binary image."""
    t = otsu_threshold(histogram256(image))
    bins = np.clip(np.rint(_gray(image) * 255.0), 0, 255)
    return t, (bins >= t).astype(np.uint8)


def _check_window(w: int) -> None:
    if not isinstance(w, (int, np.integer)) or w < 3 or w % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {w!r}")


def _window_sums(a: np.ndarray, w: int) -> np.ndarray:
    r = w // 2
    padded = np.pad(a, r, mode="edge")
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1))
    ii[1:, 1:] = padded.cumsum(0).cumsum(1)
    h, wd = a.shape
    return ii[w : w + h, w : w + wd] - ii[:h, w : w + wd] - ii[w : w + h, :wd] + ii[:h, :wd]


def window_stats(image: np.ndarray, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Local mean and (population) standard deviation over ``w x w`` windows.

    Computed from integral images; the border is handled by edge replication.
    The image is centred first so flat regions do not lose precision to
    cancellation in ``E[x^2] - E[x]^2``.
    """
    _check_window(w)
    g = _gray(image)
    shift = g.mean()
    c = g - shift
    n = float(w * w)
    cmean = _window_sums(c, w) / n
    var = _window_sums(c * c, w) / n - cmean * cmean
    mean = cmean + shift
    return mean, np.sqrt(np.maximum(var, 0.0))


def niblack_threshold(image, w: int = LOCAL_WINDOW, k: float = NIBLACK_K) -> np.ndarray:
    m, s = window_stats(image, w)
    return m + k * s


def sauvola_threshold(image, w: int = LOCAL_WINDOW, k: float = SAUVOLA_K, R: float = SAUVOLA_R) -> np.ndarray:
    m, s = window_stats(image, w)
    return m * (1.0 + k * (s / R - 1.0))


def niblack(image, w: int = LOCAL_WINDOW, k: float = NIBLACK_K) -> np.ndarray:
    return (_gray(image) > niblack_threshold(image, w, k)).astype(np.uint8)


def sauvola(image, w: int = LOCAL_WINDOW, k: float = SAUVOLA_K, R: float = SAUVOLA_R) -> np.ndarray:
    return (_gray(image) > sauvola_threshold(image, w, k, R)).astype(np.uint8)


def bradley_window(shape) -> int:
    side = min(shape[-2:]) // 8
    return max(3, side | 1)


def bradley(image, w: Optional[int] = None, t: float = BRADLEY_T) -> np.ndarray:
    """A pixel is text iff it is darker than ``(1 - t)`` times its local mean."""
    g = _gray(image)
    w = bradley_window(g.shape) if w is None else w
    m, _ = window_stats(g, w)
    return (g >= m * (1.0 - t)).astype(np.uint8)


BASELINES: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "Otsu": lambda img: otsu(img)[1],
    "Niblack": niblack,
    "Sauvola": sauvola,
    "Bradley": bradley,
}
