"""Linear forward operators, noise simulation and data-fidelity terms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage, sparse

from .errors import InvalidArgumentError, UnsupportedOpError
from .imagecore import as_image

LODOPAB_MU = 81.35858
LODOPAB_N0 = 4096.0


def _check_shape(x, shape, what="input"):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(shape):
        raise InvalidArgumentError(f"{what} has shape {x.shape}, expected {tuple(shape)}")
    return x


class LinearOperator:
    in_shape: Tuple[int, int]
    out_shape: Tuple[int, ...]

    def apply(self, x) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, y) -> np.ndarray:
        raise NotImplementedError

    def naive_inverse(self, y) -> np.ndarray:
        raise UnsupportedOpError(f"{type(self).__name__} has no naive inverse")

    def __call__(self, x):
        return self.apply(x)


class Identity(LinearOperator):
    def __init__(self, shape):
        self.in_shape = self.out_shape = tuple(shape)

    def apply(self, x):
        return _check_shape(x, self.in_shape).copy()

    def adjoint(self, y):
        return _check_shape(y, self.out_shape, "observation").copy()

    def naive_inverse(self, y):
        return self.adjoint(y)


class MatrixOperator(LinearOperator):
    """Explicit matrix acting on column-major flattened images."""

    def __init__(self, A, in_shape, out_shape=None):
        self.A = np.asarray(A, dtype=np.float64)
        self.in_shape = tuple(in_shape)
        self.out_shape = (self.A.shape[0],) if out_shape is None else tuple(out_shape)
        if self.A.shape[1] != int(np.prod(self.in_shape)):
            raise InvalidArgumentError("matrix columns do not match the image size")

    def apply(self, x):
        x = _check_shape(x, self.in_shape)
        return (self.A @ x.ravel(order="F")).reshape(self.out_shape, order="F")

    def adjoint(self, y):
        y = _check_shape(y, self.out_shape, "observation")
        return (self.A.T @ y.ravel(order="F")).reshape(self.in_shape, order="F")


# ---------------------------------------------------------------------------
# inpainting


class InpaintModel(LinearOperator):
    """Pixel mask; ``apply`` and ``adjoint`` are both the mask product."""

    def __init__(self, mask):
        m = np.asarray(mask)
        if m.ndim != 2:
            raise InvalidArgumentError("mask must be 2D")
        if not np.all((m == 0) | (m == 1)):
            raise InvalidArgumentError("mask must be binary")
        self.mask = m.astype(np.float64)
        self.in_shape = self.out_shape = m.shape

    def apply(self, x):
        return _check_shape(x, self.in_shape) * self.mask

    adjoint = apply

    def naive_inverse(self, y):
        return _check_shape(y, self.out_shape, "observation") * self.mask


# ---------------------------------------------------------------------------
# super-resolution


def gaussian_kernel(size: int = 16, std: float = 2.0) -> np.ndarray:
    if size < 1 or std <= 0:
        raise InvalidArgumentError("kernel size must be >= 1 and std > 0")
    t = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (t / std) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


class SuperResModel(LinearOperator):
    """Blur with reflect padding, then keep every ``factor``-th pixel from the top-left."""

    def __init__(self, hr_shape, factor: int = 2, kernel=None, std: float = 2.0, kernel_size: int = 16):
        if factor < 1:
            raise InvalidArgumentError("subsampling factor must be >= 1")
        self.kernel = gaussian_kernel(kernel_size, std) if kernel is None else np.asarray(kernel, dtype=np.float64)
        if self.kernel.ndim != 2 or abs(self.kernel.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError("blur kernel must be 2D with taps summing to 1")
        self.factor = int(factor)
        self.in_shape = tuple(hr_shape)
        H, W = self.in_shape
        self.out_shape = (-(-H // factor), -(-W // factor))
        kh, kw = self.kernel.shape
        lo_r, lo_c = (kh - 1) // 2, (kw - 1) // 2
        self._ridx = np.pad(np.arange(H), (lo_r, kh - 1 - lo_r), mode="reflect")
        self._cidx = np.pad(np.arange(W), (lo_c, kw - 1 - lo_c), mode="reflect")

    def blur(self, x):
        x = _check_shape(x, self.in_shape)
        H, W = self.in_shape
        padded = x[np.ix_(self._ridx, self._cidx)]
        out = np.zeros(self.in_shape)
        for a, b in zip(*np.nonzero(self.kernel)):
            out += self.kernel[a, b] * padded[a : a + H, b : b + W]
        return out

    def blur_adjoint(self, g):
        H, W = self.in_shape
        kh, kw = self.kernel.shape
        padded = np.zeros((H + kh - 1, W + kw - 1))
        for a, b in zip(*np.nonzero(self.kernel)):
            padded[a : a + H, b : b + W] += self.kernel[a, b] * g
        flat = (self._ridx[:, None] * W + self._cidx[None, :]).ravel()
        return np.bincount(flat, weights=padded.ravel(), minlength=H * W).reshape(H, W)

    def apply(self, x):
        f = self.factor
        return self.blur(x)[::f, ::f]

    def adjoint(self, y):
        y = _check_shape(y, self.out_shape, "observation")
        up = np.zeros(self.in_shape)
        up[:: self.factor, :: self.factor] = y
        return self.blur_adjoint(up)

    def naive_inverse(self, y):
        return bicubic_upsample(y, self.factor, self.in_shape)


def bicubic_upsample(y, factor: int, out_shape=None) -> np.ndarray:
    """Cubic-spline upsampling aligned with top-left subsampling."""
    y = as_image(y)
    H, W = out_shape if out_shape is not None else (y.shape[0] * factor, y.shape[1] * factor)
    rr, cc = np.meshgrid(np.arange(H) / factor, np.arange(W) / factor, indexing="ij")
    return ndimage.map_coordinates(y, [rr, cc], order=3, mode="nearest")


# ---------------------------------------------------------------------------
# parallel-beam CT


class RadonModel(LinearOperator):
    """Parallel-beam Radon transform on a square image of physical side ``side``.

    Ray-driven (Joseph): each ray is stepped one pixel at a time along its
    dominant axis and the image is interpolated linearly across the other
    axis.  The operator is stored as a sparse matrix, so the adjoint is its
    exact transpose.  Sinograms have shape ``(n_angles, n_detectors)``.
    """

    def __init__(self, n: int, n_angles: int = 60, n_detectors: Optional[int] = None,
                 angle_range=(0.0, math.pi), side: float = 0.26, det_span: Optional[float] = None):
        if n_angles < 1:
            raise InvalidArgumentError("need at least one angle")
        a0, a1 = angle_range
        if not (0.0 <= a0 < a1 <= math.pi + 1e-12):
            raise InvalidArgumentError("angle range must lie in [0, pi)")
        self.n = int(n)
        self.side = float(side)
        self.n_angles = int(n_angles)
        self.n_detectors = int(n_detectors) if n_detectors else int(math.ceil(n * math.sqrt(2.0))) + 2
        self.det_span = float(det_span) if det_span else side * math.sqrt(2.0)
        step = (a1 - a0) / n_angles
        self.angles = a0 + (np.arange(n_angles) + 0.5) * step
        self.pixel = side / n
        self.ds = self.det_span / self.n_detectors
        self.in_shape = (self.n, self.n)
        self.out_shape = (self.n_angles, self.n_detectors)
        self.matrix = self._assemble()
        self._matrix_T = self.matrix.T.tocsr()

    def _assemble(self):
        n, h, nd = self.n, self.pixel, self.n_detectors
        half = self.side / 2.0
        s = self.detector_positions()[:, None]
        steps = ((np.arange(n) + 0.5) * h - half)[None, :]  # centers along the stepping axis
        rows, cols, vals = [], [], []
        ray = np.broadcast_to(np.arange(nd)[:, None], (nd, n))
        for k, th in enumerate(self.angles):
            c, sn = math.cos(th), math.sin(th)
            if abs(c) >= abs(sn):
                # step over image rows: y fixed, solve for x on the ray
                y = -steps
                x = (s - y * sn) / c
                u = (x + half) / h - 0.5
                fixed = np.broadcast_to(np.arange(n)[None, :], (nd, n))
                length = h / abs(c)
                pix = lambda f, v: fixed * n + v  # noqa: E731
            else:
                x = steps
                y = (s - x * c) / sn
                u = (half - y) / h - 0.5
                fixed = np.broadcast_to(np.arange(n)[None, :], (nd, n))
                length = h / abs(sn)
                pix = lambda f, v: v * n + fixed  # noqa: E731
            i0 = np.floor(u).astype(np.int64)
            w = u - i0
            for idx, wt in ((i0, 1.0 - w), (i0 + 1, w)):
                ok = (idx >= 0) & (idx < n) & (wt > 0)
                rows.append(k * nd + ray[ok])
                cols.append(pix(fixed, idx)[ok])
                vals.append(length * wt[ok])
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_angles * nd, n * n),
        )

    def detector_positions(self) -> np.ndarray:
        return (np.arange(self.n_detectors) + 0.5 - self.n_detectors / 2.0) * self.ds

    def apply(self, x):
        x = _check_shape(x, self.in_shape)
        return (self.matrix @ x.ravel()).reshape(self.out_shape)

    def adjoint(self, y):
        y = _check_shape(y, self.out_shape, "sinogram")
        return (self._matrix_T @ y.ravel()).reshape(self.in_shape)

    def naive_inverse(self, y):
        return fbp(self, y)

    def backproject(self, q) -> np.ndarray:
        """Interpolating backprojection ``sum_theta q_theta(<p, theta>)`` (no angular weight)."""
        q = _check_shape(q, self.out_shape, "sinogram")
        centers = (np.arange(self.n) + 0.5) * self.pixel - self.side / 2.0
        X, Y = np.meshgrid(centers, -centers, indexing="xy")
        det = self.detector_positions()
        out = np.zeros(self.n * self.n)
        px, py = X.ravel(), Y.ravel()
        for k, th in enumerate(self.angles):
            out += np.interp(px * math.cos(th) + py * math.sin(th), det, q[k], left=0.0, right=0.0)
        return out.reshape(self.in_shape)


def radon(model: RadonModel, x) -> np.ndarray:
    return model.apply(x)


def ramp_filter(n_detectors: int, ds: float, window: str = "hann", cutoff: float = 0.641):
    """Frequency response of the band-limited ramp filter times a window.

    Built from the spatial Ram-Lak kernel to avoid the DC offset of a
    sampled ``|omega|``.  ``cutoff`` is the fraction of the Nyquist
    frequency kept; the window is stretched to end at the cutoff.
    """
    if not 0 < cutoff <= 1:
        raise InvalidArgumentError("cutoff must be in (0, 1]")
    P = max(64, int(2 ** math.ceil(math.log2(2 * n_detectors))))
    k = np.concatenate([np.arange(0, P // 2), np.arange(-P // 2, 0)])
    h = np.zeros(P)
    h[0] = 1.0 / (4.0 * ds * ds)
    odd = k % 2 == 1
    h[odd] = -1.0 / (np.pi * k[odd] * ds) ** 2
    H = np.real(np.fft.fft(h)) * ds
    nu = np.abs(np.fft.fftfreq(P)) * 2.0  # 1 at Nyquist
    if window == "hann":
        win = np.cos(np.pi * nu / (2.0 * cutoff)) ** 2
    elif window in ("ramp", "ram-lak", None):
        win = np.ones(P)
    else:
        raise InvalidArgumentError(f"unknown filter window {window!r}")
    win[nu > cutoff] = 0.0
    return H * win, P


def fbp(model: RadonModel, sinogram, window: str = "hann", cutoff: float = 0.641) -> np.ndarray:
    """Filtered backprojection: windowed ramp filtering per angle, then ``pi / n_angles`` times backprojection."""
    sino = _check_shape(sinogram, model.out_shape, "sinogram")
    H, P = ramp_filter(model.n_detectors, model.ds, window, cutoff)
    padded = np.zeros((model.n_angles, P))
    padded[:, : model.n_detectors] = sino
    q = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * H[None, :], axis=1))[:, : model.n_detectors]
    return model.backproject(q) * (math.pi / model.n_angles)


# ---------------------------------------------------------------------------
# data terms


@dataclass(frozen=True)
class GaussianL2:
    """``||F x - y||^2 / (2 sigma^2)``; the default ``sigma = 1`` gives the plain half squared norm."""

    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidArgumentError("sigma must be positive")


@dataclass(frozen=True)
class PoissonCT:
    N0: float = LODOPAB_N0
    mu: float = LODOPAB_MU

    def __post_init__(self):
        if not self.N0 > 0 or not self.mu > 0:
            raise InvalidArgumentError("N0 and mu must be positive")


@dataclass(frozen=True)
class Equality:
    tol: float = 0.0


def data_value(term, F: LinearOperator, x, y) -> float:
    Fx = F.apply(x)
    y = _check_shape(y, Fx.shape, "observation")
    if isinstance(term, GaussianL2):
        r = (Fx - y) / term.sigma
        return 0.5 * float(np.sum(r * r))
    if isinstance(term, PoissonCT):
        N0, mu = term.N0, term.mu
        return float(np.sum(N0 * np.exp(-mu * Fx) + N0 * np.exp(-mu * y) * (mu * Fx - math.log(N0))))
    if isinstance(term, Equality):
        return 0.0 if np.max(np.abs(Fx - y), initial=0.0) <= term.tol else math.inf
    raise InvalidArgumentError(f"unknown data term {term!r}")


def data_grad(term, F: LinearOperator, x, y) -> np.ndarray:
    Fx = F.apply(x)
    y = _check_shape(y, Fx.shape, "observation")
    if isinstance(term, GaussianL2):
        return F.adjoint((Fx - y) / term.sigma) / term.sigma
    if isinstance(term, PoissonCT):
        N0, mu = term.N0, term.mu
        return F.adjoint(-mu * N0 * np.exp(-mu * Fx) + mu * N0 * np.exp(-mu * y))
    if isinstance(term, Equality):
        raise UnsupportedOpError("the equality constraint has no gradient; use a projected solver")
    raise InvalidArgumentError(f"unknown data term {term!r}")


def simulate_observation(F: LinearOperator, x, noise, seed: int = 0) -> np.ndarray:
    """Noisy observation of ``x``; the data term doubles as the noise law."""
    rng = np.random.default_rng(seed)
    Fx = F.apply(x)
    if isinstance(noise, GaussianL2) or isinstance(noise, (int, float)):
        sigma = noise.sigma if isinstance(noise, GaussianL2) else float(noise)
        return Fx + sigma * rng.standard_normal(Fx.shape) if sigma > 0 else Fx
    if isinstance(noise, PoissonCT):
        counts = rng.poisson(noise.N0 * np.exp(-noise.mu * Fx)).astype(np.float64)
        counts = np.maximum(counts, 1.0)
        return -np.log(counts / noise.N0) / noise.mu
    if noise is None or isinstance(noise, Equality):
        return Fx
    raise InvalidArgumentError(f"unknown noise spec {noise!r}")


# (cx, cy, semi-axis a, semi-axis b, rotation, value); later entries overwrite earlier ones
_PHANTOM_ELLIPSES = (
    (0.0, 0.0, 0.42, 0.34, 0.0, 0.5),
    (0.12, 0.05, 0.1, 0.16, 0.5, 0.35),
    (-0.15, -0.1, 0.08, 0.08, 0.0, 0.4),
    (0.0, 0.2, 0.05, 0.05, 0.0, 0.45),
    (-0.05, -0.22, 0.12, 0.04, 0.3, 0.25),
)


def ellipse_phantom(n: int = 128, supersample: int = 4) -> np.ndarray:
    """Fixed piecewise-constant test phantom in ``[0, 1]`` on the unit square.

    A few ellipses plus a row of small bright disks; pixel values are area
    averages over a ``supersample``-fold finer grid.
    """
    m = n * supersample
    c = (np.arange(m) + 0.5) / m - 0.5
    X, Y = np.meshgrid(c, -c)
    img = np.zeros_like(X)
    for cx, cy, a, b, phi, v in _PHANTOM_ELLIPSES:
        xr = (X - cx) * np.cos(phi) + (Y - cy) * np.sin(phi)
        yr = -(X - cx) * np.sin(phi) + (Y - cy) * np.cos(phi)
        img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] = v
    for k in range(6):
        img[(X - 0.2 + 0.05 * k) ** 2 + (Y + 0.05) ** 2 <= 0.012**2] = 1.0
    return img.reshape(n, supersample, n, supersample).mean(axis=(1, 3))
