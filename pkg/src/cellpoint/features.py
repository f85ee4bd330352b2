"""Feature pyramids, bilinear point sampling and local correlation lookups.

Coordinate conventions
----------------------
Pixel ``(x, y)`` is column ``x``, row ``y`` with its centre at the integer
coordinate. Level ``s`` (0-based here, ``s = 0`` is the stride-``k`` base map)
has cells of ``k * 2**s`` pixels; a pixel coordinate maps to the continuous
map coordinate ``(x + 0.5) / (k * 2**s) - 0.5`` so that cell centres line up
across levels. Maps are channel-first ``(C, h, w)``. Sampling clamps
coordinates to the valid grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import ndimage


class SizeError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    k: int = 4
    dim: int = 128
    S: int = 4
    delta: int = 3

    def __post_init__(self):
        if self.k < 1 or self.S < 1 or self.delta < 0 or self.dim < 1:
            raise ValueError(f"invalid feature config {self}")

    @property
    def window(self) -> int:
        return 2 * self.delta + 1

    @property
    def corr_width(self) -> int:
        return self.S * self.window**2

    def level_shape(self, H: int, W: int, s: int) -> tuple[int, int]:
        f = self.k * 2**s
        return -(-H // f), -(-W // f)


class FeatureEncoder(Protocol):
    dim: int
    stride: int

    def encode(self, frame: np.ndarray) -> np.ndarray:
        """(H, W) frame -> (dim, ceil(H/k), ceil(W/k)) feature map."""
        ...


def pad_to_multiple(img: np.ndarray, k: int) -> np.ndarray:
    H, W = img.shape[-2:]
    ph, pw = (-H) % k, (-W) % k
    if ph == 0 and pw == 0:
        return img
    pad = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad, mode="edge")


def avg_pool(x: np.ndarray, f: int) -> np.ndarray:
    """Non-overlapping ``f x f`` mean over the last two axes, edge-padded."""
    if f == 1:
        return x
    x = pad_to_multiple(x, f)
    h, w = x.shape[-2] // f, x.shape[-1] // f
    return x.reshape(*x.shape[:-2], h, f, w, f).mean(axis=(-3, -1))


def pool_backward(grad: np.ndarray, f: int, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`avg_pool`: spreads cell gradients back to the input,
    folding the edge padding onto the last row/column."""
    if f == 1:
        return grad
    up = np.repeat(np.repeat(grad, f, axis=-2), f, axis=-1) / (f * f)
    H, W = shape
    out = up[..., :H, :W].copy()
    if up.shape[-2] > H:
        out[..., H - 1, :] += up[..., H:, :W].sum(axis=-2)
    if up.shape[-1] > W:
        out[..., :, W - 1] += up[..., :H, W:].sum(axis=-1)
        if up.shape[-2] > H:
            out[..., H - 1, W - 1] += up[..., H:, W:].sum(axis=(-2, -1))
    return out


class FixedEncoder:
    """Training-free encoder built from Gaussian-derivative filter banks.

    Base responses per smoothing scale: intensity, first derivatives at four
    orientations and the three second derivatives; plus differences of
    Gaussians between consecutive scales. With ``contrast`` set, each pixel's
    response vector is divided by its norm plus ``contrast`` times the norm at
    the centre of a unit reference spot, so bright and dim cells give
    comparable correlation peaks. Responses are averaged over ``k x k`` cells
    and embedded into ``dim`` channels with a fixed seeded orthonormal
    map (an isometry when ``dim`` is at least the number of base responses,
    so inner products do not depend on ``dim``). Outputs are scaled so that a
    unit-amplitude Gaussian spot of width ``ref_sigma`` has a unit-norm
    feature at its centre.
    """

    def __init__(
        self,
        dim: int = 128,
        k: int = 4,
        sigmas: Sequence[float] = (1.0, 2.0),
        ref_sigma: float = 3.0,
        contrast: float | None = 0.3,
        seed: int = 0,
    ):
        self.dim = dim
        self.stride = k
        self.sigmas = tuple(float(s) for s in sigmas)
        n_base = 8 * len(self.sigmas) + max(len(self.sigmas) - 1, 0)
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((max(dim, n_base), max(dim, n_base)))
        q, _ = np.linalg.qr(a)
        self.embed = q[:dim, :n_base]
        self.scale = 1.0
        self.floor = None
        size = int(8 * ref_sigma) | 1
        c = size // 2
        yy, xx = np.mgrid[:size, :size]
        spot = np.exp(-((xx - c) ** 2 + (yy - c) ** 2) / (2 * ref_sigma**2))
        if contrast is not None:
            self.floor = contrast * float(np.linalg.norm(self._base(spot)[:, c, c]))
        base = self._base(spot)[:, c, c]
        self.scale = 1.0 / float(np.linalg.norm(base))

    @property
    def n_base(self) -> int:
        return self.embed.shape[1]

    def _base(self, img: np.ndarray) -> np.ndarray:
        img = np.asarray(img, dtype=float)
        out = []
        smooth = []
        for s in self.sigmas:
            g = ndimage.gaussian_filter(img, s, mode="nearest")
            gy = ndimage.gaussian_filter(img, s, order=(1, 0), mode="nearest") * s
            gx = ndimage.gaussian_filter(img, s, order=(0, 1), mode="nearest") * s
            gyy = ndimage.gaussian_filter(img, s, order=(2, 0), mode="nearest") * s * s
            gxx = ndimage.gaussian_filter(img, s, order=(0, 2), mode="nearest") * s * s
            gxy = ndimage.gaussian_filter(img, s, order=(1, 1), mode="nearest") * s * s
            r = np.sqrt(0.5)
            out += [g, gx, gy, r * (gx + gy), r * (gx - gy), gxx, gyy, gxy]
            smooth.append(g)
        out += [a - b for a, b in zip(smooth, smooth[1:])]
        resp = np.stack(out)
        if self.floor is not None:
            resp = resp / (np.linalg.norm(resp, axis=0) + self.floor)
        return resp * self.scale

    def encode(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=float)
        pooled = avg_pool(self._base(frame), self.stride)
        return np.einsum("db,bhw->dhw", self.embed, pooled)


class LearnedEncoder:
    """Two 3x3 convolutions (ReLU between) with total stride ``k``.

    ``params`` holds ``conv1_w`` (hidden, 1, 3, 3), ``conv1_b``, ``conv2_w``
    (dim, hidden, 3, 3), ``conv2_b``. :meth:`backward` returns parameter
    gradients for a gradient on the output map.
    """

    def __init__(self, dim: int = 128, k: int = 4, hidden: int = 16, seed: int = 0,
                 params: dict[str, np.ndarray] | None = None):
        self.dim = dim
        self.stride = k
        self.s1 = 2 if k % 2 == 0 else 1
        self.s2 = k // self.s1
        if self.s1 * self.s2 != k:
            raise ValueError(f"stride {k} cannot be split into two convolutions")
        if params is None:
            rng = np.random.default_rng(seed)
            params = {
                "conv1_w": rng.standard_normal((hidden, 1, 3, 3)) * np.sqrt(2 / 9),
                "conv1_b": np.zeros(hidden),
                "conv2_w": rng.standard_normal((dim, hidden, 3, 3)) * np.sqrt(1 / (9 * hidden)),
                "conv2_b": np.zeros(dim),
            }
        self.params = params

    @staticmethod
    def _im2col(x: np.ndarray, stride: int) -> np.ndarray:
        # x: (C, H, W) -> (C*9, H/stride, W/stride), 'same' padding by edge
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
        C, H, W = x.shape
        cols = np.empty((C, 3, 3, H // stride, W // stride))
        for dy in range(3):
            for dx in range(3):
                cols[:, dy, dx] = xp[:, dy : dy + H : stride, dx : dx + W : stride]
        return cols.reshape(C * 9, H // stride, W // stride)

    @staticmethod
    def _col2im(cols: np.ndarray, shape: tuple[int, int, int], stride: int) -> np.ndarray:
        C, H, W = shape
        cols = cols.reshape(C, 3, 3, H // stride, W // stride)
        xp = np.zeros((C, H + 2, W + 2))
        for dy in range(3):
            for dx in range(3):
                xp[:, dy : dy + H : stride, dx : dx + W : stride] += cols[:, dy, dx]
        # fold the edge padding back onto the border
        xp[:, 1, :] += xp[:, 0, :]
        xp[:, -2, :] += xp[:, -1, :]
        xp[:, :, 1] += xp[:, :, 0]
        xp[:, :, -2] += xp[:, :, -1]
        return xp[:, 1:-1, 1:-1]

    def forward(self, frame: np.ndarray):
        p = self.params
        x = pad_to_multiple(np.asarray(frame, dtype=float), self.stride)[None]
        c1 = self._im2col(x, self.s1)
        h = np.einsum("ok,khw->ohw", p["conv1_w"].reshape(len(p["conv1_b"]), -1), c1)
        h += p["conv1_b"][:, None, None]
        a = np.maximum(h, 0.0)
        c2 = self._im2col(a, self.s2)
        out = np.einsum("ok,khw->ohw", p["conv2_w"].reshape(self.dim, -1), c2)
        out += p["conv2_b"][:, None, None]
        return out, (x.shape, c1, h, a.shape, c2)

    def encode(self, frame: np.ndarray) -> np.ndarray:
        return self.forward(frame)[0]

    def backward(self, grad: np.ndarray, cache) -> dict[str, np.ndarray]:
        p = self.params
        _, c1, h, a_shape, c2 = cache
        g = {}
        g["conv2_b"] = grad.sum(axis=(1, 2))
        g["conv2_w"] = np.einsum("ohw,khw->ok", grad, c2).reshape(p["conv2_w"].shape)
        dc2 = np.einsum("ok,ohw->khw", p["conv2_w"].reshape(self.dim, -1), grad)
        da = self._col2im(dc2, a_shape, self.s2)
        dh = da * (h > 0)
        g["conv1_b"] = dh.sum(axis=(1, 2))
        g["conv1_w"] = np.einsum("ohw,khw->ok", dh, c1).reshape(p["conv1_w"].shape)
        return g


@dataclass(frozen=True)
class FeaturePyramid:
    """``levels[s]`` is the (dim, h_s, w_s) map at ``k * 2**s`` pixel cells."""

    levels: tuple[np.ndarray, ...]
    k: int
    frame_shape: tuple[int, int] = field(default=(0, 0))

    @property
    def dim(self) -> int:
        return self.levels[0].shape[0]


def build_levels(base: np.ndarray, S: int) -> list[np.ndarray]:
    levels = [base]
    for _ in range(1, S):
        levels.append(avg_pool(levels[-1], 2))
    return levels


def extract_pyramid(frame: np.ndarray, encoder: FeatureEncoder, cfg: FeatureConfig) -> FeaturePyramid:
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2:
        raise SizeError(f"expected a 2-D frame, got shape {frame.shape}")
    H, W = frame.shape
    if H < cfg.k or W < cfg.k:
        raise SizeError(f"frame {H}x{W} smaller than one {cfg.k}-pixel cell")
    if encoder.stride != cfg.k or encoder.dim != cfg.dim:
        raise ValueError("encoder stride/dim disagree with the feature config")
    base = encoder.encode(frame)
    want = cfg.level_shape(H, W, 0)
    if base.shape != (cfg.dim, *want):
        raise SizeError(f"encoder produced {base.shape}, expected {(cfg.dim, *want)}")
    return FeaturePyramid(tuple(build_levels(base, cfg.S)), cfg.k, (H, W))


def stack_levels(pyramids: Sequence[FeaturePyramid]) -> list[np.ndarray]:
    """Per level, the (T, dim, h, w) stack over frames."""
    return [np.stack([p.levels[s] for p in pyramids]) for s in range(len(pyramids[0].levels))]


def to_map_coords(xy: np.ndarray, k: int, level: int) -> np.ndarray:
    f = k * 2**level
    return (np.asarray(xy, dtype=float) + 0.5) / f - 0.5


def to_pixel_coords(uv: np.ndarray, k: int, level: int) -> np.ndarray:
    f = k * 2**level
    return (np.asarray(uv, dtype=float) + 0.5) * f - 0.5


@dataclass
class _Bilinear:
    x0: np.ndarray
    y0: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    inside_x: np.ndarray
    inside_y: np.ndarray
    w: int
    h: int

    @classmethod
    def setup(cls, u: np.ndarray, v: np.ndarray, h: int, w: int) -> "_Bilinear":
        uc = np.clip(u, 0, w - 1)
        vc = np.clip(v, 0, h - 1)
        x0 = np.clip(np.floor(uc).astype(np.int64), 0, max(w - 2, 0))
        y0 = np.clip(np.floor(vc).astype(np.int64), 0, max(h - 2, 0))
        fx = uc - x0 if w > 1 else np.zeros_like(uc)
        fy = vc - y0 if h > 1 else np.zeros_like(vc)
        inside_x = (u >= 0) & (u <= w - 1) & (w > 1)
        inside_y = (v >= 0) & (v <= h - 1) & (h > 1)
        return cls(x0, y0, fx, fy, inside_x, inside_y, w, h)

    @property
    def x1(self) -> np.ndarray:
        return np.minimum(self.x0 + 1, self.w - 1)

    @property
    def y1(self) -> np.ndarray:
        return np.minimum(self.y0 + 1, self.h - 1)

    def corners(self):
        """(flat index, weight) for the four corners."""
        x0, x1, y0, y1, fx, fy, w = self.x0, self.x1, self.y0, self.y1, self.fx, self.fy, self.w
        return (
            (y0 * w + x0, (1 - fx) * (1 - fy)),
            (y0 * w + x1, fx * (1 - fy)),
            (y1 * w + x0, (1 - fx) * fy),
            (y1 * w + x1, fx * fy),
        )


def bilinear_sample(fmap: np.ndarray, point: Sequence[float]) -> np.ndarray:
    """Bilinear value of a (C, h, w) or (h, w) map at map coordinate (x, y)."""
    fmap = np.asarray(fmap, dtype=float)
    squeeze = fmap.ndim == 2
    if squeeze:
        fmap = fmap[None]
    C, h, w = fmap.shape
    b = _Bilinear.setup(np.asarray(float(point[0])), np.asarray(float(point[1])), h, w)
    flat = fmap.reshape(C, -1)
    val = sum(wt * flat[:, int(idx)] for idx, wt in b.corners())
    return val[0] if squeeze else val


def corr_full(F1: np.ndarray, F2: np.ndarray) -> np.ndarray:
    """All-pairs inner products of two (C, h, w) maps -> (h1, w1, h2, w2)."""
    F1 = np.asarray(F1, dtype=float)
    F2 = np.asarray(F2, dtype=float)
    if F1.shape[0] != F2.shape[0]:
        raise ValueError(f"channel mismatch {F1.shape[0]} vs {F2.shape[0]}")
    return np.einsum("cij,ckl->ijkl", F1, F2)


def offsets(delta: int) -> tuple[np.ndarray, np.ndarray]:
    """(dx, dy) grids of shape (2d+1, 2d+1), indexed [dy + d, dx + d]."""
    r = np.arange(-delta, delta + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return dx, dy


def corr_local(
    track_feature: np.ndarray,
    pyramid: FeaturePyramid,
    center: Sequence[float],
    cfg: FeatureConfig,
) -> np.ndarray:
    """(S, 2d+1, 2d+1) responses <F, phi_s(centre_s + delta)> for one point."""
    f = np.asarray(track_feature, dtype=float)
    dx, dy = offsets(cfg.delta)
    out = np.empty((cfg.S, cfg.window, cfg.window))
    for s in range(cfg.S):
        u, v = to_map_coords(np.asarray(center, dtype=float), cfg.k, s)
        for a in range(cfg.window):
            for b in range(cfg.window):
                vec = bilinear_sample(pyramid.levels[s], (u + dx[a, b], v + dy[a, b]))
                out[s, a, b] = f @ vec
    return out


@dataclass
class CorrCache:
    F: np.ndarray
    dots: list[np.ndarray]
    samplers: list[_Bilinear]


def corr_local_batch(
    F: np.ndarray,
    levels: Sequence[np.ndarray],
    centers: np.ndarray,
    cfg: FeatureConfig,
    keep: bool = False,
) -> tuple[np.ndarray, CorrCache | None]:
    """Correlation stacks for all (cell, frame) pairs at once.

    ``F`` is (N, T, C), ``levels[s]`` is (T, C, h_s, w_s), ``centers`` is
    (N, T, 2) in pixels. Uses the dot-product map <F, phi_s> sampled at the
    offsets, which equals sampling features first by linearity. Returns
    (N, T, S, 2d+1, 2d+1) and, with ``keep``, a cache for
    :func:`corr_local_batch_backward`.
    """
    N, T, _ = F.shape
    dx, dy = offsets(cfg.delta)
    out = np.empty((N, T, cfg.S, cfg.window, cfg.window))
    dots, samplers = [], []
    for s in range(cfg.S):
        P = levels[s]
        _, _, h, w = P.shape
        D = np.einsum("ntc,tchw->nthw", F, P, optimize=True)
        uv = to_map_coords(centers, cfg.k, s)
        u = uv[..., 0, None, None] + dx
        v = uv[..., 1, None, None] + dy
        b = _Bilinear.setup(u, v, h, w)
        flat = D.reshape(N, T, h * w)
        acc = np.zeros_like(u)
        for idx, wt in b.corners():
            acc += wt * np.take_along_axis(flat, idx.reshape(N, T, -1), axis=2).reshape(u.shape)
        out[:, :, s] = acc
        if keep:
            dots.append(D)
            samplers.append(b)
    return out, (CorrCache(F, dots, samplers) if keep else None)


def corr_local_batch_backward(
    grad: np.ndarray,
    levels: Sequence[np.ndarray],
    cache: CorrCache,
    cfg: FeatureConfig,
    want_levels: bool = False,
) -> tuple[np.ndarray, np.ndarray, list[np.ndarray] | None]:
    """Gradients of :func:`corr_local_batch` w.r.t. F, centres and (optionally)
    the feature levels."""
    F = cache.F
    N, T, C = F.shape
    dF = np.zeros_like(F)
    dcent = np.zeros((N, T, 2))
    dlev = [] if want_levels else None
    for s in range(cfg.S):
        P = levels[s]
        _, _, h, w = P.shape
        D = cache.dots[s]
        b = cache.samplers[s]
        g = grad[:, :, s]
        flat = D.reshape(N, T, h * w)

        def at(idx):
            return np.take_along_axis(flat, idx.reshape(N, T, -1), axis=2).reshape(idx.shape)

        x1, y1 = b.x1, b.y1
        v00, v01 = at(b.y0 * w + b.x0), at(b.y0 * w + x1)
        v10, v11 = at(y1 * w + b.x0), at(y1 * w + x1)
        du = (1 - b.fy) * (v01 - v00) + b.fy * (v11 - v10)
        dv = (1 - b.fx) * (v10 - v00) + b.fx * (v11 - v01)
        scale = 1.0 / (cfg.k * 2**s)
        dcent[..., 0] += (g * du * b.inside_x).sum(axis=(-2, -1)) * scale
        dcent[..., 1] += (g * dv * b.inside_y).sum(axis=(-2, -1)) * scale
        dD = np.zeros((N * T, h * w))
        base = (np.arange(N * T) * h * w)[:, None]
        for idx, wt in b.corners():
            dD_flat = np.bincount(
                (idx.reshape(N * T, -1) + base).ravel(),
                weights=(wt * g).reshape(N * T, -1).ravel(),
                minlength=N * T * h * w,
            )
            dD += dD_flat.reshape(N * T, h * w)
        dD = dD.reshape(N, T, h, w)
        dF += np.einsum("nthw,tchw->ntc", dD, P, optimize=True)
        if want_levels:
            dlev.append(np.einsum("nthw,ntc->tchw", dD, F, optimize=True))
    return dF, dcent, dlev


def sample_features(level0: np.ndarray, xy: np.ndarray, k: int) -> np.ndarray:
    """Bilinear features of a (C, h, w) base map at (M, 2) pixel points."""
    C, h, w = level0.shape
    uv = to_map_coords(xy, k, 0)
    b = _Bilinear.setup(uv[:, 0], uv[:, 1], h, w)
    flat = level0.reshape(C, -1)
    return sum(wt[:, None] * flat[:, idx].T for idx, wt in b.corners())
