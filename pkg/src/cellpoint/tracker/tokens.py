"""Token grids fed to update operators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..features import FeatureConfig

TIME_DIM = 32


def time_encoding(T: int, width: int = TIME_DIM) -> np.ndarray:
    """(T, width) sinusoidal encoding of frame positions 0..T-1."""
    if width % 2:
        raise ValueError("time encoding width must be even")
    pos = np.arange(T, dtype=float)[:, None]
    freq = 10000.0 ** (-np.arange(width // 2, dtype=float) / (width // 2))
    ang = pos * freq
    out = np.empty((T, width))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


def token_width(cfg: FeatureConfig, time_dim: int = TIME_DIM) -> int:
    return 6 + 3 + cfg.dim + cfg.corr_width + time_dim


@dataclass(frozen=True)
class TokenGrid:
    """Per (cell, frame) token blocks; :attr:`data` is their concatenation
    in the order loc (6), vis (3), feat (dim), corr (S*(2d+1)^2), time."""

    loc: np.ndarray  # (N, T, 6)  L_t - L_0 per slot, flattened (x, y)
    vis: np.ndarray  # (N, T, 3)
    feat: np.ndarray  # (N, T, dim)
    corr: np.ndarray  # (N, T, S, 2d+1, 2d+1)
    time: np.ndarray  # (T, time_dim)

    @property
    def shape(self) -> tuple[int, int]:
        return self.loc.shape[:2]

    @property
    def width(self) -> int:
        return 9 + self.feat.shape[-1] + int(np.prod(self.corr.shape[2:])) + self.time.shape[-1]

    @property
    def data(self) -> np.ndarray:
        N, T = self.shape
        return np.concatenate(
            [
                self.loc,
                self.vis,
                self.feat,
                self.corr.reshape(N, T, -1),
                np.broadcast_to(self.time, (N, T, self.time.shape[-1])),
            ],
            axis=-1,
        )

    def split(self, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Cut a gradient on :attr:`data` into (loc, feat, corr) parts."""
        dim = self.feat.shape[-1]
        nc = int(np.prod(self.corr.shape[2:]))
        return (
            grad[..., :6],
            grad[..., 9 : 9 + dim],
            grad[..., 9 + dim : 9 + dim + nc].reshape(self.corr.shape),
        )


def assemble_tokens(
    L: np.ndarray,
    V: np.ndarray,
    F: np.ndarray,
    corr: np.ndarray,
    cfg: FeatureConfig,
    time_dim: int = TIME_DIM,
) -> TokenGrid:
    """Build the token grid for locations ``L`` (N, T, 3, 2), visibilities
    ``V`` (N, T, 3), features ``F`` (N, T, dim) and correlations
    (N, T, S, 2d+1, 2d+1)."""
    L = np.asarray(L, dtype=float)
    N, T = L.shape[:2]
    want = {
        "L": (L.shape, (N, T, 3, 2)),
        "V": (np.shape(V), (N, T, 3)),
        "F": (np.shape(F), (N, T, cfg.dim)),
        "corr": (np.shape(corr), (N, T, cfg.S, cfg.window, cfg.window)),
    }
    for name, (got, exp) in want.items():
        if tuple(got) != exp:
            raise ValueError(f"{name} has shape {tuple(got)}, expected {exp}")
    loc = (L - L[:, :1]).reshape(N, T, 6)
    return TokenGrid(loc, np.asarray(V, float), np.asarray(F, float), np.asarray(corr, float),
                     time_encoding(T, time_dim))


def loc_grad_to_L(dloc: np.ndarray) -> np.ndarray:
    """Adjoint of the relative-location block: (N, T, 6) -> (N, T, 3, 2)."""
    N, T = dloc.shape[:2]
    d = dloc.reshape(N, T, 3, 2).copy()
    d[:, 0] -= d.sum(axis=1)
    return d
