"""Attention-based update operator with hand-written reverse mode.

Architecture (single head throughout)::

    x = (tokens * input_scale) @ W_in + b_in
    repeat n_blocks:
        x = x + TimeAttention(LN(x))        # over frames, per cell
        x = x + CellAttention(LN(x))        # over cells, per frame
        x = x + FF(LN(x))                   # width -> hidden -> width, ReLU
    out = LN(x) @ W_out + b_out             # (6 location, dim feature) increments

Location increments are in units of ``loc_scale`` pixels. The visibility
head is ``sigmoid(F @ vis_W.T + vis_b)`` on the final features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..features import FeatureConfig
from .operators import WindowState, sigmoid
from .tokens import TIME_DIM, TokenGrid, token_width

LN_EPS = 1e-5


@dataclass(frozen=True)
class OperatorShape:
    dim: int = 128
    S: int = 4
    delta: int = 3
    k: int = 4
    time_dim: int = TIME_DIM
    width: int = 64
    hidden: int = 128
    n_blocks: int = 2
    loc_scale: float = 8.0

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(k=self.k, dim=self.dim, S=self.S, delta=self.delta)

    @property
    def token_width(self) -> int:
        return token_width(self.features, self.time_dim)


def init_params(shape: OperatorShape, seed: int = 0, out_scale: float = 0.01) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, H = shape.width, shape.hidden

    def dense(n_in, n_out, gain=1.0):
        return rng.normal(0.0, gain / np.sqrt(n_in), (n_in, n_out))

    p: dict[str, np.ndarray] = {
        "in.W": dense(shape.token_width, D),
        "in.b": np.zeros(D),
    }
    for b in range(shape.n_blocks):
        for ln in ("ln1", "ln2", "ln3"):
            p[f"b{b}.{ln}.g"] = np.ones(D)
            p[f"b{b}.{ln}.b"] = np.zeros(D)
        for att in ("tatt", "catt"):
            for w in ("Wq", "Wk", "Wv"):
                p[f"b{b}.{att}.{w}"] = dense(D, D)
            p[f"b{b}.{att}.Wo"] = dense(D, D, 0.5)
            p[f"b{b}.{att}.bo"] = np.zeros(D)
        p[f"b{b}.ff.W1"] = dense(D, H, np.sqrt(2.0))
        p[f"b{b}.ff.b1"] = np.zeros(H)
        p[f"b{b}.ff.W2"] = dense(H, D, 0.5)
        p[f"b{b}.ff.b2"] = np.zeros(D)
    p["out.ln.g"] = np.ones(D)
    p["out.ln.b"] = np.zeros(D)
    p["out.W"] = rng.normal(0.0, out_scale, (D, 6 + shape.dim))
    p["out.b"] = np.zeros(6 + shape.dim)
    p["vis.W"] = rng.normal(0.0, out_scale, (3, shape.dim))
    p["vis.b"] = np.array([2.0, -2.0, -2.0])
    return p


# --- layers -----------------------------------------------------------------


def _ln_fwd(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(-1, keepdims=True) + LN_EPS)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def _ln_bwd(dy, cache):
    xh, inv, g = cache
    dg = (dy * xh).reshape(-1, xh.shape[-1]).sum(0)
    db = dy.reshape(-1, xh.shape[-1]).sum(0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(-1, keepdims=True) - xh * (dxh * xh).mean(-1, keepdims=True))
    return dx, dg, db


def _att_fwd(x, Wq, Wk, Wv, Wo, bo):
    """Self-attention over axis 1 of (B, L, D)."""
    D = x.shape[-1]
    q, k, v = x @ Wq, x @ Wk, x @ Wv
    s = q @ k.transpose(0, 2, 1) / np.sqrt(D)
    s = s - s.max(-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(-1, keepdims=True)
    c = a @ v
    return c @ Wo + bo, (x, q, k, v, a, c)


def _att_bwd(do, cache, Wq, Wk, Wv, Wo):
    x, q, k, v, a, c = cache
    D = x.shape[-1]
    flat = lambda z: z.reshape(-1, z.shape[-1])  # noqa: E731
    g = {"Wo": flat(c).T @ flat(do), "bo": flat(do).sum(0)}
    dc = do @ Wo.T
    da = dc @ v.transpose(0, 2, 1)
    dv = a.transpose(0, 2, 1) @ dc
    ds = a * (da - (da * a).sum(-1, keepdims=True)) / np.sqrt(D)
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    g["Wq"] = flat(x).T @ flat(dq)
    g["Wk"] = flat(x).T @ flat(dk)
    g["Wv"] = flat(x).T @ flat(dv)
    dx = dq @ Wq.T + dk @ Wk.T + dv @ Wv.T
    return dx, g


# --- operator ---------------------------------------------------------------


class LearnedOperator:
    def __init__(self, shape: OperatorShape, params: dict[str, np.ndarray] | None = None, seed: int = 0):
        self.shape = shape
        self.params = init_params(shape, seed) if params is None else params
        self.in_scale = np.ones(shape.token_width)
        self.in_scale[:6] = 1.0 / shape.loc_scale

    @property
    def features(self) -> FeatureConfig:
        return self.shape.features

    def forward(self, tokens: TokenGrid):
        p, sh = self.params, self.shape
        x = tokens.data * self.in_scale
        N, T, _ = x.shape
        cache: dict = {"x_in": x}
        h = x @ p["in.W"] + p["in.b"]
        blocks = []
        for b in range(sh.n_blocks):
            pre = f"b{b}."
            bc = {}
            y, bc["ln1"] = _ln_fwd(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            o, bc["tatt"] = _att_fwd(y, *(p[pre + "tatt." + w] for w in ("Wq", "Wk", "Wv", "Wo", "bo")))
            h = h + o
            y, bc["ln2"] = _ln_fwd(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            o, bc["catt"] = _att_fwd(
                y.transpose(1, 0, 2), *(p[pre + "catt." + w] for w in ("Wq", "Wk", "Wv", "Wo", "bo"))
            )
            h = h + o.transpose(1, 0, 2)
            y, bc["ln3"] = _ln_fwd(h, p[pre + "ln3.g"], p[pre + "ln3.b"])
            z = y @ p[pre + "ff.W1"] + p[pre + "ff.b1"]
            r = np.maximum(z, 0.0)
            h = h + r @ p[pre + "ff.W2"] + p[pre + "ff.b2"]
            bc["ff"] = (y, z, r)
            blocks.append(bc)
        cache["blocks"] = blocks
        y, cache["lnf"] = _ln_fwd(h, p["out.ln.g"], p["out.ln.b"])
        cache["y_out"] = y
        out = y @ p["out.W"] + p["out.b"]
        dL = out[..., :6].reshape(N, T, 3, 2) * sh.loc_scale
        dF = out[..., 6:]
        return (dL, dF), cache

    def apply(self, tokens: TokenGrid):
        return self.forward(tokens)[0]

    def backward(self, d_dL: np.ndarray, d_dF: np.ndarray, cache) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        """Gradient w.r.t. token data and parameters given gradients on the
        two increments."""
        p, sh = self.params, self.shape
        N, T = d_dF.shape[:2]
        flat = lambda z: z.reshape(-1, z.shape[-1])  # noqa: E731
        dout = np.concatenate([d_dL.reshape(N, T, 6) * sh.loc_scale, d_dF], axis=-1)
        g: dict[str, np.ndarray] = {}
        g["out.W"] = flat(cache["y_out"]).T @ flat(dout)
        g["out.b"] = flat(dout).sum(0)
        dh, g["out.ln.g"], g["out.ln.b"] = _ln_bwd(dout @ p["out.W"].T, cache["lnf"])
        for b in reversed(range(sh.n_blocks)):
            pre = f"b{b}."
            bc = cache["blocks"][b]
            y, z, r = bc["ff"]
            g[pre + "ff.W2"] = flat(r).T @ flat(dh)
            g[pre + "ff.b2"] = flat(dh).sum(0)
            dz = (dh @ p[pre + "ff.W2"].T) * (z > 0)
            g[pre + "ff.W1"] = flat(y).T @ flat(dz)
            g[pre + "ff.b1"] = flat(dz).sum(0)
            dy, g[pre + "ln3.g"], g[pre + "ln3.b"] = _ln_bwd(dz @ p[pre + "ff.W1"].T, bc["ln3"])
            dh = dh + dy
            do = dh.transpose(1, 0, 2)
            dy, ga = _att_bwd(do, bc["catt"], *(p[pre + "catt." + w] for w in ("Wq", "Wk", "Wv", "Wo")))
            for k, v in ga.items():
                g[pre + "catt." + k] = v
            dy, g[pre + "ln2.g"], g[pre + "ln2.b"] = _ln_bwd(dy.transpose(1, 0, 2), bc["ln2"])
            dh = dh + dy
            dy, ga = _att_bwd(dh, bc["tatt"], *(p[pre + "tatt." + w] for w in ("Wq", "Wk", "Wv", "Wo")))
            for k, v in ga.items():
                g[pre + "tatt." + k] = v
            dy, g[pre + "ln1.g"], g[pre + "ln1.b"] = _ln_bwd(dy, bc["ln1"])
            dh = dh + dy
        g["in.W"] = flat(cache["x_in"]).T @ flat(dh)
        g["in.b"] = flat(dh).sum(0)
        dtok = (dh @ p["in.W"].T) * self.in_scale
        return dtok, g

    def visibility_logits(self, F: np.ndarray) -> np.ndarray:
        return F @ self.params["vis.W"].T + self.params["vis.b"]

    def readout(self, state: WindowState):
        return state.L, sigmoid(self.visibility_logits(state.F))
