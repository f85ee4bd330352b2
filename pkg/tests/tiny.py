"""Small training windows shared by tracker and acceptance tests."""

import numpy as np

from cellpoint.features import FixedEncoder, extract_pyramid, stack_levels
from cellpoint.lineage import window_records
from cellpoint.synth import SynthConfig, generate
from cellpoint.tracker.learned import LearnedOperator, OperatorShape
from cellpoint.tracker.training import TrainingWindow

GRADCHECK_SHAPE = OperatorShape(dim=8, S=2, delta=1, width=8, hidden=8, n_blocks=1, time_dim=4)
OVERFIT_SHAPE = OperatorShape(dim=32, S=4, delta=3)


def make_window(shape, size=48, T=4, n_cells=2, seed=3, jitter=0.0):
    seq = generate(SynthConfig(H=size, W=size, T=T, n_initial=n_cells, min_separation=15, seed=seed))
    cfg = shape.features
    enc = FixedEncoder(cfg.dim, cfg.k)
    levels = stack_levels([extract_pyramid(f, enc, cfg) for f in seq.frames])
    rec = window_records(seq.truth_graph, seq.positions, 0, T)
    return TrainingWindow(levels, rec.L[:, 0, 0] + jitter, rec.L, rec.V)


def perturbed_operator(shape, seed=1, scale=0.3):
    """Operator with non-trivial weights everywhere, so every path carries
    gradient."""
    op = LearnedOperator(shape, seed=seed)
    rng = np.random.default_rng(seed + 4)
    op.params = {k: v + rng.normal(0, scale, v.shape) for k, v in op.params.items()}
    return op


def gradient_check(op, win, cfg, h=1e-4):
    """Per-tensor relative error between analytic and central-difference
    gradients of L_tra + L_vis."""
    from cellpoint.tracker.training import window_gradient

    analytic = window_gradient(op, win, cfg).grads

    def total():
        r = window_gradient(op, win, cfg)
        return r.l_tra + r.l_vis

    errors = {}
    for name, p in op.params.items():
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = total()
            p[i] = old - h
            down = total()
            p[i] = old
            fd[i] = (up - down) / (2 * h)
        an = analytic[name]
        scale = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-12)
        errors[name] = float(np.linalg.norm(an - fd) / scale)
    return errors
