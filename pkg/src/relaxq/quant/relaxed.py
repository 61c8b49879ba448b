"""Relaxed quantization: categorical distributions over a grid and their
concrete / straight-through relaxations, plus stochastic and hard rounding.

All elementwise quantizers work on a flattened view of the input.  Every
element gets a window of grid indices of the same width (the width only
depends on the shared sigma); slots of the window that fall off either end
of the grid are masked out.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..autodiff import (
    RngStream,
    Tensor,
    as_tensor,
    clamp_min,
    grad_enabled,
    gumbel_from_uniform,
    log,
    make_op,
    mul,
    reshape,
    softmax,
    straight_through,
    tsum,
)
from .grid import Mode, QuantGrid, QuantizerState

DENOM_FLOOR = 1e-30
_MASKED_LOGIT = -1e30
_SNAP_TOL = 1e-9


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def grid_points(grid: QuantGrid) -> Tensor:
    return grid.alpha() * grid.base + grid.beta


def interval_edges(grid: QuantGrid) -> Tensor:
    """K + 1 edges: each grid point minus alpha/2, then the last plus alpha/2."""
    half = np.append(grid.base - 0.5, grid.base[-1] + 0.5)
    return grid.alpha() * half + grid.beta


def nearest_index(x: np.ndarray, grid: QuantGrid) -> np.ndarray:
    """Index (0..K-1) of the grid point nearest to each x, clamped to the grid."""
    k = round_half_away((np.asarray(x, dtype=np.float64) - grid.beta_value) / grid.alpha_value) - grid.lo
    return np.clip(k, 0, grid.K - 1).astype(np.int64)


def window_offsets(grid: QuantGrid, sigma: float, delta: float, min_neighbors: int = 0) -> np.ndarray:
    """Offsets j (relative to the nearest index) with j*alpha in (-delta*sigma, delta*sigma].

    ``min_neighbors`` widens the range to at least -m..m: with a single-point
    window the categorical is degenerate and no gradient reaches x or sigma.
    """
    r = delta * sigma / grid.alpha_value
    # exp(log(.)) round trips can land a hair below an integer ratio
    if abs(r - round(r)) <= _SNAP_TOL * max(1.0, abs(r)):
        r = float(round(r))
    hi = min(max(int(np.floor(r)), min_neighbors), grid.K - 1)
    lo = max(min(int(np.floor(-r)) + 1, -min_neighbors), -(grid.K - 1))
    return np.arange(lo, hi + 1)


def local_window(x: float, state: QuantizerState) -> tuple[int, int]:
    """Inclusive index range of the local grid around scalar ``x``."""
    if np.isnan(x):
        raise ValueError("local_window: x is NaN")
    grid = state.grid
    if state.relax.delta is None:
        return 0, grid.K - 1
    c = int(nearest_index(x, grid))
    off = window_offsets(grid, state.noise.sigma_value, state.relax.delta, state.relax.min_neighbors)
    return max(c + int(off[0]), 0), min(c + int(off[-1]), grid.K - 1)


@dataclass
class Window:
    first: np.ndarray        # (N,) grid index of slot 0, may be negative
    width: int
    valid: np.ndarray | None  # (N, W) mask, None when every slot is on the grid

    def indices(self, K: int) -> np.ndarray:
        return np.clip(self.first[:, None] + np.arange(self.width), 0, K - 1)

    def n_valid(self) -> np.ndarray | int:
        return self.width if self.valid is None else self.valid.sum(axis=1, keepdims=True)


def make_window(x: np.ndarray, state: QuantizerState, full: bool = False) -> Window:
    grid = state.grid
    n = x.size
    if full or state.relax.delta is None:
        return Window(np.zeros(n, dtype=np.int64), grid.K, None)
    off = window_offsets(grid, state.noise.sigma_value, state.relax.delta, state.relax.min_neighbors)
    first = nearest_index(x.reshape(-1), grid) + off[0]
    idx = first[:, None] + np.arange(len(off))
    valid = (idx >= 0) & (idx < grid.K)
    return Window(first, len(off), None if valid.all() else valid)


def _logistic_mass(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """F(t[k+1]) - F(t[k]) for the standard logistic F, accurate in both tails."""
    s = expit(t)
    sn = expit(-t)
    # differences of the survival function keep precision in the upper tail
    mass = np.where(t[..., :-1] >= 0, sn[..., :-1] - sn[..., 1:], s[..., 1:] - s[..., :-1])
    return mass, s * sn


def interval_mass(t: Tensor, cdf: str = "logistic") -> Tensor:
    """Probability mass between consecutive standardized edges along the last axis."""
    t = as_tensor(t)
    td = t.data
    if cdf == "logistic":
        mass, density = _logistic_mass(td)
    elif cdf == "uniform":
        # U(-1/2, 1/2) in standardized units
        cdf_vals = np.clip(td + 0.5, 0.0, 1.0)
        mass = cdf_vals[..., 1:] - cdf_vals[..., :-1]
        density = ((td > -0.5) & (td < 0.5)).astype(td.dtype)
    else:
        raise ValueError(f"interval_mass: unknown cdf {cdf!r}")

    def backward(g):
        gt = np.zeros_like(td)
        gt[..., 1:] += g * density[..., 1:]
        gt[..., :-1] -= g * density[..., :-1]
        return (gt,)

    return make_op(mass, (t,), backward)


@dataclass
class CategoricalOverGrid:
    window: tuple[int, int]
    probs: Tensor

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.window[0], self.window[1] + 1)


def window_probs(x: Tensor, state: QuantizerState, cdf: str = "logistic", full: bool = False):
    """Fuzz-normalized categorical over each element's window.

    Returns ``(probs, window)`` with ``probs`` shaped (N, W).  The noise
    distribution is truncated to the outer cell edges of the window, so the
    full-grid case reduces to the truncated CDF over
    (g_0 - alpha/2, g_{K-1} + alpha/2].
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise ValueError("categorical_probs: input contains NaN")
    grid = state.grid
    win = make_window(x.data, state, full=full)
    n = x.size
    # edge positions in index space, clamped so off-grid slots get zero width
    e = win.first[:, None] + np.arange(win.width + 1) - 0.5
    e = np.clip(e, -0.5, grid.K - 0.5) + grid.lo
    edges = grid.alpha() * e + grid.beta
    scale = state.noise.sigma() if cdf == "logistic" else grid.alpha()
    t = (edges - reshape(x, (n, 1))) / scale
    mass = interval_mass(t, cdf)
    eps = state.relax.fuzz
    if win.valid is None:
        num = mass + eps
    else:
        num = mass + eps * win.valid
    denom = clamp_min(tsum(mass, axis=1, keepdims=True), DENOM_FLOOR) + eps * win.n_valid()
    return num / denom, win


def categorical_probs(x: float, state: QuantizerState, cdf: str = "logistic") -> CategoricalOverGrid:
    """Categorical over the local window (or the whole grid) for scalar ``x``.

    ``cdf="uniform"`` swaps the logistic noise for U(x - alpha/2, x + alpha/2),
    the noise model under which this reduces to stochastic rounding.
    """
    x = as_tensor(x)
    if x.size != 1:
        raise ValueError(f"categorical_probs: expected a scalar, got shape {x.shape}")
    probs, win = window_probs(x, state, cdf=cdf)
    K = state.grid.K
    lo = max(int(win.first[0]), 0)
    hi = min(int(win.first[0]) + win.width - 1, K - 1)
    start = lo - int(win.first[0])
    return CategoricalOverGrid((lo, hi), probs[0, start:start + hi - lo + 1])


def _masked_log(probs: Tensor, win: Window) -> Tensor:
    if win.valid is None:
        return log(probs)
    invalid = ~win.valid
    return log(probs + invalid) + _MASKED_LOGIT * invalid


def draw_gumbel(rng: RngStream, shape) -> np.ndarray:
    return gumbel_from_uniform(rng.uniform(shape))


def concrete_sample(log_probs: Tensor, temperature: float, rng: RngStream | None = None,
                    u: np.ndarray | None = None) -> Tensor:
    """Gumbel-softmax sample over the last axis; pass ``u`` to freeze the noise."""
    if not temperature > 0:
        raise ValueError(f"concrete_sample: temperature must be positive, got {temperature}")
    log_probs = as_tensor(log_probs)
    if u is None:
        u = draw_gumbel(rng, log_probs.shape)
    return softmax((log_probs + u) / temperature, axis=-1)


def _window_values(grid: QuantGrid, win: Window) -> Tensor:
    if win.valid is None and win.width == grid.K and not win.first.any():
        return grid_points(grid)
    return grid.alpha() * (win.indices(grid.K) + grid.lo) + grid.beta


def _relaxed_graph(x: Tensor, state: QuantizerState, rng, u, straight: bool) -> Tensor:
    """Relaxed quantizer composed from tape primitives.

    Slow but easy to audit; ``_relaxed`` computes the same function in one
    fused primitive and is checked against this one.
    """
    x = as_tensor(x)
    probs, win = window_probs(x, state)
    log_pi = _masked_log(probs, win)
    if u is None:
        u = draw_gumbel(rng, log_pi.shape)
    values = _window_values(state.grid, win)
    if straight:
        pick = np.argmax(log_pi.data + u, axis=1)
        vd = np.broadcast_to(values.data, log_pi.shape)
        hard = vd[np.arange(len(pick)), pick].reshape(x.shape)
        if not grad_enabled() or not log_pi.requires_grad:
            return Tensor(hard)
    z = softmax((log_pi + u) / state.relax.temperature, axis=-1)
    soft = reshape(tsum(mul(z, values), axis=1), x.shape)
    return straight_through(hard, soft) if straight else soft


def _relaxed(x: Tensor, state: QuantizerState, rng, u, straight: bool) -> Tensor:
    """Fused concrete / straight-through quantizer.

    Arrays are laid out (W, N) so every reduction over the window runs
    across contiguous rows.  Parents: x, log_alpha, log_sigma, beta.
    """
    x = as_tensor(x)
    xd = x.data.reshape(-1)
    if np.isnan(xd).any():
        raise ValueError("categorical_probs: input contains NaN")
    grid, relax = state.grid, state.relax
    win = make_window(xd, state)
    K, W, n = grid.K, win.width, xd.size
    a, b, sig = grid.alpha_value, grid.beta_value, state.noise.sigma_value

    slots = np.arange(W + 1)[:, None]
    e = np.clip(win.first + slots - 0.5, -0.5, K - 0.5) + grid.lo
    t = ((a * e + b) - xd) / sig
    s, sn = expit(t), expit(-t)
    mass = np.where(t[:-1] >= 0, sn[:-1] - sn[1:], s[1:] - s[:-1])
    total = mass.sum(axis=0)
    valid = None if win.valid is None else win.valid.T
    eps = relax.fuzz
    if valid is None:
        denom = np.maximum(total, DENOM_FLOOR) + eps * W
        pi = (mass + eps) / denom
        with np.errstate(divide="ignore"):
            log_pi = np.log(pi)
    else:
        denom = np.maximum(total, DENOM_FLOOR) + eps * valid.sum(axis=0)
        pi = (mass + eps * valid) / denom
        with np.errstate(divide="ignore"):
            log_pi = np.where(valid, np.log(pi + ~valid), _MASKED_LOGIT)

    if u is None:
        u = draw_gumbel(rng, (W, n))
    else:
        u = np.asarray(u, dtype=np.float64).reshape(n, W).T
    idx = np.clip(win.first + slots[:-1], 0, K - 1) + grid.lo
    values = a * idx + b
    noisy = log_pi + u
    dtype = x.data.dtype
    params = (x, grid.log_alpha, state.noise.log_sigma, grid.beta)
    needs_grad = grad_enabled() and any(p.requires_grad for p in params)
    if straight:
        pick = np.argmax(noisy, axis=0)
        hard = values[pick, np.arange(n)]
        if not needs_grad:
            return Tensor(hard.reshape(x.shape).astype(dtype, copy=False))

    y = noisy / relax.temperature
    y -= y.max(axis=0)
    z = np.exp(y)
    z /= z.sum(axis=0)
    soft = (z * values).sum(axis=0)
    out = hard if straight else soft

    def backward(g):
        g = np.asarray(g, dtype=np.float64).reshape(-1)
        zg = z * g
        d_logit = zg * (values - soft) / relax.temperature
        if valid is not None:
            d_logit = d_logit * valid
        with np.errstate(divide="ignore", invalid="ignore"):
            d_pi = np.where(pi > 0, d_logit / pi, 0.0)
        d_denom = -(d_pi * pi).sum(axis=0) / denom
        d_mass = d_pi / denom + d_denom * (total > DENOM_FLOOR)
        dt = np.zeros_like(t)
        dt[1:] += d_mass
        dt[:-1] -= d_mass
        dt *= s * sn
        gx = -dt.sum(axis=0) / sig
        g_log_sigma = -(dt * t).sum()
        g_log_alpha = a * ((dt * e).sum() / sig + (zg * idx).sum())
        g_beta = dt.sum() / sig + g.sum()
        return gx.reshape(x.shape), g_log_alpha, g_log_sigma, g_beta

    return make_op(out.reshape(x.shape).astype(dtype, copy=False), params, backward)


def soft_quantize(x: Tensor, state: QuantizerState, rng: RngStream | None = None,
                  u: np.ndarray | None = None) -> Tensor:
    """Concrete relaxation: sum_i z_i g_i over each element's window."""
    return _relaxed(x, state, rng, u, straight=False)


def st_quantize(x: Tensor, state: QuantizerState, rng: RngStream | None = None,
                u: np.ndarray | None = None) -> Tensor:
    """Gumbel-max categorical sample forward, concrete gradient backward.

    The same Gumbel draws ``u`` pick the forward grid point and drive the
    softmax used for the gradient.
    """
    return _relaxed(x, state, rng, u, straight=True)


def stochastic_round_probs(x: np.ndarray, grid: QuantGrid) -> tuple[np.ndarray, np.ndarray]:
    """Lower neighbour (in units of G) and the probability of rounding down."""
    xs = (np.asarray(x, dtype=np.float64) - grid.beta_value) / grid.alpha_value
    lower = np.floor(xs)
    return lower, 1.0 - (xs - lower)


def stochastic_round(x: Tensor, grid: QuantGrid, rng: RngStream) -> Tensor:
    """Round down with probability ceil(x') - x', up otherwise; clamp to the grid.

    Backward is straight-through for x inside the grid range; alpha gets
    the gradient of alpha * (n - x') inside the range and alpha * n outside.
    """
    x = as_tensor(x)
    alpha, beta = grid.alpha(), grid.beta
    lower, p_down = stochastic_round_probs(x.data, grid)
    up = rng.uniform(x.shape) >= p_down
    xs = (x.data - grid.beta_value) / grid.alpha_value
    n = np.clip(lower + up, grid.lo, grid.lo + grid.K - 1)
    inside = (xs >= grid.lo) & (xs <= grid.lo + grid.K - 1)
    a = grid.alpha_value
    out = a * n + grid.beta_value

    def backward(g):
        gx = g * inside
        ga = np.sum(g * np.where(inside, n - xs, n)) * a
        gb = np.sum(g * ~inside)
        return gx, ga, gb

    return make_op(out, (x, grid.log_alpha, beta), backward)


def hard_quantize(x, grid: QuantGrid) -> Tensor:
    """Deterministic nearest-point rounding clamped to [g_0, g_{K-1}].

    Test-time only: the result carries no gradient.
    """
    xd = as_tensor(x).data
    a, b = grid.alpha_value, grid.beta_value
    y = a * round_half_away((xd - b) / a) + b
    g0 = a * grid.lo + b
    gk = a * (grid.lo + grid.K - 1) + b
    return Tensor(np.minimum(gk, np.maximum(g0, y)))


def quantize(x: Tensor, state: QuantizerState, rng: RngStream | None = None) -> Tensor:
    mode = state.mode
    if mode is Mode.IDENTITY:
        return as_tensor(x)
    if mode is Mode.RQ:
        return soft_quantize(x, state, rng)
    if mode is Mode.RQ_ST:
        return st_quantize(x, state, rng)
    if mode is Mode.SR:
        return stochastic_round(x, state.grid, rng)
    if mode is Mode.HARD:
        return hard_quantize(x, state.grid)
    raise ValueError(f"quantize: unknown mode {mode!r}")
