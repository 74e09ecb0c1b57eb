"""Iterative layer decomposition baselines.

Additive displays are solved by SART-style projected gradient over the
linear shear-shift operator with a hard [0,1] clamp; multiplicative
displays are reduced to the additive solver in negative-log space with a
floored target.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .lightfield import (ADDITIVE, MULTIPLICATIVE, DisplayGeometry, LayerStack,
                         LightField, adjoint_project, max_shift, reconstruct,
                         shift_sample, view_shifts)


@dataclass
class SolveConfig:
    iterations: int = 100
    omega: float = 1.0  # relaxation in (0, 2]
    init: float | None = None  # default 0.5 additive, 1.0 multiplicative
    epsilon_floor: float = 1e-3
    trace_every: int = 1
    crop_border: bool = True  # exclude the shift-padding border from PSNR

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.omega <= 2:
            raise ValueError("omega must be in (0, 2]")
        if self.epsilon_floor <= 0:
            raise ValueError("epsilon_floor must be positive")


@dataclass
class SolveTrace:
    records: list = field(default_factory=list)  # (iteration, loss, psnr_db, ms)

    def append(self, iteration, loss, psnr_db, ms):
        self.records.append((int(iteration), float(loss), float(psnr_db), float(ms)))


def data_loss(recon_views, target_views):
    return float(np.mean((recon_views - target_views) ** 2))


def psnr_db(recon_views, target_views, border=0):
    if border > 0:
        recon_views = recon_views[..., border:-border, border:-border]
        target_views = target_views[..., border:-border, border:-border]
    mse = float(np.mean((recon_views - target_views) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * math.log10(1.0 / mse))


def _crop(geometry, config, hw):
    border = math.ceil(max_shift(geometry)) if config.crop_border else 0
    return border if 2 * border < min(hw) else 0


def _solve_box(target_views, geometry, config, hi, init, metrics, residual_mask=None):
    """Projected gradient on 0.5*||A g - t||^2 over the box [0, hi]^L.

    Step omega / (L * U * V): bilinear shifts have operator norm <= 1, so
    ||A||^2 <= L*U*V and omega <= 2 keeps the data loss non-increasing.
    ``metrics(layers)`` supplies the (loss, psnr) pair recorded in the trace.
    ``residual_mask`` restricts the fit to a subset of view pixels.
    """
    nl = geometry.num_layers
    h, w = target_views.shape[-2:]
    step = config.omega / (nl * geometry.num_views)
    geom_add = replace(geometry, mode=ADDITIVE)

    layers = np.full((nl, h, w), float(init))
    trace = SolveTrace()
    t0 = time.perf_counter()
    for it in range(config.iterations + 1):
        if it % config.trace_every == 0 or it == config.iterations:
            loss, psnr = metrics(layers)
            trace.append(it, loss, psnr, (time.perf_counter() - t0) * 1e3)
        if it == config.iterations:
            break
        recon = reconstruct(LayerStack(layers), geom_add)
        residual = target_views - recon.views
        if residual_mask is not None:
            residual *= residual_mask
        if not np.all(np.isfinite(residual)):
            raise FloatingPointError("non-finite residual during solve")
        res_lf = LightField(residual)
        for l in range(nl):
            layers[l] += step * adjoint_project(res_lf, geom_add, l)
        np.clip(layers, 0.0, hi, out=layers)
    return layers, trace


def solve_additive(target, geometry, config=None):
    """Decompose a target light field into additive emission layers."""
    if geometry.mode != ADDITIVE:
        raise ValueError("solve_additive requires additive geometry")
    config = config or SolveConfig()
    init = 0.5 if config.init is None else config.init
    border = _crop(geometry, config, target.views.shape[-2:])

    def metrics(layers):
        recon = reconstruct(LayerStack(layers), geometry)
        return (data_loss(recon.views, target.views),
                psnr_db(recon.views, target.views, border))

    layers, trace = _solve_box(target.views, geometry, config, 1.0, init, metrics)
    return LayerStack(layers, mode=ADDITIVE), trace


def solve_multiplicative(target, geometry, config=None):
    """Decompose a target into transmittance layers via the log domain.

    The target is floored at epsilon_floor and mapped to -log; the
    additive solver runs over the box [0, -log(eps)] per layer; layers are
    exponentiated back to transmittances. Trace metrics are reported in
    the original intensity domain.
    """
    if geometry.mode != MULTIPLICATIVE:
        raise ValueError("solve_multiplicative requires multiplicative geometry")
    config = config or SolveConfig()
    eps = config.epsilon_floor
    hi = -math.log(eps)
    log_target = -np.log(np.maximum(target.views, eps))
    init_tau = 1.0 if config.init is None else config.init
    init_log = -math.log(max(init_tau, eps))
    border = _crop(geometry, config, target.views.shape[-2:])

    def metrics(layers):
        recon = reconstruct(LayerStack(np.exp(-layers), mode=MULTIPLICATIVE), geometry)
        return (data_loss(recon.views, target.views),
                psnr_db(recon.views, target.views, border))

    layers, trace = _solve_box(log_target, geometry, config, hi, init_log, metrics,
                               residual_mask=_full_coverage_mask(geometry,
                                                                 target.views.shape[-2:]))
    return LayerStack(np.exp(-layers), mode=MULTIPLICATIVE), trace


def _full_coverage_mask(geometry, hw):
    """View pixels whose rays are fully covered by every layer's extent.

    The log-domain reduction treats off-extent pixels as transparent while
    the intensity-domain product treats them as opaque; rays that leave any
    layer's extent are excluded from the fit (the evaluation crop already
    excludes them from metrics).
    """
    shifts = view_shifts(geometry)
    ones = np.ones(hw)
    mask = np.ones((geometry.views_u, geometry.views_v) + tuple(hw))
    for a in range(geometry.views_u):
        for b in range(geometry.views_v):
            for l in range(geometry.num_layers):
                mask[a, b] *= shift_sample(ones, *shifts[l, a, b]) > 1.0 - 1e-9
    return mask


def export_trace(trace, path):
    """Write a trace as CSV: iter,loss,psnr_db,ms with 6 significant digits."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("iter,loss,psnr_db,ms\n")
        for it, loss, psnr, ms in trace.records:
            f.write(f"{it},{loss:.6g},{psnr:.6g},{ms:.6g}\n")
