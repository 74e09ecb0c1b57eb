"""Display geometry and the differentiable layered-display forward model.

A stack of L display layers at signed depths is observed from a UxV grid
of directions. Each (layer, view) pair contributes the layer image
laterally displaced by depth * view tangent / pixel pitch (shear shift,
bilinear sampling, zero outside the layer extent). Views combine either
additively (emissive panels) or multiplicatively (transmittance panels).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Tensor, make_op

ADDITIVE = "additive"
MULTIPLICATIVE = "multiplicative"


@dataclass(frozen=True)
class DisplayGeometry:
    layer_depths: tuple  # mm, relative to the central plane, strictly increasing
    pixel_pitch: float  # mm
    span_u: float  # full horizontal viewing angle, degrees
    span_v: float  # full vertical viewing angle, degrees
    views_u: int
    views_v: int
    mode: str = ADDITIVE

    def __post_init__(self):
        object.__setattr__(self, "layer_depths", tuple(float(z) for z in self.layer_depths))
        if len(self.layer_depths) < 1:
            raise ValueError("need at least one layer")
        if any(b <= a for a, b in zip(self.layer_depths, self.layer_depths[1:])):
            raise ValueError("layer depths must be strictly increasing")
        if self.pixel_pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        if not (0 <= self.span_u < 180 and 0 <= self.span_v < 180):
            raise ValueError("viewing angle span must be in [0, 180)")
        if self.views_u < 1 or self.views_v < 1:
            raise ValueError("need at least one view per axis")
        if self.mode not in (ADDITIVE, MULTIPLICATIVE):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def num_layers(self):
        return len(self.layer_depths)

    @property
    def num_views(self):
        return self.views_u * self.views_v

    def tangents_u(self):
        return _tangent_grid(self.span_u, self.views_u)

    def tangents_v(self):
        return _tangent_grid(self.span_v, self.views_v)

    def to_dict(self):
        return {
            "layer_depths": list(self.layer_depths),
            "pixel_pitch": self.pixel_pitch,
            "span_u": self.span_u,
            "span_v": self.span_v,
            "views_u": self.views_u,
            "views_v": self.views_v,
            "mode": self.mode,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(layer_depths=tuple(d["layer_depths"]), pixel_pitch=d["pixel_pitch"],
                   span_u=d["span_u"], span_v=d["span_v"], views_u=d["views_u"],
                   views_v=d["views_v"], mode=d.get("mode", ADDITIVE))


def _tangent_grid(span_deg, count):
    """Symmetric tangent samples: tan(span/2) * (2a/(count-1) - 1)."""
    if count == 1:
        return np.zeros(1)
    half = math.tan(math.radians(span_deg) / 2.0)
    a = np.arange(count)
    return half * (2.0 * a / (count - 1) - 1.0)


def view_shifts(geometry):
    """Per-(layer, view) pixel shifts, shape (L, U, V, 2) as (dx, dy)."""
    tu = geometry.tangents_u()
    tv = geometry.tangents_v()
    z = np.asarray(geometry.layer_depths)
    shifts = np.zeros((geometry.num_layers, geometry.views_u, geometry.views_v, 2))
    shifts[..., 0] = z[:, None, None] * tu[None, :, None] / geometry.pixel_pitch
    shifts[..., 1] = z[:, None, None] * tv[None, None, :] / geometry.pixel_pitch
    return shifts


def max_shift(geometry):
    """Largest absolute shift over all (layer, view) pairs, in pixels."""
    return float(np.max(np.abs(view_shifts(geometry))))


@dataclass
class LightField:
    """UxV grid of single-channel HxW view images, indexed views[a, b]."""

    views: np.ndarray  # (U, V, H, W)

    def __post_init__(self):
        self.views = np.asarray(self.views, dtype=np.float64)
        if self.views.ndim != 4:
            raise ValueError(f"views must be 4D (U,V,H,W), got {self.views.shape}")
        if not np.all(np.isfinite(self.views)):
            raise ValueError("light field contains non-finite values")

    @classmethod
    def target(cls, views):
        """Build a target light field, clamped to [0,1] at creation."""
        return cls(np.clip(np.asarray(views, dtype=np.float64), 0.0, 1.0))

    @property
    def shape(self):
        return self.views.shape


@dataclass
class LayerStack:
    """L display-layer images HxW plus the modulation mode."""

    layers: np.ndarray  # (L, H, W)
    mode: str = ADDITIVE

    def __post_init__(self):
        self.layers = np.asarray(self.layers, dtype=np.float64)
        if self.layers.ndim != 3:
            raise ValueError(f"layers must be 3D (L,H,W), got {self.layers.shape}")
        if not np.all(np.isfinite(self.layers)):
            raise ValueError("layer stack contains non-finite values")


# ---------------------------------------------------------------------------
# bilinear shift sampling


def _shift_taps(dx, dy):
    """Integer offsets and bilinear weights for a fractional (dx, dy) shift."""
    fx, fy = math.floor(dx), math.floor(dy)
    ax, ay = dx - fx, dy - fy
    taps = []
    for oy, wy in ((fy, 1.0 - ay), (fy + 1, ay)):
        for ox, wx in ((fx, 1.0 - ax), (fx + 1, ax)):
            w = wy * wx
            if w != 0.0:
                taps.append((ox, oy, w))
    return taps


def _shift_int(image, ox, oy):
    """out[..., y, x] = image[..., y+oy, x+ox], zero outside the extent."""
    h, w = image.shape[-2:]
    out = np.zeros_like(image)
    ys0, ys1 = max(0, -oy), min(h, h - oy)
    xs0, xs1 = max(0, -ox), min(w, w - ox)
    if ys0 < ys1 and xs0 < xs1:
        out[..., ys0:ys1, xs0:xs1] = image[..., ys0 + oy:ys1 + oy, xs0 + ox:xs1 + ox]
    return out


def shift_sample(image, dx, dy):
    """Bilinear resample at (x+dx, y+dy), zero outside; linear in the input.

    Works on any array whose last two axes are (H, W).
    """
    out = None
    for ox, oy, wgt in _shift_taps(dx, dy):
        term = wgt * _shift_int(image, ox, oy)
        out = term if out is None else out + term
    return out


def shift_adjoint(image, dx, dy):
    """Transpose of shift_sample; equals shifting by the negated offsets."""
    return shift_sample(image, -dx, -dy)


# ---------------------------------------------------------------------------
# forward model


def reconstruct(stack, geometry):
    """Simulate the reconstructed light field of a layer stack (numpy path)."""
    if stack.layers.shape[0] != geometry.num_layers:
        raise ValueError(f"stack has {stack.layers.shape[0]} layers, "
                         f"geometry expects {geometry.num_layers}")
    shifts = view_shifts(geometry)
    h, w = stack.layers.shape[-2:]
    views = np.empty((geometry.views_u, geometry.views_v, h, w))
    for a in range(geometry.views_u):
        for b in range(geometry.views_v):
            shifted = [shift_sample(stack.layers[l], *shifts[l, a, b])
                       for l in range(geometry.num_layers)]
            if geometry.mode == ADDITIVE:
                views[a, b] = np.sum(shifted, axis=0)
            else:
                views[a, b] = np.prod(shifted, axis=0)
    return LightField(views)


def adjoint_project(residual, geometry, layer_index):
    """Backproject a view-space residual onto one layer (additive adjoint)."""
    if not 0 <= layer_index < geometry.num_layers:
        raise IndexError(f"layer index {layer_index} out of range")
    shifts = view_shifts(geometry)
    acc = np.zeros(residual.views.shape[-2:])
    for a in range(geometry.views_u):
        for b in range(geometry.views_v):
            acc += shift_adjoint(residual.views[a, b], *shifts[layer_index, a, b])
    return acc


def reconstruct_tensor(layers, geometry):
    """Differentiable reconstruction for a batch of layer stacks.

    layers is a Tensor (n, L, h, w); returns a Tensor (n, U*V, h, w) with
    views in row-major (a, b) order, registered on the autodiff tape.
    """
    n, nl, h, w = layers.shape
    if nl != geometry.num_layers:
        raise ValueError(f"got {nl} layer channels, geometry expects {geometry.num_layers}")
    shifts = view_shifts(geometry)
    uv = geometry.num_views
    dtype = layers.data.dtype

    # shifted[v][l]: layer l displaced for view v, shape (n, h, w)
    shifted = []
    for a in range(geometry.views_u):
        for b in range(geometry.views_v):
            shifted.append([shift_sample(layers.data[:, l], *shifts[l, a, b])
                            for l in range(nl)])

    out = np.empty((n, uv, h, w), dtype=dtype)
    if geometry.mode == ADDITIVE:
        for v in range(uv):
            out[:, v] = np.sum(shifted[v], axis=0)

        def bwd(g, _out):
            grad = np.zeros_like(layers.data)
            v = 0
            for a in range(geometry.views_u):
                for b in range(geometry.views_v):
                    for l in range(nl):
                        grad[:, l] += shift_adjoint(g[:, v], *shifts[l, a, b])
                    v += 1
            return (grad,)
    else:
        for v in range(uv):
            out[:, v] = np.prod(shifted[v], axis=0)

        def bwd(g, _out):
            grad = np.zeros_like(layers.data)
            v = 0
            for a in range(geometry.views_u):
                for b in range(geometry.views_v):
                    for l in range(nl):
                        others = np.ones((n, h, w), dtype=dtype)
                        for m in range(nl):
                            if m != l:
                                others *= shifted[v][m]
                        grad[:, l] += shift_adjoint(g[:, v] * others, *shifts[l, a, b])
                    v += 1
            return (grad,)

    return make_op(out, (layers,), bwd, "reconstruct")
