"""Forward evaluation, JVPs, and VJPs for layered networks.

Forward-mode derivatives propagate a (value, tangent) pair through each
layer, so a JVP costs one extra forward pass and never materializes the
C-by-P Jacobian. Reverse mode records layer inputs on the way forward and
accumulates parameter cotangents on the way back. All arithmetic is
float64 and the functions are pure: identical arguments give identical
bits.

The ReLU derivative at exactly 0 is defined as 0.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .network import (
    Conv2d,
    Dense,
    Flatten,
    NetworkSpec,
    ParamVector,
    Relu,
    ShapeError,
    Tanh,
    layer_name,
)


def _theta_values(spec: NetworkSpec, theta) -> np.ndarray:
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (spec.param_count,):
        raise ShapeError(
            f"parameter vector has shape {values.shape}, spec needs ({spec.param_count},)"
        )
    return values


def _vector_values(name: str, vec, size: int) -> np.ndarray:
    values = vec.values if hasattr(vec, "values") else np.asarray(vec)
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (size,):
        raise ShapeError(f"{name} has shape {values.shape}, expected ({size},)")
    return values


def _batch_inputs(spec: NetworkSpec, xs) -> np.ndarray:
    xs = np.asarray(xs, dtype=np.float64)
    if xs.shape[1:] != spec.input_shape:
        raise ShapeError(
            f"{layer_name(0, spec.layers[0])}: input shape {xs.shape[1:]} "
            f"does not match spec input shape {spec.input_shape}"
        )
    return xs


def _require_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")


def _layer_params(spec: NetworkSpec, th: np.ndarray):
    """Yield (layer, weight, bias, weight_offset, bias_offset) in layer order."""
    off = 0
    for layer in spec.layers:
        if isinstance(layer, Dense):
            w_off = off
            w = th[off : off + layer.out_dim * layer.in_dim].reshape(layer.out_dim, layer.in_dim)
            off += layer.out_dim * layer.in_dim
            if layer.bias:
                b_off = off
                b = th[off : off + layer.out_dim]
                off += layer.out_dim
            else:
                b_off, b = None, None
            yield layer, w, b, w_off, b_off
        elif isinstance(layer, Conv2d):
            n = layer.out_channels * layer.in_channels * layer.kernel * layer.kernel
            w_off = off
            w = th[off : off + n].reshape(
                layer.out_channels, layer.in_channels, layer.kernel, layer.kernel
            )
            off += n
            b_off = off
            b = th[off : off + layer.out_channels]
            off += layer.out_channels
            yield layer, w, b, w_off, b_off
        else:
            yield layer, None, None, None, None


def _conv_patches(x: np.ndarray, kernel: int) -> tuple[np.ndarray, int, int]:
    """im2col: (B, Cin, H, W) -> (B, Ho*Wo, Cin*k*k), plus the output grid size."""
    b = x.shape[0]
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))  # (B, Cin, Ho, Wo, k, k)
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho * wo, -1), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, b) -> tuple[np.ndarray, np.ndarray, int, int]:
    cout, _, k, _ = w.shape
    patches, ho, wo = _conv_patches(x, k)
    out = patches @ w.reshape(cout, -1).T
    if b is not None:
        out = out + b
    out = out.transpose(0, 2, 1).reshape(x.shape[0], cout, ho, wo)
    return out, patches, ho, wo


def _conv_input_grad(gm: np.ndarray, w: np.ndarray, x_shape, ho: int, wo: int) -> np.ndarray:
    """Adjoint of im2col: scatter patch cotangents back onto the input."""
    cout, cin, k, _ = w.shape
    gp = (gm @ w.reshape(cout, -1)).reshape(gm.shape[0], ho, wo, cin, k, k)
    gx = np.zeros(x_shape)
    for p in range(k):
        for q in range(k):
            gx[:, :, p : p + ho, q : q + wo] += gp[:, :, :, :, p, q].transpose(0, 3, 1, 2)
    return gx


def forward_batch(spec: NetworkSpec, theta, xs) -> np.ndarray:
    """Logits for a batch of inputs, shape (B, C)."""
    th = _theta_values(spec, theta)
    h = _batch_inputs(spec, xs)
    for layer, w, b, _, _ in _layer_params(spec, th):
        if isinstance(layer, Dense):
            h = h @ w.T
            if b is not None:
                h = h + b
        elif isinstance(layer, Conv2d):
            h, _, _, _ = _conv_forward(h, w, b)
        elif isinstance(layer, Relu):
            h = np.maximum(h, 0.0)
        elif isinstance(layer, Tanh):
            h = np.tanh(h)
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
    return h


def forward(spec: NetworkSpec, theta, x) -> np.ndarray:
    """Logits for a single input, shape (C,)."""
    return forward_batch(spec, theta, np.asarray(x, dtype=np.float64)[None])[0]


def jvp_batch(spec: NetworkSpec, theta, xs, v) -> np.ndarray:
    """Jacobian-vector products J(x_i) @ v for a batch, shape (B, C).

    Carries the tangent alongside the value through every layer; cost is a
    constant multiple of one forward pass and memory stays O(P + activations).
    """
    th = _theta_values(spec, theta)
    tv = _vector_values("tangent", v, spec.param_count)
    h = _batch_inputs(spec, xs)
    _require_finite("theta", th)
    _require_finite("input", h)
    _require_finite("tangent", tv)
    dh = np.zeros_like(h)
    for layer, w, b, w_off, b_off in _layer_params(spec, th):
        if isinstance(layer, Dense):
            dw = tv[w_off : w_off + w.size].reshape(w.shape)
            dh = dh @ w.T + h @ dw.T
            if b is not None:
                dh = dh + tv[b_off : b_off + b.size]
            h = h @ w.T + (b if b is not None else 0.0)
        elif isinstance(layer, Conv2d):
            dw = tv[w_off : w_off + w.size].reshape(w.shape)
            db = tv[b_off : b_off + b.size]
            dh, _, _, _ = _conv_forward(dh, w, None)
            dh_w, _, _, _ = _conv_forward(h, dw, db)
            dh = dh + dh_w
            h, _, _, _ = _conv_forward(h, w, b)
        elif isinstance(layer, Relu):
            dh = np.where(h > 0.0, dh, 0.0)
            h = np.maximum(h, 0.0)
        elif isinstance(layer, Tanh):
            h = np.tanh(h)
            dh = (1.0 - h * h) * dh
        elif isinstance(layer, Flatten):
            h = h.reshape(h.shape[0], -1)
            dh = dh.reshape(dh.shape[0], -1)
    return dh


def jvp(spec: NetworkSpec, theta, x, v) -> np.ndarray:
    """J(x) @ v for a single input, shape (C,)."""
    return jvp_batch(spec, theta, np.asarray(x, dtype=np.float64)[None], v)[0]


def vjp_batch(spec: NetworkSpec, theta, xs, us) -> np.ndarray:
    """Sum over the batch of u_i^T J(x_i), as a flat (P,) gradient."""
    th = _theta_values(spec, theta)
    h = _batch_inputs(spec, xs)
    us = np.asarray(us, dtype=np.float64)
    if us.shape != (h.shape[0], spec.output_dim):
        raise ShapeError(f"cotangent has shape {us.shape}, expected {(h.shape[0], spec.output_dim)}")
    _require_finite("theta", th)
    _require_finite("input", h)
    _require_finite("cotangent", us)

    records = []
    for layer, w, b, w_off, b_off in _layer_params(spec, th):
        if isinstance(layer, Dense):
            records.append((layer, h, w, w_off, b_off))
            h = h @ w.T
            if b is not None:
                h = h + b
        elif isinstance(layer, Conv2d):
            out, patches, ho, wo = _conv_forward(h, w, b)
            records.append((layer, (h.shape, patches, ho, wo), w, w_off, b_off))
            h = out
        elif isinstance(layer, Relu):
            records.append((layer, h, None, None, None))
            h = np.maximum(h, 0.0)
        elif isinstance(layer, Tanh):
            h = np.tanh(h)
            records.append((layer, h, None, None, None))
        elif isinstance(layer, Flatten):
            records.append((layer, h.shape, None, None, None))
            h = h.reshape(h.shape[0], -1)

    grad = np.zeros(spec.param_count)
    g = us
    for layer, saved, w, w_off, b_off in reversed(records):
        if isinstance(layer, Dense):
            grad[w_off : w_off + w.size] += (g.T @ saved).ravel()
            if b_off is not None:
                grad[b_off : b_off + layer.out_dim] += g.sum(axis=0)
            g = g @ w
        elif isinstance(layer, Conv2d):
            x_shape, patches, ho, wo = saved
            cout = layer.out_channels
            gm = g.reshape(g.shape[0], cout, ho * wo).transpose(0, 2, 1)  # (B, HoWo, Cout)
            grad[w_off : w_off + w.size] += np.einsum("bpc,bpf->cf", gm, patches).ravel()
            grad[b_off : b_off + cout] += g.sum(axis=(0, 2, 3))
            g = _conv_input_grad(gm, w, x_shape, ho, wo)
        elif isinstance(layer, Relu):
            g = np.where(saved > 0.0, g, 0.0)
        elif isinstance(layer, Tanh):
            g = (1.0 - saved * saved) * g
        elif isinstance(layer, Flatten):
            g = g.reshape(saved)
    return grad


def vjp(spec: NetworkSpec, theta, x, u) -> np.ndarray:
    """u^T J(x) for a single input, as a flat (P,) vector."""
    u = _vector_values("cotangent", u, spec.output_dim)
    return vjp_batch(spec, theta, np.asarray(x, dtype=np.float64)[None], u[None])


def finite_diff_jacobian(spec: NetworkSpec, theta, x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian, column by column. Test oracle only."""
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    th = _theta_values(spec, theta).copy()
    x = np.asarray(x, dtype=np.float64)
    jac = np.empty((spec.output_dim, th.size))
    for p in range(th.size):
        orig = th[p]
        th[p] = orig + eps
        f_plus = forward(spec, th, x)
        th[p] = orig - eps
        f_minus = forward(spec, th, x)
        th[p] = orig
        jac[:, p] = (f_plus - f_minus) / (2.0 * eps)
    return jac
