"""Backpropagation through time for the three cells, and a finite-difference oracle.

The reverse pass is derived by hand per cell. ``backward_sequence`` consumes
the caches of ``forward_sequence`` and a seed gradient on the final latent
features; ``finite_diff_grad`` recomputes the same quantities by central
differences and shares nothing with the analytic path except the forward
pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .cells import CellOptions, forward_sequence, init_params

DEFAULT_EPSILON = 1e-5
REL_ERROR_FLOOR = 1e-8


@dataclass
class Gradients:
    """Parameter gradients plus gradients w.r.t. the inputs.

    ``frames`` matches the frame array; ``static_steps`` holds the per-step
    contributions to the static frame gradient and ``static`` their sum.
    """

    params: dict
    frames: np.ndarray
    static: Optional[np.ndarray] = None
    static_steps: Optional[np.ndarray] = None

    def __getitem__(self, name):
        return self.params[name]


def _outer(d, v):
    return np.outer(d, v) if d.ndim == 1 else d.T @ v


def _peep_grad(W, d, c):
    if W.ndim == 1:
        return d * c if d.ndim == 1 else (d * c).sum(axis=0)
    return _outer(d, c)


def _peep_back(W, d):
    return d * W if W.ndim == 1 else d @ W


def _bias_grad(d):
    return d if d.ndim == 1 else d.sum(axis=0)


def backward_sequence(params, caches, d_h, d_h_hat=None, d_h_steps=None):
    """Exact gradients of a scalar loss whose derivative w.r.t. the final h is ``d_h``.

    ``d_h_hat`` seeds the final static-path latent features (mode variational
    cells only). ``d_h_steps``, shaped like the stacked h of every step, adds
    per-step seeds, which is how pooled readouts feed their gradient back.
    """
    if not caches:
        raise ValueError("no caches to differentiate")
    variant = params.variant
    mode_var = variant != "lstm"
    if mode_var != (caches[0].x_hat is not None):
        raise ValueError(f"caches do not come from a {variant!r} forward pass")
    if caches[0].h.shape[-1] != params.hidden_dim or caches[0].x.shape[-1] != params.input_dim:
        raise ValueError("cache dimensions do not match the parameter set")
    d_h = np.asarray(d_h, dtype=np.float64)
    if d_h.shape != caches[-1].h.shape:
        raise ValueError(f"seed shape {d_h.shape} does not match latent shape {caches[-1].h.shape}")
    opts = params.options
    cross = variant == "modevar_crosscell"
    P = params.arrays
    grads = {k: np.zeros_like(v) for k, v in P.items()}

    T = len(caches)
    dx = np.zeros((T,) + caches[0].x.shape)
    dxh = np.zeros((T,) + caches[0].x_hat.shape) if mode_var else None

    dh_next = d_h.copy()
    dc_next = np.zeros_like(d_h)
    if mode_var:
        dhh_next = np.zeros_like(d_h) if d_h_hat is None else np.asarray(d_h_hat, dtype=np.float64).copy()
        dch_next = np.zeros_like(d_h)

    for t in reversed(range(T)):
        k = caches[t]
        dh = dh_next if d_h_steps is None else dh_next + d_h_steps[t]
        do = dh * k.tanh_c
        dc = dc_next + dh * k.o * (1.0 - k.tanh_c ** 2)
        if mode_var:
            dhh = dhh_next
            do = do + dhh * k.tanh_c_hat
            dch = dch_next + dhh * k.o * (1.0 - k.tanh_c_hat ** 2)

        # shared output gate
        da_o = do * k.o * (1.0 - k.o)
        grads["W_xo"] += _outer(da_o, k.x)
        grads["W_ho"] += _outer(da_o, k.h_prev)
        grads["W_co"] += _peep_grad(P["W_co"], da_o, k.c)
        grads["b_o"] += _bias_grad(da_o)
        dc = dc + _peep_back(P["W_co"], da_o)
        dx_t = da_o @ P["W_xo"]
        dh_prev = da_o @ P["W_ho"]
        if mode_var:
            grads["W_chat_o"] += _peep_grad(P["W_chat_o"], da_o, k.c_hat)
            grads["W_hhat_o"] += _outer(da_o, k.h_hat_prev)
            dch = dch + _peep_back(P["W_chat_o"], da_o)
            dhh_prev = da_o @ P["W_hhat_o"]

        # cell updates
        df = dc * k.c_prev
        di = dc * k.g
        dg = dc * k.i
        dc_prev = dc * k.f
        if mode_var:
            if opts.literal_eq2:
                df = df + dch * k.c_hat_prev
                di = di + dch * k.g_hat
                dch_prev = dch * k.f
                dgh = dch * k.i
                dih = np.zeros_like(dch)
                dfh = np.zeros_like(dch)
            else:
                dfh = dch * k.c_hat_prev
                dih = dch * k.g_hat
                dch_prev = dch * k.f_hat
                dgh = dch * k.i_hat

        # dynamics candidate
        da_g = dg * (1.0 - k.g ** 2)
        grads["W_xc"] += _outer(da_g, k.x)
        grads["W_hc"] += _outer(da_g, k.h_prev)
        grads["b_c"] += _bias_grad(da_g)
        dx_t = dx_t + da_g @ P["W_xc"]
        dh_prev = dh_prev + da_g @ P["W_hc"]

        # dynamics input and forget gates
        for gate, dgate, act in (("i", di, k.i), ("f", df, k.f)):
            da = dgate * act * (1.0 - act)
            grads["W_x" + gate] += _outer(da, k.x)
            grads["W_h" + gate] += _outer(da, k.h_prev)
            grads["W_c" + gate] += _peep_grad(P["W_c" + gate], da, k.c_prev)
            grads["b_" + gate] += _bias_grad(da)
            dx_t = dx_t + da @ P["W_x" + gate]
            dh_prev = dh_prev + da @ P["W_h" + gate]
            dc_prev = dc_prev + _peep_back(P["W_c" + gate], da)
            if cross:
                name = "W_chat_" + gate
                grads[name] += _peep_grad(P[name], da, k.c_hat_prev)
                dch_prev = dch_prev + _peep_back(P[name], da)

        if mode_var:
            da_gh = dgh * (1.0 - k.g_hat ** 2)
            grads["W_xhat_chat"] += _outer(da_gh, k.x_hat)
            grads["W_hhat_chat"] += _outer(da_gh, k.h_hat_prev)
            grads["b_chat"] += _bias_grad(da_gh)
            dxh_t = da_gh @ P["W_xhat_chat"]
            dhh_prev = dhh_prev + da_gh @ P["W_hhat_chat"]

            for gate, dgate, act in (("i", dih, k.i_hat), ("f", dfh, k.f_hat)):
                da = dgate * act * (1.0 - act)
                grads[f"W_xhat_{gate}hat"] += _outer(da, k.x_hat)
                grads[f"W_hhat_{gate}hat"] += _outer(da, k.h_hat_prev)
                grads[f"W_chat_{gate}hat"] += _peep_grad(P[f"W_chat_{gate}hat"], da, k.c_hat_prev)
                grads[f"b_{gate}hat"] += _bias_grad(da)
                dxh_t = dxh_t + da @ P[f"W_xhat_{gate}hat"]
                dhh_prev = dhh_prev + da @ P[f"W_hhat_{gate}hat"]
                dch_prev = dch_prev + _peep_back(P[f"W_chat_{gate}hat"], da)
                if cross:
                    name = f"W_c_{gate}hat" if opts.untied_crosscell else f"W_c{gate}"
                    grads[name] += _peep_grad(P[name], da, k.c_prev)
                    dc_prev = dc_prev + _peep_back(P[name], da)
            dxh[t] = dxh_t
            dhh_next, dch_next = dhh_prev, dch_prev

        dx[t] = dx_t
        dh_next, dc_next = dh_prev, dc_prev

    if mode_var:
        return Gradients(grads, dx, static=dxh.sum(axis=0), static_steps=dxh)
    return Gradients(grads, dx)


def finite_diff_grad(params, frames, static_frame, loss_fn, epsilon=DEFAULT_EPSILON):
    """Central-difference gradient of ``loss_fn(final_state)`` w.r.t. every parameter.

    ``loss_fn`` receives the final state of ``forward_sequence`` and returns a
    scalar. Frame and static-frame gradients are included as well.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    frames = np.array(frames, dtype=np.float64)
    static = None if static_frame is None else np.array(static_frame, dtype=np.float64)

    def loss_at(p, fr, st):
        state, _ = forward_sequence(p, fr, st)
        return float(loss_fn(state))

    def central(arr, evaluate):
        out = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = out.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            up = evaluate()
            flat[j] = orig - epsilon
            down = evaluate()
            flat[j] = orig
            gflat[j] = (up - down) / (2.0 * epsilon)
        return out

    work = params.copy()
    grads = {name: central(work.arrays[name], lambda: loss_at(work, frames, static))
             for name in work.keys()}
    dframes = central(frames, lambda: loss_at(work, frames, static))
    dstatic = None if static is None else central(static, lambda: loss_at(work, frames, static))
    return Gradients(grads, dframes, static=dstatic)


def relative_error(a, n, floor=REL_ERROR_FLOOR):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckReport:
    variant: str
    tolerance: float
    per_param: dict = field(default_factory=dict)  # name -> max relative error
    seed: Optional[int] = None

    @property
    def max_error(self):
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def worst(self):
        return max(self.per_param, key=self.per_param.get) if self.per_param else None

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def table(self):
        lines = [f"{'parameter':<14} {'max rel err':>12}  status"]
        for name, err in self.per_param.items():
            lines.append(f"{name:<14} {err:12.3e}  {'pass' if err <= self.tolerance else 'FAIL'}")
        return "\n".join(lines)

    def to_dict(self):
        return {"variant": self.variant, "seed": self.seed, "tolerance": self.tolerance,
                "max_error": self.max_error, "passed": self.passed,
                "per_param": dict(self.per_param)}


def compare_gradients(analytic, numeric, variant, tolerance, seed=None, include_inputs=True):
    report = GradCheckReport(variant, tolerance, seed=seed)
    for name in analytic.params:
        report.per_param[name] = float(relative_error(analytic.params[name], numeric.params[name]).max())
    if include_inputs:
        report.per_param["x"] = float(relative_error(analytic.frames, numeric.frames).max())
        if analytic.static is not None:
            report.per_param["x_hat"] = float(relative_error(analytic.static, numeric.static).max())
    return report


def random_instance(variant, input_dim, hidden_dim, steps, seed, options=CellOptions()):
    """Seeded parameters, frames, static frame and linear loss weights for checks."""
    rng = np.random.default_rng([seed, 7919])
    params = init_params(input_dim, hidden_dim, variant, seed, options)
    # perturb biases so no gradient is structurally tied to the zero init
    arrays = {k: (v + rng.uniform(-0.5, 0.5, v.shape) if k.startswith("b_") else v)
              for k, v in params.arrays.items()}
    params = params.replace(arrays)
    frames = rng.uniform(-1.0, 1.0, (steps, input_dim))
    static = None if variant == "lstm" else frames[0].copy()
    w_h = rng.normal(size=hidden_dim)
    w_hh = None if variant == "lstm" else rng.normal(size=hidden_dim)
    return params, frames, static, w_h, w_hh


def grad_check(variant, input_dim=2, hidden_dim=3, steps=4, seed=0, tolerance=1e-5,
               epsilon=DEFAULT_EPSILON, options=CellOptions(), corrupt=None):
    """Compare analytic and central-difference gradients on a seeded instance.

    The loss is a fixed random linear functional of the final h (and h_hat).
    ``corrupt`` maps parameter names to factors applied to the analytic
    gradient before comparison; it exists to confirm the check can fail.
    """
    if tolerance <= 0:
        raise ValueError("tolerance must be positive")
    params, frames, static, w_h, w_hh = random_instance(variant, input_dim, hidden_dim, steps, seed, options)

    def loss_fn(state):
        loss = state.h @ w_h
        if w_hh is not None:
            loss = loss + state.h_hat @ w_hh
        return loss

    _, caches = forward_sequence(params, frames, static)
    analytic = backward_sequence(params, caches, w_h, w_hh)
    if corrupt:
        for name, factor in corrupt.items():
            analytic.params[name] = analytic.params[name] * factor
    numeric = finite_diff_grad(params, frames, static, loss_fn, epsilon)
    return compare_gradients(analytic, numeric, variant, tolerance, seed=seed)


def clip_global_norm(grads, max_norm):
    """Scale a name -> array gradient dict so its global L2 norm is at most ``max_norm``."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or max_norm <= 0 or total <= max_norm:
        return grads, total
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}, total


__all__ = [
    "Gradients", "GradCheckReport", "backward_sequence", "finite_diff_grad", "grad_check",
    "relative_error", "compare_gradients", "random_instance", "clip_global_norm",
]
