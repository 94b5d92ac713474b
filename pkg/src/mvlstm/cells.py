"""Recurrent cells: peephole LSTM, mode variational LSTM and its cross-cell variant.

All three cells are pure single-step transition functions. A step takes the
previous state and the current frame (plus the static frame for the mode
variational cells) and returns the next state together with a ``StepCache``
holding every intermediate the backward pass needs.

Parameter naming follows the gate algebra directly::

    W_xi, W_hi, W_ci, ...      dynamics path (input x, latent h, cell c)
    W_xhat_ihat, W_hhat_ihat   static path (input x_hat, latent h_hat)
    W_chat_ihat, ...           static path peepholes into c_hat
    W_chat_o, W_hhat_o         static path terms of the shared output gate
    W_chat_i, W_chat_f         cross-cell peepholes c_hat -> dynamics gates
    W_c_ihat, W_c_fhat         c -> static gates, only with ``untied_crosscell``

Every function accepts a leading batch axis on states and frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import sigmoid, tanh_act

VARIANTS = ("lstm", "modevar", "modevar_crosscell")

LSTM_KEYS = (
    "W_xi", "W_hi", "W_ci",
    "W_xf", "W_hf", "W_cf",
    "W_xc", "W_hc",
    "W_xo", "W_ho", "W_co",
    "b_i", "b_f", "b_c", "b_o",
)
STATIC_KEYS = (
    "W_xhat_ihat", "W_hhat_ihat", "W_chat_ihat",
    "W_xhat_fhat", "W_hhat_fhat", "W_chat_fhat",
    "W_xhat_chat", "W_hhat_chat",
    "b_ihat", "b_fhat", "b_chat",
    "W_chat_o", "W_hhat_o",
)
CROSS_KEYS = ("W_chat_i", "W_chat_f")
UNTIED_KEYS = ("W_c_ihat", "W_c_fhat")

# cell-state -> gate connections; these become vectors under diagonal_peephole
PEEPHOLE_KEYS = frozenset({
    "W_ci", "W_cf", "W_co", "W_chat_ihat", "W_chat_fhat", "W_chat_o",
    "W_chat_i", "W_chat_f", "W_c_ihat", "W_c_fhat",
})


@dataclass(frozen=True)
class CellOptions:
    literal_eq2: bool = False        # update c_hat with the dynamics gates i, f
    diagonal_peephole: bool = False  # elementwise peepholes instead of full matrices
    untied_crosscell: bool = False   # separate c -> static-gate peephole matrices

    def to_dict(self):
        return {"literal_eq2": self.literal_eq2,
                "diagonal_peephole": self.diagonal_peephole,
                "untied_crosscell": self.untied_crosscell}


@dataclass
class CellParams:
    """Named parameter arrays of one recurrent cell.

    ``arrays`` is ordered by the canonical key order, which is also the order
    used by serialization, the optimizer and gradient checking.
    """

    variant: str
    input_dim: int
    hidden_dim: int
    arrays: dict
    options: CellOptions = field(default_factory=CellOptions)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        expected = param_keys(self.variant, self.options)
        if tuple(self.arrays) != expected:
            missing = set(expected) - set(self.arrays)
            extra = set(self.arrays) - set(expected)
            if missing or extra:
                raise ValueError(f"parameter keys mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
            self.arrays = {k: self.arrays[k] for k in expected}
        for name, arr in self.arrays.items():
            shape = param_shape(name, self.input_dim, self.hidden_dim, self.options)
            if arr.shape != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite entries")

    @property
    def cross_cell(self):
        return self.variant == "modevar_crosscell"

    def __getitem__(self, name):
        return self.arrays[name]

    def keys(self):
        return self.arrays.keys()

    def replace(self, arrays):
        return CellParams(self.variant, self.input_dim, self.hidden_dim, dict(arrays), self.options)

    def copy(self):
        return self.replace({k: v.copy() for k, v in self.arrays.items()})


def param_keys(variant, options=CellOptions()):
    if variant == "lstm":
        return LSTM_KEYS
    if variant == "modevar":
        return LSTM_KEYS + STATIC_KEYS
    if variant == "modevar_crosscell":
        extra = UNTIED_KEYS if options.untied_crosscell else ()
        return LSTM_KEYS + STATIC_KEYS + CROSS_KEYS + extra
    raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def param_shape(name, input_dim, hidden_dim, options=CellOptions()):
    if name.startswith("b_"):
        return (hidden_dim,)
    if name in PEEPHOLE_KEYS and options.diagonal_peephole:
        return (hidden_dim,)
    if name.startswith("W_x"):
        return (hidden_dim, input_dim)
    return (hidden_dim, hidden_dim)


def init_params(input_dim, hidden_dim, variant, seed, options=CellOptions()):
    """Glorot-uniform weights, zero biases except the forget bias ``b_f`` set to 1."""
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError(f"dimensions must be >= 1, got input_dim={input_dim}, hidden_dim={hidden_dim}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name in param_keys(variant, options):
        shape = param_shape(name, input_dim, hidden_dim, options)
        if name.startswith("b_"):
            arrays[name] = np.ones(shape) if name == "b_f" else np.zeros(shape)
        else:
            fan_out = shape[0]
            fan_in = shape[1] if len(shape) == 2 else 1
            s = np.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-s, s, size=shape)
    return CellParams(variant, input_dim, hidden_dim, arrays, options)


def zero_params(input_dim, hidden_dim, variant, options=CellOptions()):
    arrays = {name: np.zeros(param_shape(name, input_dim, hidden_dim, options))
              for name in param_keys(variant, options)}
    return CellParams(variant, input_dim, hidden_dim, arrays, options)


@dataclass
class CellState:
    c: np.ndarray
    h: np.ndarray


@dataclass
class ModeVarState:
    c: np.ndarray
    h: np.ndarray
    c_hat: np.ndarray
    h_hat: np.ndarray


def zero_state(variant, hidden_dim, batch=None):
    shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
    if variant == "lstm":
        return CellState(np.zeros(shape), np.zeros(shape))
    return ModeVarState(np.zeros(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape))


@dataclass
class StepCache:
    """Inputs, previous state, gate activations and candidates of one step."""

    x: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray
    i: np.ndarray
    f: np.ndarray
    g: np.ndarray          # tanh candidate of the dynamics cell
    c: np.ndarray
    tanh_c: np.ndarray
    o: np.ndarray
    h: np.ndarray
    pre: dict              # gate pre-activation sums keyed by gate name
    x_hat: Optional[np.ndarray] = None
    c_hat_prev: Optional[np.ndarray] = None
    h_hat_prev: Optional[np.ndarray] = None
    i_hat: Optional[np.ndarray] = None
    f_hat: Optional[np.ndarray] = None
    g_hat: Optional[np.ndarray] = None
    c_hat: Optional[np.ndarray] = None
    tanh_c_hat: Optional[np.ndarray] = None
    h_hat: Optional[np.ndarray] = None


def _lin(v, W):
    return v @ W.T


def peep(W, c):
    """Peephole term: full matrix product or elementwise for diagonal peepholes."""
    return c * W if W.ndim == 1 else c @ W.T


def _pre(W_in, inp, W_rec, rec, peeps, b):
    # shared by both paths so tied weights give bitwise-identical sums
    a = _lin(inp, W_in) + _lin(rec, W_rec)
    for W, c in peeps:
        a = a + peep(W, c)
    return a + b


def _check_dims(p, state, x, x_hat=None):
    if x.shape[-1] != p.input_dim:
        raise ValueError(f"frame dim {x.shape[-1]} does not match input_dim {p.input_dim}")
    if x_hat is not None and x_hat.shape[-1] != p.input_dim:
        raise ValueError(f"static frame dim {x_hat.shape[-1]} does not match input_dim {p.input_dim}")
    for name in ("c", "h", "c_hat", "h_hat"):
        v = getattr(state, name, None)
        if v is not None and v.shape[-1] != p.hidden_dim:
            raise ValueError(f"state {name} dim {v.shape[-1]} does not match hidden_dim {p.hidden_dim}")


def lstm_step(p, s, x):
    if p.variant != "lstm":
        raise ValueError(f"lstm_step needs lstm parameters, got {p.variant!r}")
    x = np.asarray(x, dtype=np.float64)
    _check_dims(p, s, x)
    a_i = _pre(p["W_xi"], x, p["W_hi"], s.h, [(p["W_ci"], s.c)], p["b_i"])
    a_f = _pre(p["W_xf"], x, p["W_hf"], s.h, [(p["W_cf"], s.c)], p["b_f"])
    a_g = _lin(x, p["W_xc"]) + _lin(s.h, p["W_hc"]) + p["b_c"]
    i, f, g = sigmoid(a_i), sigmoid(a_f), tanh_act(a_g)
    c = f * s.c + i * g
    a_o = _pre(p["W_xo"], x, p["W_ho"], s.h, [(p["W_co"], c)], p["b_o"])
    o = sigmoid(a_o)
    tc = tanh_act(c)
    h = o * tc
    cache = StepCache(x=x, c_prev=s.c, h_prev=s.h, i=i, f=f, g=g, c=c, tanh_c=tc, o=o, h=h,
                      pre={"i": a_i, "f": a_f, "g": a_g, "o": a_o})
    return CellState(c, h), cache


def _modevar(p, s, x, x_hat, cross):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    _check_dims(p, s, x, x_hat)
    opts = p.options

    peeps_i = [(p["W_ci"], s.c)]
    peeps_f = [(p["W_cf"], s.c)]
    peeps_ih = [(p["W_chat_ihat"], s.c_hat)]
    peeps_fh = [(p["W_chat_fhat"], s.c_hat)]
    if cross:
        peeps_i.append((p["W_chat_i"], s.c_hat))
        peeps_f.append((p["W_chat_f"], s.c_hat))
        W_c_ih = p["W_c_ihat"] if opts.untied_crosscell else p["W_ci"]
        W_c_fh = p["W_c_fhat"] if opts.untied_crosscell else p["W_cf"]
        peeps_ih.append((W_c_ih, s.c))
        peeps_fh.append((W_c_fh, s.c))

    # dynamics gates, then static-path gates
    a_i = _pre(p["W_xi"], x, p["W_hi"], s.h, peeps_i, p["b_i"])
    a_f = _pre(p["W_xf"], x, p["W_hf"], s.h, peeps_f, p["b_f"])
    a_ih = _pre(p["W_xhat_ihat"], x_hat, p["W_hhat_ihat"], s.h_hat, peeps_ih, p["b_ihat"])
    a_fh = _pre(p["W_xhat_fhat"], x_hat, p["W_hhat_fhat"], s.h_hat, peeps_fh, p["b_fhat"])
    i, f = sigmoid(a_i), sigmoid(a_f)
    ih, fh = sigmoid(a_ih), sigmoid(a_fh)

    a_g = _lin(x, p["W_xc"]) + _lin(s.h, p["W_hc"]) + p["b_c"]
    g = tanh_act(a_g)
    c = f * s.c + i * g
    a_gh = _lin(x_hat, p["W_xhat_chat"]) + _lin(s.h_hat, p["W_hhat_chat"]) + p["b_chat"]
    gh = tanh_act(a_gh)
    if opts.literal_eq2:
        ch = f * s.c_hat + i * gh
    else:
        ch = fh * s.c_hat + ih * gh

    a_o = _pre(p["W_xo"], x, p["W_ho"], s.h, [(p["W_co"], c)], p["b_o"])
    a_o = a_o + peep(p["W_chat_o"], ch) + _lin(s.h_hat, p["W_hhat_o"])
    o = sigmoid(a_o)
    tc, tch = tanh_act(c), tanh_act(ch)
    h, hh = o * tc, o * tch

    cache = StepCache(x=x, c_prev=s.c, h_prev=s.h, i=i, f=f, g=g, c=c, tanh_c=tc, o=o, h=h,
                      pre={"i": a_i, "f": a_f, "g": a_g, "o": a_o,
                           "i_hat": a_ih, "f_hat": a_fh, "g_hat": a_gh},
                      x_hat=x_hat, c_hat_prev=s.c_hat, h_hat_prev=s.h_hat,
                      i_hat=ih, f_hat=fh, g_hat=gh, c_hat=ch, tanh_c_hat=tch, h_hat=hh)
    return ModeVarState(c, h, ch, hh), cache


def modevar_step(p, s, x, x_hat):
    if p.variant != "modevar":
        raise ValueError(f"modevar_step needs modevar parameters, got {p.variant!r}"
                         + ("; use crosscell_step" if p.cross_cell else ""))
    return _modevar(p, s, x, x_hat, cross=False)


def crosscell_step(p, s, x, x_hat):
    if p.variant != "modevar_crosscell":
        raise ValueError(f"crosscell_step needs modevar_crosscell parameters, got {p.variant!r}")
    return _modevar(p, s, x, x_hat, cross=True)


def step(p, s, x, x_hat=None):
    if p.variant == "lstm":
        return lstm_step(p, s, x)
    if x_hat is None:
        raise ValueError(f"variant {p.variant!r} needs a static frame")
    if p.variant == "modevar":
        return modevar_step(p, s, x, x_hat)
    return crosscell_step(p, s, x, x_hat)


def forward_sequence(params, frames, static_frame=None):
    """Run the cell over ``frames`` from the all-zero state.

    ``frames`` has shape ``(T, D_x)`` or ``(T, B, D_x)``. The static frame is
    fed unchanged at every step; an array with a leading time axis of length
    T supplies one static input per step instead.

    Returns the final state and the list of per-step caches.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim < 2 or frames.shape[0] == 0:
        raise ValueError("sequence must contain at least one frame")
    T = frames.shape[0]
    batch = frames.shape[1] if frames.ndim == 3 else None
    per_step_static = False
    if params.variant != "lstm":
        if static_frame is None:
            raise ValueError(f"variant {params.variant!r} needs a static frame")
        static_frame = np.asarray(static_frame, dtype=np.float64)
        per_step_static = static_frame.ndim == frames.ndim
        if per_step_static and static_frame.shape[0] != T:
            raise ValueError(f"per-step static input has {static_frame.shape[0]} steps, expected {T}")
    state = zero_state(params.variant, params.hidden_dim, batch)
    caches = []
    for t in range(T):
        x_hat = None
        if params.variant != "lstm":
            x_hat = static_frame[t] if per_step_static else static_frame
        state, cache = step(params, state, frames[t], x_hat)
        caches.append(cache)
    return state, caches
