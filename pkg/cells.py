"""Standard RNN, LSTM and GRU steps with hand-derived backward passes.

All steps work on row batches: ``x_t`` is (B, input) and states are (B, hidden).
A 1-D input is treated as a batch of one and the outputs come back 1-D.

Equations implemented (σ = logistic, ⊙ = elementwise):

  rnn   h_t = act(W x_t + U h_{t-1})                       act = tanh (default) or σ
  lstm  i_t = σ(W_xi x_t + W_hi h_{t-1} + w_ci ⊙ c_{t-1} + b_i)
        r_t = σ(W_xr x_t + W_hr h_{t-1} + w_cr ⊙ c_{t-1} + b_r)   (forget gate)
        c_t = r_t ⊙ c_{t-1} + i_t ⊙ tanh(W_xc x_t + W_hc h_{t-1} + b_c)
        o_t = σ(W_xo x_t + W_ho h_{t-1} + w_co ⊙ c_{t-1} + b_o)
        h_t = o_t ⊙ tanh(c_t)
  gru   r_t = σ(W_r x_t + U_r h_{t-1})
        z_t = σ(W_z x_t + U_z h_{t-1})
        n_t = tanh(W x_t + U (r_t ⊙ h_{t-1}))
        h_t = (1 - z_t) ⊙ h_{t-1} + z_t ⊙ n_t

``offsets`` adds a constant to a gate's pre-activation; tests use it to pin
gates open or shut.
"""
from dataclasses import dataclass, field

import numpy as np

from numerics import linear, sigmoid, tanh_act
from utils import ShapeError

CELL_KINDS = ("rnn", "lstm", "gru")


@dataclass
class StepTrace:
    kind: str
    x: np.ndarray
    h_prev: np.ndarray
    h: np.ndarray
    c_prev: np.ndarray = None
    c: np.ndarray = None
    gates: dict = field(default_factory=dict)
    activation: str = "tanh"


def cell_param_shapes(kind, input_dim, hidden):
    mat_x = (hidden, input_dim)
    mat_h = (hidden, hidden)
    vec = (hidden,)
    if kind == "rnn":
        return {"W": mat_x, "U": mat_h}
    if kind == "lstm":
        shapes = {}
        for g in ("i", "r", "c", "o"):
            shapes[f"W_x{g}"] = mat_x
            shapes[f"W_h{g}"] = mat_h
        for g in ("i", "r", "o"):
            shapes[f"w_c{g}"] = vec
        for g in ("i", "r", "c", "o"):
            shapes[f"b_{g}"] = vec
        return shapes
    if kind == "gru":
        return {"W_r": mat_x, "W_z": mat_x, "W": mat_x, "U_r": mat_h, "U_z": mat_h, "U": mat_h}
    raise ValueError(f"unknown cell kind: {kind}")


def _rows(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _out(a, squeeze):
    return a[0] if squeeze else a


def _off(offsets, gate):
    if not offsets:
        return 0.0
    return offsets.get(gate, 0.0)


def _check_state(p_rows, state, what):
    if state.shape[-1] != p_rows:
        raise ShapeError(what, (p_rows,), state.shape)


# ----------------------
# Forward steps
# ----------------------
def rnn_step(p, x_t, h_prev, offsets=None, activation="tanh"):
    x, squeeze = _rows(x_t)
    h, _ = _rows(h_prev)
    _check_state(p["U"].shape[0], h, "rnn h_prev")
    pre = linear(x, p["W"], "rnn W x_t") + linear(h, p["U"], "rnn U h_prev") + _off(offsets, "h")
    if activation == "tanh":
        h_t = tanh_act(pre)
    elif activation == "sigmoid":
        h_t = sigmoid(pre)
    else:
        raise ValueError(f"unknown rnn activation: {activation}")
    trace = StepTrace("rnn", x, h, h_t, activation=activation)
    return _out(h_t, squeeze), trace


def lstm_step(p, x_t, h_prev, c_prev, offsets=None):
    x, squeeze = _rows(x_t)
    h, _ = _rows(h_prev)
    c, _ = _rows(c_prev)
    _check_state(p["W_hi"].shape[0], h, "lstm h_prev")
    _check_state(p["W_hi"].shape[0], c, "lstm c_prev")

    def pre(g, peep=True):
        a = linear(x, p[f"W_x{g}"], f"lstm W_x{g} x_t") + linear(h, p[f"W_h{g}"], f"lstm W_h{g} h_prev")
        if peep:
            a = a + p[f"w_c{g}"] * c
        return a + p[f"b_{g}"] + _off(offsets, g)

    i = sigmoid(pre("i"))
    r = sigmoid(pre("r"))
    g = tanh_act(pre("c", peep=False))
    c_t = r * c + i * g
    o = sigmoid(pre("o"))
    tc = tanh_act(c_t)
    h_t = o * tc
    trace = StepTrace("lstm", x, h, h_t, c_prev=c, c=c_t, gates={"i": i, "r": r, "g": g, "o": o, "tc": tc})
    return _out(h_t, squeeze), _out(c_t, squeeze), trace


def gru_step(p, x_t, h_prev, offsets=None):
    x, squeeze = _rows(x_t)
    h, _ = _rows(h_prev)
    _check_state(p["U"].shape[0], h, "gru h_prev")
    r = sigmoid(linear(x, p["W_r"], "gru W_r x_t") + linear(h, p["U_r"], "gru U_r h_prev") + _off(offsets, "r"))
    z = sigmoid(linear(x, p["W_z"], "gru W_z x_t") + linear(h, p["U_z"], "gru U_z h_prev") + _off(offsets, "z"))
    rh = r * h
    n = tanh_act(linear(x, p["W"], "gru W x_t") + rh @ p["U"].T + _off(offsets, "n"))
    h_t = (1.0 - z) * h + z * n
    trace = StepTrace("gru", x, h, h_t, gates={"r": r, "z": z, "n": n, "rh": rh})
    return _out(h_t, squeeze), trace


def run_cell(kind, p, xs, h0=None, c0=None, offsets=None, activation="tanh"):
    """Unroll a cell over ``xs`` (T steps of (B, input)); returns hidden states and traces."""
    hidden = (p["U"] if kind in ("rnn", "gru") else p["W_hi"]).shape[0]
    batch = np.asarray(xs[0]).shape[0] if np.asarray(xs[0]).ndim == 2 else 1
    h = np.zeros((batch, hidden)) if h0 is None else _rows(h0)[0]
    c = np.zeros((batch, hidden)) if c0 is None else _rows(c0)[0]
    hs, traces = [], []
    for x_t in xs:
        x_t = _rows(x_t)[0]
        if kind == "rnn":
            h, tr = rnn_step(p, x_t, h, offsets, activation)
        elif kind == "lstm":
            h, c, tr = lstm_step(p, x_t, h, c, offsets)
        elif kind == "gru":
            h, tr = gru_step(p, x_t, h, offsets)
        else:
            raise ValueError(f"unknown cell kind: {kind}")
        hs.append(h)
        traces.append(tr)
    return hs, traces


# ----------------------
# Backward steps
# ----------------------
def _rnn_back(p, tr, dh, grads):
    if tr.activation == "tanh":
        dpre = dh * (1.0 - tr.h * tr.h)
    else:
        dpre = dh * tr.h * (1.0 - tr.h)
    grads["W"] += dpre.T @ tr.x
    grads["U"] += dpre.T @ tr.h_prev
    return dpre @ p["W"], dpre @ p["U"]


def _lstm_back(p, tr, dh, dc_next, grads):
    gt = tr.gates
    i, r, g, o, tc = gt["i"], gt["r"], gt["g"], gt["o"], gt["tc"]
    c_prev = tr.c_prev

    do = dh * tc
    dc = dc_next + dh * o * (1.0 - tc * tc)
    dpre = {
        "o": do * o * (1.0 - o),
        "i": dc * g * i * (1.0 - i),
        "r": dc * c_prev * r * (1.0 - r),
        "c": dc * i * (1.0 - g * g),
    }
    dx = 0.0
    dh_prev = 0.0
    for gate, d in dpre.items():
        grads[f"W_x{gate}"] += d.T @ tr.x
        grads[f"W_h{gate}"] += d.T @ tr.h_prev
        grads[f"b_{gate}"] += d.sum(axis=0)
        dx = dx + d @ p[f"W_x{gate}"]
        dh_prev = dh_prev + d @ p[f"W_h{gate}"]
    dc_prev = dc * r
    for gate in ("i", "r", "o"):
        grads[f"w_c{gate}"] += (dpre[gate] * c_prev).sum(axis=0)
        dc_prev = dc_prev + dpre[gate] * p[f"w_c{gate}"]
    return dx, dh_prev, dc_prev


def _gru_back(p, tr, dh, grads):
    gt = tr.gates
    r, z, n, rh = gt["r"], gt["z"], gt["n"], gt["rh"]
    h_prev = tr.h_prev

    dz = dh * (n - h_prev)
    dn = dh * z
    dh_prev = dh * (1.0 - z)

    dpre_n = dn * (1.0 - n * n)
    grads["W"] += dpre_n.T @ tr.x
    grads["U"] += dpre_n.T @ rh
    drh = dpre_n @ p["U"]
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r

    dpre_z = dz * z * (1.0 - z)
    grads["W_z"] += dpre_z.T @ tr.x
    grads["U_z"] += dpre_z.T @ h_prev
    dh_prev = dh_prev + dpre_z @ p["U_z"]

    dpre_r = dr * r * (1.0 - r)
    grads["W_r"] += dpre_r.T @ tr.x
    grads["U_r"] += dpre_r.T @ h_prev
    dh_prev = dh_prev + dpre_r @ p["U_r"]

    dx = dpre_n @ p["W"] + dpre_z @ p["W_z"] + dpre_r @ p["W_r"]
    return dx, dh_prev


def cell_backward(kind, p, traces, upstream):
    """Backpropagation through time over a completed forward pass.

    ``upstream[t]`` is the loss gradient w.r.t. the hidden state emitted at step t.
    Returns ``(param_grads, input_grads)`` where ``input_grads`` holds the
    per-step ``"x"`` gradients and the ``"h0"``/``"c0"`` initial-state gradients.
    """
    if len(traces) != len(upstream):
        raise ValueError(f"{kind} backward: {len(traces)} traces but {len(upstream)} upstream gradients")
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    if not traces:
        return grads, {"x": [], "h0": None, "c0": None}

    dxs = [None] * len(traces)
    dh_next = np.zeros_like(traces[-1].h)
    dc_next = np.zeros_like(traces[-1].h)
    for t in range(len(traces) - 1, -1, -1):
        tr = traces[t]
        dh = _rows(upstream[t])[0] + dh_next
        if kind == "rnn":
            dxs[t], dh_next = _rnn_back(p, tr, dh, grads)
        elif kind == "lstm":
            dxs[t], dh_next, dc_next = _lstm_back(p, tr, dh, dc_next, grads)
        elif kind == "gru":
            dxs[t], dh_next = _gru_back(p, tr, dh, grads)
        else:
            raise ValueError(f"unknown cell kind: {kind}")
    return grads, {"x": dxs, "h0": dh_next, "c0": dc_next if kind == "lstm" else None}
