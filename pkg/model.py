"""Static/dynamic fusion networks and the feedforward and linear baselines.

Every architecture maps a padded batch ``static`` (B, S) and ``visits``
(B, T, D) to per-visit probabilities (B, T, K). Padding after a patient's last
visit never changes earlier predictions, so one call serves the whole batch.

Fusion ("rnn", "lstm", "gru"):
    x̃^e = A x̃                 h̃ = tanh(W_s x̃^e + b_s)
    x_t^e = B x_t               h_t = cell(x_t^e, h_{t-1})
    ŷ_t = σ(W_o [h̃ ; h_t] + b)
Baselines: "tle" (background aggregate + n most recent visits, stacked latents,
one tanh layer), "logreg" (static ⊕ current visit ⊕ mean of prior visits),
"static" (static embedding, one tanh layer) and "random".
"""
import logging
from dataclasses import dataclass

import numpy as np

from cells import CELL_KINDS, cell_backward, cell_param_shapes, run_cell
from numerics import Rng, gemv, glorot_uniform, linear, sigmoid, tanh_act
from utils import ShapeError

logger = logging.getLogger(__name__)

EPS = 1e-7
ARCHS = ("rnn", "lstm", "gru", "tle", "logreg", "static", "random")
ARCH_LABELS = {
    "gru": "GRU + static",
    "lstm": "LSTM + static",
    "rnn": "RNN + static",
    "tle": "TLE",
    "logreg": "Logistic Regression",
    "static": "Static embeddings",
    "random": "Random",
}


@dataclass(frozen=True)
class Dims:
    static: int
    dynamic: int
    outputs: int = 6

    def __post_init__(self):
        if min(self.static, self.dynamic, self.outputs) < 1:
            raise ValueError(f"dimensions must be positive: {self}")


def clamp_probs(p):
    return np.clip(p, EPS, 1.0 - EPS)


# ----------------------
# Feature builders shared by the windowed baselines
# ----------------------
def prior_mean(visits):
    """Per-feature mean of visits 1..t-1 for every t (zeros at the first visit)."""
    csum = np.cumsum(visits, axis=1)
    prior = np.zeros_like(visits)
    prior[:, 1:] = csum[:, :-1]
    counts = np.maximum(np.arange(visits.shape[1]), 1).reshape(1, -1, 1)
    return prior / counts


def recent_window(visits, n):
    """(B, T, n, D): slot k holds visit t-k, zero-padded before the first visit."""
    B, T, D = visits.shape
    out = np.zeros((B, T, n, D))
    for k in range(n):
        if k < T:
            out[:, k:, k, :] = visits[:, : T - k, :]
    return out


def tle_background(static, visits):
    B, T, _ = visits.shape
    return np.concatenate([np.broadcast_to(static[:, None, :], (B, T, static.shape[1])), prior_mean(visits)], axis=2)


def logreg_features(static, visits):
    B, T, _ = visits.shape
    stat = np.broadcast_to(static[:, None, :], (B, T, static.shape[1]))
    return np.concatenate([stat, visits, prior_mean(visits)], axis=2)


# ----------------------
# Single-vector operations
# ----------------------
def embed_static(A, x_static):
    return gemv(A, x_static)


def embed_visit(B, x_visit):
    return gemv(B, x_visit)


def random_predict(rng, n):
    return rng.uniform(EPS, 1.0 - EPS, size=n)


# ----------------------
# Architectures
# ----------------------
@dataclass
class Architecture:
    arch: str
    dims: Dims
    rank: int = 50
    hidden: int = 100
    window: int = 3
    activation: str = "tanh"
    seed: int = 0
    static_rank: int = 0
    static_hidden: int = 0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture '{self.arch}' (choose from {', '.join(ARCHS)})")
        if self.rank < 1 or self.hidden < 1 or self.window < 1:
            raise ValueError("rank, hidden and window must be positive")
        if self.static_rank < 0 or self.static_hidden < 0:
            raise ValueError("static_rank and static_hidden must be non-negative (0 ties them to rank and hidden)")

    @classmethod
    def from_config(cls, arch, dims, cfg):
        return cls(arch, dims, cfg.rank, cfg.hidden, cfg.tle_window, cfg.rnn_activation, cfg.seed, cfg.static_rank,
                   cfg.static_hidden)

    @property
    def rank_s(self):
        return self.static_rank or self.rank

    @property
    def hidden_s(self):
        return self.static_hidden or self.hidden

    @property
    def is_fusion(self):
        return self.arch in CELL_KINDS

    @property
    def trainable(self):
        return self.arch != "random"

    def param_shapes(self):
        S, D, K = self.dims.static, self.dims.dynamic, self.dims.outputs
        r, H, n = self.rank, self.hidden, self.window
        rs, Hs = self.rank_s, self.hidden_s
        if self.is_fusion:
            shapes = {"A": (rs, S), "B": (r, D), "W_s": (Hs, rs), "b_s": (Hs,)}
            for name, shape in cell_param_shapes(self.arch, r, H).items():
                shapes["cell." + name] = shape
            shapes.update({"W_o": (K, Hs + H), "b": (K,)})
            return shapes
        if self.arch == "tle":
            return {"R_b": (r, S + D), "R_v": (r, D), "W_h": (H, (n + 1) * r), "b_h": (H,), "W_o": (K, H), "b": (K,)}
        if self.arch == "logreg":
            return {"W": (K, S + 2 * D), "b": (K,)}
        if self.arch == "static":
            return {"A": (rs, S), "W_h": (Hs, rs), "b_h": (Hs,), "W_o": (K, Hs), "b": (K,)}
        return {}

    def init_params(self, rng):
        """Glorot-uniform matrices, zero vectors (biases and diagonal peepholes)."""
        params = {}
        for name, shape in self.param_shapes().items():
            if len(shape) == 2:
                params[name] = glorot_uniform(rng.substream(name), *shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def dropout_shapes(self, batch, steps):
        r, H = self.rank, self.hidden
        rs, Hs = self.rank_s, self.hidden_s
        if self.is_fusion:
            return {"static": (batch, rs), "visit": (batch, steps, r), "out": (batch, steps, Hs + H)}
        if self.arch == "tle":
            return {"embed": (batch, steps, (self.window + 1) * r), "out": (batch, steps, H)}
        if self.arch == "static":
            return {"embed": (batch, rs), "out": (batch, Hs)}
        return {}

    def check_inputs(self, static, visits):
        if static.ndim != 2 or static.shape[1] != self.dims.static:
            raise ShapeError(f"{self.arch} static input", static.shape, (static.shape[0], self.dims.static))
        if visits.ndim != 3 or visits.shape[2] != self.dims.dynamic or visits.shape[0] != static.shape[0]:
            raise ShapeError(f"{self.arch} visit input", visits.shape, (static.shape[0], "T", self.dims.dynamic))
        if visits.shape[1] < 1:
            raise ValueError("at least one visit is required")

    # ----------------------
    # Forward
    # ----------------------
    def forward(self, params, static, visits, masks=None, rng=None):
        """Returns (ŷ of shape (B, T, K), trace for ``backward``)."""
        static = np.asarray(static, dtype=np.float64)
        visits = np.asarray(visits, dtype=np.float64)
        self.check_inputs(static, visits)
        masks = masks or {}
        if self.is_fusion:
            return self._fusion_forward(params, static, visits, masks)
        if self.arch == "tle":
            return self._tle_forward(params, static, visits, masks)
        if self.arch == "logreg":
            feats = logreg_features(static, visits)
            logits = linear(feats, params["W"], "logreg W") + params["b"]
            return clamp_probs(sigmoid(logits)), {"feats": feats}
        if self.arch == "static":
            return self._static_forward(params, static, visits, masks)
        rng = rng or Rng(self.seed).substream("random")
        B, T, _ = visits.shape
        return random_predict(rng, (B, T, self.dims.outputs)), {}

    def _fusion_forward(self, p, static, visits, masks):
        B, T, _ = visits.shape
        Hs = self.hidden_s
        ms = masks.get("static", 1.0)
        md = masks.get("visit", np.ones((B, T, 1)))
        mo = masks.get("out", 1.0)

        xs_e = linear(static, p["A"], "embed_static A") * ms
        hs = tanh_act(xs_e @ p["W_s"].T + p["b_s"])
        xe = [linear(visits[:, t], p["B"], "embed_visit B") * md[:, t] for t in range(T)]
        cellp = {k[5:]: v for k, v in p.items() if k.startswith("cell.")}
        hd, traces = run_cell(self.arch, cellp, xe, activation=self.activation)

        Z = np.concatenate([np.broadcast_to(hs[:, None, :], (B, T, Hs)), np.stack(hd, axis=1)], axis=2) * mo
        yhat = clamp_probs(sigmoid(Z @ p["W_o"].T + p["b"]))
        trace = {"static": static, "visits": visits, "xs_e": xs_e, "hs": hs, "traces": traces,
                 "Z": Z, "ms": ms, "md": md, "mo": mo}
        return yhat, trace

    def _tle_forward(self, p, static, visits, masks):
        B, T, _ = visits.shape
        n, r = self.window, self.rank
        bg = tle_background(static, visits)
        recent = recent_window(visits, n)
        L_b = linear(bg, p["R_b"], "tle background map")
        L_v = linear(recent, p["R_v"], "tle visit map")
        me = masks.get("embed", 1.0)
        mo = masks.get("out", 1.0)
        stack = np.concatenate([L_b, L_v.reshape(B, T, n * r)], axis=2) * me
        hidden = tanh_act(stack @ p["W_h"].T + p["b_h"])
        hd = hidden * mo
        yhat = clamp_probs(sigmoid(hd @ p["W_o"].T + p["b"]))
        return yhat, {"bg": bg, "recent": recent, "stack": stack, "hidden": hidden, "hd": hd, "me": me, "mo": mo}

    def _static_forward(self, p, static, visits, masks):
        B, T, _ = visits.shape
        me = masks.get("embed", 1.0)
        mo = masks.get("out", 1.0)
        xs_e = linear(static, p["A"], "embed_static A") * me
        hidden = tanh_act(xs_e @ p["W_h"].T + p["b_h"])
        hd = hidden * mo
        y = clamp_probs(sigmoid(hd @ p["W_o"].T + p["b"]))
        yhat = np.repeat(y[:, None, :], T, axis=1)
        return yhat, {"static": static, "xs_e": xs_e, "hidden": hidden, "hd": hd, "me": me, "mo": mo}

    # ----------------------
    # Backward
    # ----------------------
    def backward(self, params, trace, dlogits):
        """Gradients of the loss given its gradient w.r.t. the pre-sigmoid outputs (B, T, K)."""
        if not self.trainable:
            return {}
        if self.is_fusion:
            return self._fusion_backward(params, trace, dlogits)
        if self.arch == "tle":
            return self._tle_backward(params, trace, dlogits)
        if self.arch == "logreg":
            feats = trace["feats"]
            if feats.shape[:2] != dlogits.shape[:2]:
                raise ShapeError("logreg backward", dlogits.shape, feats.shape)
            return {"W": np.einsum("btk,btf->kf", dlogits, feats), "b": dlogits.sum(axis=(0, 1))}
        return self._static_backward(params, trace, dlogits)

    def _fusion_backward(self, p, tr, dlogits):
        Hs = self.hidden_s
        traces = tr["traces"]
        if dlogits.shape[1] != len(traces):
            raise ShapeError("fusion backward", dlogits.shape, (dlogits.shape[0], len(traces)))
        grads = {"W_o": np.einsum("btk,bth->kh", dlogits, tr["Z"]), "b": dlogits.sum(axis=(0, 1))}

        dZ = (dlogits @ p["W_o"]) * tr["mo"]
        dhs = dZ[:, :, :Hs].sum(axis=1)
        upstream = [dZ[:, t, Hs:] for t in range(dZ.shape[1])]
        cellp = {k[5:]: v for k, v in p.items() if k.startswith("cell.")}
        cell_grads, inputs = cell_backward(self.arch, cellp, traces, upstream)
        for name, g in cell_grads.items():
            grads["cell." + name] = g

        visits = tr["visits"]
        dB = np.zeros_like(p["B"])
        for t, dxe in enumerate(inputs["x"]):
            dB += (dxe * tr["md"][:, t]).T @ visits[:, t]
        grads["B"] = dB

        dpre_s = dhs * (1.0 - tr["hs"] ** 2)
        grads["W_s"] = dpre_s.T @ tr["xs_e"]
        grads["b_s"] = dpre_s.sum(axis=0)
        dxs_e = (dpre_s @ p["W_s"]) * tr["ms"]
        grads["A"] = dxs_e.T @ tr["static"]
        return {name: grads[name] for name in p}

    def _tle_backward(self, p, tr, dlogits):
        n, r = self.window, self.rank
        B, T, _ = dlogits.shape
        grads = {"W_o": np.einsum("btk,bth->kh", dlogits, tr["hd"]), "b": dlogits.sum(axis=(0, 1))}
        dpre = (dlogits @ p["W_o"]) * tr["mo"] * (1.0 - tr["hidden"] ** 2)
        grads["W_h"] = np.einsum("bth,bts->hs", dpre, tr["stack"])
        grads["b_h"] = dpre.sum(axis=(0, 1))
        dstack = (dpre @ p["W_h"]) * tr["me"]
        grads["R_b"] = np.einsum("btr,btf->rf", dstack[:, :, :r], tr["bg"])
        dL_v = dstack[:, :, r:].reshape(B, T, n, r)
        grads["R_v"] = np.einsum("btnr,btnd->rd", dL_v, tr["recent"])
        return {name: grads[name] for name in p}

    def _static_backward(self, p, tr, dlogits):
        dl = dlogits.sum(axis=1)
        grads = {"W_o": dl.T @ tr["hd"], "b": dl.sum(axis=0)}
        dpre = (dl @ p["W_o"]) * tr["mo"] * (1.0 - tr["hidden"] ** 2)
        grads["W_h"] = dpre.T @ tr["xs_e"]
        grads["b_h"] = dpre.sum(axis=0)
        grads["A"] = ((dpre @ p["W_h"]) * tr["me"]).T @ tr["static"]
        return {name: grads[name] for name in p}


# ----------------------
# Functional entry points
# ----------------------
def init_params(arch, dims, cfg, rng):
    return Architecture.from_config(arch, dims, cfg).init_params(rng)


def forward_sequence(model, params, x_static, visits, dropout_masks=None):
    """One patient: ``x_static`` (S,), ``visits`` (T, D). Returns ((T, K) probabilities, trace)."""
    visits = np.asarray(visits, dtype=np.float64)
    if visits.ndim != 2 or visits.shape[0] == 0:
        raise ValueError("forward_sequence needs a non-empty (T, D) visit sequence")
    yhat, trace = model.forward(params, np.asarray(x_static, dtype=np.float64)[None, :], visits[None], dropout_masks)
    return yhat[0], trace


def model_backward(model, params, trace, dlogits):
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if dlogits.ndim == 2:
        dlogits = dlogits[None]
    return model.backward(params, trace, dlogits)


def tle_forward(p, background, recent):
    """Single prediction from a background vector (S + D,) and the (n, D) most recent visits."""
    recent = np.asarray(recent, dtype=np.float64)
    n, r = recent.shape[0], p["R_v"].shape[0]
    if p["W_h"].shape[1] != (n + 1) * r:
        raise ShapeError("tle stack width", (p["W_h"].shape[1],), ((n + 1) * r,))
    stack = np.concatenate([embed_static(p["R_b"], background)] + [embed_visit(p["R_v"], v) for v in recent])
    hidden = tanh_act(gemv(p["W_h"], stack) + p["b_h"])
    return clamp_probs(sigmoid(gemv(p["W_o"], hidden) + p["b"]))


def logreg_forward(W, b, features):
    return clamp_probs(sigmoid(gemv(W, features) + b))


def static_only_forward(params, x_static):
    hidden = tanh_act(gemv(params["W_h"], embed_static(params["A"], x_static)) + params["b_h"])
    return clamp_probs(sigmoid(gemv(params["W_o"], hidden) + params["b"]))
