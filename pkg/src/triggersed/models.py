"""Temporal modules under one gated-state update rule, with exact gradients.

Every module kind advances an internal state as

    s_t = retention * s_{t-1} + update * candidate(z_t, h_{t-1})
    h_t = output * phi(s_t)

and differs only in how the retention/update/output factors are produced:

    linear  retention=0, update=1, output=1 (memory-less passthrough)
    gru     update = learned gate u_t, retention = 1 - u_t, output = 1
    lstm    retention/update/output = independent learned gates, phi = tanh
    esn     retention = 1 - leak, update = leak, output = 1; recurrent and
            input weights are random and frozen

All states start at zero for each clip. Bidirectional variants run a second
parameter set anticausally and concatenate states per frame. A shared linear
readout maps exposed states to per-frame class posteriors via sigmoid.

Forward passes are batched over clips; backward passes are hand-written
backpropagation through time returning exact gradients for every trainable
tensor (frozen tensors never receive gradients).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .features import FeatureSequence


class ModelError(ValueError):
    """Bad module configuration or mismatched shapes."""


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class GateSpec:
    """How a module kind instantiates the three gating factors."""

    retention: str
    update: str
    output: str


GATE_SPECS = {
    "linear": GateSpec(retention="zero", update="one", output="one"),
    "gru": GateSpec(retention="coupled", update="learned_gate", output="one"),
    "lstm": GateSpec(retention="learned_gate", update="learned_gate", output="learned_gate"),
    "esn": GateSpec(retention="constant", update="constant", output="one"),
}

KINDS = tuple(GATE_SPECS)
DIRECTIONS = ("uni", "bi")


@dataclass(frozen=True)
class EsnParams:
    spectral_radius: float = 0.9
    leak: float = 0.5
    input_scale: float = 1.0
    density: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.leak <= 1.0:
            raise ModelError(f"leak must be in (0, 1], got {self.leak}")
        if self.spectral_radius <= 0:
            raise ModelError(f"spectral radius must be positive, got {self.spectral_radius}")
        if not 0.0 < self.density <= 1.0:
            raise ModelError(f"density must be in (0, 1], got {self.density}")


@dataclass(frozen=True)
class ModuleConfig:
    kind: str
    direction: str = "uni"
    input_dim: int = 64
    hidden: int = 256  # H per direction for gru/lstm, reservoir size N for esn
    layers: int = 2
    input_proj: int | None = 256
    dropout_p: float = 0.3
    esn: EsnParams = field(default_factory=EsnParams)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown module kind {self.kind!r}; choose from {KINDS}")
        if self.direction not in DIRECTIONS:
            raise ModelError(f"unknown direction {self.direction!r}; choose from {DIRECTIONS}")

    @classmethod
    def for_kind(cls, kind, direction="uni", input_dim=64, hidden=256, layers=2,
                 input_proj=256, dropout_p=0.3, esn=None, seed=0) -> "ModuleConfig":
        """Kind-appropriate defaults: linear/esn have no projection, stacking,
        or dropout; esn is always a single frozen layer."""
        if kind in ("linear", "esn"):
            input_proj = None
            dropout_p = 0.0
            layers = 1
        return cls(kind=kind, direction=direction, input_dim=input_dim, hidden=hidden,
                   layers=layers, input_proj=input_proj, dropout_p=dropout_p,
                   esn=esn or EsnParams(), seed=seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModuleConfig":
        d = dict(d)
        d["esn"] = EsnParams(**d["esn"])
        d["input_proj"] = d.get("input_proj")
        return cls(**d)


# --- reservoir construction --------------------------------------------------

def spectral_radius(W: np.ndarray, seed: int = 0, tol: float = 1e-6) -> float:
    """Largest eigenvalue magnitude via Arnoldi iteration (dense fallback for
    tiny or non-converging matrices)."""
    n = W.shape[0]
    if n < 16:
        return float(np.abs(np.linalg.eigvals(W)).max()) if n else 0.0
    v0 = np.random.default_rng(seed).standard_normal(n)
    try:
        vals = scipy.sparse.linalg.eigs(
            scipy.sparse.csr_matrix(W), k=1, which="LM", v0=v0, tol=tol,
            maxiter=max(1000, 20 * n), return_eigenvectors=False,
        )
        return float(np.abs(vals[0]))
    except (scipy.sparse.linalg.ArpackError, scipy.sparse.linalg.ArpackNoConvergence):
        return float(np.abs(np.linalg.eigvals(W)).max())


def build_reservoir(n: int, rho: float, sigma_in: float, density: float,
                    seed: int, input_dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Frozen reservoir tensors: sparse recurrent W rescaled to spectral
    radius rho, and dense input weights W_in = sigma_in * U(-1, 1).

    A degenerate draw (zero or nilpotent W) is regenerated from an
    incremented sub-seed, at most 10 times.
    """
    if n < 1:
        raise ModelError(f"reservoir size must be >= 1, got {n}")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    children = seq.spawn(12)
    for attempt in range(10):
        rng = np.random.default_rng(children[attempt])
        mask = rng.random((n, n)) < density
        W = np.where(mask, rng.uniform(-1.0, 1.0, (n, n)), 0.0)
        radius = spectral_radius(W, seed=seed)
        if radius > 1e-12:
            W *= rho / radius
            break
    else:
        raise ModelError(f"could not draw a usable reservoir of size {n} after 10 attempts")
    rng_in = np.random.default_rng(children[10])
    W_in = sigma_in * rng_in.uniform(-1.0, 1.0, (n, input_dim))
    return W, W_in


# --- layers ------------------------------------------------------------------


def _uniform_init(rng, shape, fan):
    k = 1.0 / np.sqrt(fan)
    return rng.uniform(-k, k, shape)


class AffineProjection:
    """Trainable linear map applied frame-wise (no nonlinearity)."""

    def __init__(self, input_dim, output_dim, rng):
        self.W = _uniform_init(rng, (output_dim, input_dim), input_dim)
        self.b = _uniform_init(rng, (output_dim,), input_dim)

    def named_parameters(self, prefix):
        return [(f"{prefix}.W", self.W, True), (f"{prefix}.b", self.b, True)]

    def forward(self, x):
        return x @ self.W.T + self.b, x

    def backward(self, dy, cache, need_dx):
        x = cache
        flat_dy = dy.reshape(-1, dy.shape[-1])
        grads = {"W": flat_dy.T @ x.reshape(-1, x.shape[-1]), "b": flat_dy.sum(axis=0)}
        dx = dy @ self.W if need_dx else None
        return dx, grads


class GRULayer:
    """Single-direction GRU with coupled retention (1 - u) and update u.

    Gate chunk order in the stacked weights is [reset, update, candidate].
    """

    def __init__(self, input_dim, hidden, rng):
        self.hidden = hidden
        self.W_ih = _uniform_init(rng, (3 * hidden, input_dim), hidden)
        self.W_hh = _uniform_init(rng, (3 * hidden, hidden), hidden)
        self.b_ih = _uniform_init(rng, (3 * hidden,), hidden)
        self.b_hh = _uniform_init(rng, (3 * hidden,), hidden)

    def named_parameters(self, prefix):
        return [(f"{prefix}.{n}", getattr(self, n), True)
                for n in ("W_ih", "W_hh", "b_ih", "b_hh")]

    def step(self, h_prev, z):
        """One update; returns (new_state, exposed_state, gate_values)."""
        h, gates = self._advance(h_prev[None, :], (z @ self.W_ih.T + self.b_ih)[None, :])
        r, u, n, _ = gates
        gate_values = {"retention": (1.0 - u)[0], "update": u[0], "output": np.ones_like(u[0]),
                       "reset": r[0], "candidate": n[0]}
        return h[0], h[0], gate_values

    def _advance(self, h_prev, gx):
        H = self.hidden
        gh = h_prev @ self.W_hh.T + self.b_hh
        r = sigmoid(gx[:, :H] + gh[:, :H])
        u = sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = np.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        h = (1.0 - u) * h_prev + u * n
        return h, (r, u, n, gh[:, 2 * H:])

    def forward(self, x):
        B, T, _ = x.shape
        H = self.hidden
        gx = x @ self.W_ih.T + self.b_ih
        hs = np.empty((B, T, H))
        h_prevs = np.empty((B, T, H))
        rs = np.empty((B, T, H)); us = np.empty((B, T, H))
        ns = np.empty((B, T, H)); ghn = np.empty((B, T, H))
        h = np.zeros((B, H))
        for t in range(T):
            h_prevs[:, t] = h
            h, (rs[:, t], us[:, t], ns[:, t], ghn[:, t]) = self._advance(h, gx[:, t])
            hs[:, t] = h
        return hs, (x, h_prevs, rs, us, ns, ghn)

    def backward(self, dh_out, cache, need_dx):
        x, h_prevs, rs, us, ns, ghn = cache
        B, T, _ = x.shape
        H = self.hidden
        dgx_all = np.empty((B, T, 3 * H))
        dgh_all = np.empty((B, T, 3 * H))
        dh_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh_out[:, t] + dh_next
            r, u, n, hp = rs[:, t], us[:, t], ns[:, t], h_prevs[:, t]
            dn = dh * u
            da_n = dn * (1.0 - n * n)
            dr = da_n * ghn[:, t]
            da_u = dh * (n - hp) * u * (1.0 - u)
            da_r = dr * r * (1.0 - r)
            dgx_all[:, t, :H] = da_r
            dgx_all[:, t, H:2 * H] = da_u
            dgx_all[:, t, 2 * H:] = da_n
            dgh_all[:, t, :H] = da_r
            dgh_all[:, t, H:2 * H] = da_u
            dgh_all[:, t, 2 * H:] = da_n * r
            dh_next = dh * (1.0 - u) + dgh_all[:, t] @ self.W_hh
        dgx_flat = dgx_all.reshape(B * T, 3 * H)
        dgh_flat = dgh_all.reshape(B * T, 3 * H)
        grads = {
            "W_ih": dgx_flat.T @ x.reshape(B * T, -1),
            "W_hh": dgh_flat.T @ h_prevs.reshape(B * T, H),
            "b_ih": dgx_flat.sum(axis=0),
            "b_hh": dgh_flat.sum(axis=0),
        }
        dx = dgx_all @ self.W_ih if need_dx else None
        return dx, grads


class LSTMLayer:
    """Single-direction LSTM; cell state is retained, hidden state exposed.

    Gate chunk order is [input, forget, candidate, output].
    """

    def __init__(self, input_dim, hidden, rng):
        self.hidden = hidden
        self.W_ih = _uniform_init(rng, (4 * hidden, input_dim), hidden)
        self.W_hh = _uniform_init(rng, (4 * hidden, hidden), hidden)
        self.b_ih = _uniform_init(rng, (4 * hidden,), hidden)
        self.b_hh = _uniform_init(rng, (4 * hidden,), hidden)

    def named_parameters(self, prefix):
        return [(f"{prefix}.{n}", getattr(self, n), True)
                for n in ("W_ih", "W_hh", "b_ih", "b_hh")]

    def _gates(self, h_prev, gx):
        H = self.hidden
        g = gx + h_prev @ self.W_hh.T + self.b_hh
        i = sigmoid(g[:, :H])
        f = sigmoid(g[:, H:2 * H])
        gc = np.tanh(g[:, 2 * H:3 * H])
        o = sigmoid(g[:, 3 * H:])
        return i, f, gc, o

    def step(self, state, z):
        h_prev, c_prev = state
        gx = (z @ self.W_ih.T + self.b_ih)[None, :]
        i, f, gc, o = self._gates(h_prev[None, :], gx)
        c = f * c_prev[None, :] + i * gc
        h = o * np.tanh(c)
        gate_values = {"retention": f[0], "update": i[0], "output": o[0], "candidate": gc[0]}
        return (h[0], c[0]), h[0], gate_values

    def forward(self, x):
        B, T, _ = x.shape
        H = self.hidden
        gx = x @ self.W_ih.T + self.b_ih
        hs = np.empty((B, T, H))
        h_prevs = np.empty((B, T, H)); c_prevs = np.empty((B, T, H))
        i_s = np.empty((B, T, H)); f_s = np.empty((B, T, H))
        g_s = np.empty((B, T, H)); o_s = np.empty((B, T, H))
        tc_s = np.empty((B, T, H))
        h = np.zeros((B, H)); c = np.zeros((B, H))
        for t in range(T):
            h_prevs[:, t] = h
            c_prevs[:, t] = c
            i, f, gc, o = self._gates(h, gx[:, t])
            c = f * c + i * gc
            tc = np.tanh(c)
            h = o * tc
            i_s[:, t] = i; f_s[:, t] = f; g_s[:, t] = gc; o_s[:, t] = o; tc_s[:, t] = tc
            hs[:, t] = h
        return hs, (x, h_prevs, c_prevs, i_s, f_s, g_s, o_s, tc_s)

    def backward(self, dh_out, cache, need_dx):
        x, h_prevs, c_prevs, i_s, f_s, g_s, o_s, tc_s = cache
        B, T, _ = x.shape
        H = self.hidden
        dg_all = np.empty((B, T, 4 * H))
        dh_next = np.zeros((B, H))
        dc_next = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh_out[:, t] + dh_next
            i, f, gc, o, tc, cp = i_s[:, t], f_s[:, t], g_s[:, t], o_s[:, t], tc_s[:, t], c_prevs[:, t]
            do = dh * tc
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dg_all[:, t, :H] = dc * gc * i * (1.0 - i)
            dg_all[:, t, H:2 * H] = dc * cp * f * (1.0 - f)
            dg_all[:, t, 2 * H:3 * H] = dc * i * (1.0 - gc * gc)
            dg_all[:, t, 3 * H:] = do * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dg_all[:, t] @ self.W_hh
        dg_flat = dg_all.reshape(B * T, 4 * H)
        grads = {
            "W_ih": dg_flat.T @ x.reshape(B * T, -1),
            "W_hh": dg_flat.T @ h_prevs.reshape(B * T, H),
            "b_ih": dg_flat.sum(axis=0),
            "b_hh": dg_flat.sum(axis=0).copy(),
        }
        dx = dg_all @ self.W_ih if need_dx else None
        return dx, grads


class ESNLayer:
    """Leaky-integrator reservoir with frozen random weights."""

    def __init__(self, input_dim, n, esn: EsnParams, seed):
        self.hidden = n
        self.leak = esn.leak
        self.W, self.W_in = build_reservoir(
            n, esn.spectral_radius, esn.input_scale, esn.density, seed, input_dim
        )

    def named_parameters(self, prefix):
        return [(f"{prefix}.W", self.W, False), (f"{prefix}.W_in", self.W_in, False)]

    def step(self, s_prev, z):
        s = self._advance(s_prev[None, :], (z @ self.W_in.T)[None, :])[0]
        a = np.full_like(s, self.leak)
        gate_values = {"retention": 1.0 - a, "update": a, "output": np.ones_like(s)}
        return s, s, gate_values

    def _advance(self, s_prev, gx):
        return (1.0 - self.leak) * s_prev + self.leak * np.tanh(gx + s_prev @ self.W.T)

    def forward(self, x):
        B, T, _ = x.shape
        gx = x @ self.W_in.T
        hs = np.empty((B, T, self.hidden))
        s = np.zeros((B, self.hidden))
        for t in range(T):
            s = self._advance(s, gx[:, t])
            hs[:, t] = s
        return hs, None

    def backward(self, dh_out, cache, need_dx):
        raise ModelError("reservoir weights are frozen; no gradients flow through an ESN layer")


class IdentityLayer:
    """Memory-less passthrough used by the linear baseline."""

    def __init__(self, input_dim):
        self.hidden = input_dim

    def named_parameters(self, prefix):
        return []

    def step(self, s_prev, z):
        zeros = np.zeros_like(z)
        gate_values = {"retention": zeros, "update": np.ones_like(z), "output": np.ones_like(z)}
        return z.copy(), z.copy(), gate_values

    def forward(self, x):
        return x, None

    def backward(self, dh_out, cache, need_dx):
        return (dh_out if need_dx else None), {}


_LAYER_KINDS = {"gru": GRULayer, "lstm": LSTMLayer}


class RecurrentBlock:
    """One stack level: a causal pass plus, when bidirectional, an anticausal
    pass with its own parameters; outputs are concatenated per frame."""

    def __init__(self, kind, input_dim, hidden, bidirectional, esn, rng_fwd, rng_bwd,
                 seed_fwd=0, seed_bwd=0):
        self.kind = kind
        self.bidirectional = bidirectional
        if kind == "linear":
            self.fwd = IdentityLayer(input_dim)
            self.bwd = IdentityLayer(input_dim) if bidirectional else None
        elif kind == "esn":
            self.fwd = ESNLayer(input_dim, hidden, esn, seed_fwd)
            self.bwd = ESNLayer(input_dim, hidden, esn, seed_bwd) if bidirectional else None
        else:
            layer_cls = _LAYER_KINDS[kind]
            self.fwd = layer_cls(input_dim, hidden, rng_fwd)
            self.bwd = layer_cls(input_dim, hidden, rng_bwd) if bidirectional else None

    @property
    def output_dim(self):
        return self.fwd.hidden * (2 if self.bidirectional else 1)

    def named_parameters(self, prefix):
        params = self.fwd.named_parameters(f"{prefix}.fwd")
        if self.bwd is not None:
            params += self.bwd.named_parameters(f"{prefix}.bwd")
        return params

    def forward(self, x):
        h_f, cache_f = self.fwd.forward(x)
        if self.bwd is None:
            return h_f, (cache_f, None)
        h_b_rev, cache_b = self.bwd.forward(x[:, ::-1])
        return np.concatenate([h_f, h_b_rev[:, ::-1]], axis=2), (cache_f, cache_b)

    def backward(self, dh, cache, need_dx):
        cache_f, cache_b = cache
        H = self.fwd.hidden
        if self.bwd is None:
            dx, grads_f = self.fwd.backward(dh, cache_f, need_dx)
            return dx, {"fwd": grads_f}
        dx_f, grads_f = self.fwd.backward(dh[:, :, :H], cache_f, need_dx)
        dx_b, grads_b = self.bwd.backward(
            np.ascontiguousarray(dh[:, ::-1, H:]), cache_b, need_dx
        )
        dx = dx_f + dx_b[:, ::-1] if need_dx else None
        return dx, {"fwd": grads_f, "bwd": grads_b}


class TemporalModule:
    """A configured stack of recurrent blocks with optional input projection
    and inter-block dropout."""

    def __init__(self, config: ModuleConfig):
        self.config = config
        kind = config.kind
        seq = np.random.SeedSequence(config.seed)
        children = seq.spawn(2 * config.layers + 1)
        self.projection = None
        rec_input = config.input_dim
        if config.input_proj is not None:
            if kind in ("linear", "esn"):
                raise ModelError(f"{kind} modules take raw features; input_proj must be None")
            self.projection = AffineProjection(
                config.input_dim, config.input_proj, np.random.default_rng(children[0])
            )
            rec_input = config.input_proj
        if kind in ("linear", "esn") and config.layers != 1:
            raise ModelError(f"{kind} modules are single-layer")
        bidirectional = config.direction == "bi"
        esn_seq = np.random.SeedSequence(config.esn.seed).spawn(2 * config.layers)
        self.blocks = []
        for layer in range(config.layers):
            block = RecurrentBlock(
                kind, rec_input, config.hidden, bidirectional, config.esn,
                rng_fwd=np.random.default_rng(children[1 + 2 * layer]),
                rng_bwd=np.random.default_rng(children[2 + 2 * layer]),
                seed_fwd=esn_seq[2 * layer], seed_bwd=esn_seq[2 * layer + 1],
            )
            self.blocks.append(block)
            rec_input = block.output_dim

    @property
    def kind(self):
        return self.config.kind

    @property
    def exposed_dim(self) -> int:
        return self.blocks[-1].output_dim

    @property
    def gate_spec(self) -> GateSpec:
        return GATE_SPECS[self.config.kind]

    def named_parameters(self):
        params = []
        if self.projection is not None:
            params += self.projection.named_parameters("proj")
        for i, block in enumerate(self.blocks):
            params += block.named_parameters(f"rec{i}")
        return params

    def has_trainable(self) -> bool:
        return any(trainable for _, _, trainable in self.named_parameters())

    @property
    def step_input_dim(self) -> int:
        """Dimension step() consumes: post-projection where one is configured."""
        return self.config.input_proj or self.config.input_dim

    def step(self, state, z_t, collect_gates=False):
        """Single-frame update for unidirectional modules.

        `z_t` is a post-projection input vector; `state` is a list with one
        entry per block (None selects the zero state). Returns
        (new_state, exposed_state) or, with collect_gates, an extra list of
        per-layer gate-value dicts.
        """
        if self.config.direction != "uni":
            raise ModelError("stepwise evaluation is only defined for unidirectional modules")
        z = np.asarray(z_t, dtype=np.float64)
        if z.shape != (self.step_input_dim,):
            raise ModelError(f"expected input of shape ({self.step_input_dim},), got {z.shape}")
        if state is None:
            state = [None] * len(self.blocks)
        new_state = []
        gates = []
        for block, layer_state in zip(self.blocks, state):
            if layer_state is None:
                layer_state = self._zero_state(block)
            layer_state, z, gate_values = block.fwd.step(layer_state, z)
            new_state.append(layer_state)
            gates.append(gate_values)
        if collect_gates:
            return new_state, z, gates
        return new_state, z

    @staticmethod
    def _zero_state(block):
        if isinstance(block.fwd, LSTMLayer):
            return (np.zeros(block.fwd.hidden), np.zeros(block.fwd.hidden))
        return np.zeros(block.fwd.hidden)

    def forward_batch(self, x, train_mode=False, rng=None):
        """Run the stack on (B, T, D) features; returns (B, T, exposed_dim)
        states and the cache used by backward_batch."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.config.input_dim:
            raise ModelError(
                f"expected features of shape (B, T, {self.config.input_dim}), got {x.shape}"
            )
        if not np.isfinite(x).all():
            raise ModelError("features contain non-finite values; refusing to run")
        dropout = self.config.dropout_p if train_mode else 0.0
        if dropout and rng is None:
            raise ModelError("training-mode forward with dropout requires an RNG")
        caches = {"proj": None, "blocks": [], "drops": []}
        h = x
        if self.projection is not None:
            h, caches["proj"] = self.projection.forward(h)
        for block in self.blocks:
            h, cache = block.forward(h)
            caches["blocks"].append(cache)
            if dropout > 0.0:
                mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
                h = h * mask
                caches["drops"].append(mask)
            else:
                caches["drops"].append(None)
        return h, caches

    def backward_batch(self, dh, caches):
        """Backpropagate (B, T, exposed_dim) state gradients; returns a dict
        of gradients for trainable tensors only."""
        grads = {}
        for i in range(len(self.blocks) - 1, -1, -1):
            mask = caches["drops"][i]
            if mask is not None:
                dh = dh * mask
            need_dx = i > 0 or self.projection is not None
            dh, block_grads = self.blocks[i].backward(dh, caches["blocks"][i], need_dx)
            for direction, layer_grads in block_grads.items():
                for name, g in layer_grads.items():
                    grads[f"rec{i}.{direction}.{name}"] = g
        if self.projection is not None:
            _, proj_grads = self.projection.backward(dh, caches["proj"], need_dx=False)
            grads["proj.W"] = proj_grads["W"]
            grads["proj.b"] = proj_grads["b"]
        return grads

    def frozen_hash(self) -> str:
        """SHA-256 over all frozen tensors (empty string when none exist)."""
        frozen = [(n, v) for n, v, trainable in self.named_parameters() if not trainable]
        if not frozen:
            return ""
        digest = hashlib.sha256()
        for name, value in sorted(frozen):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()


class Readout:
    """Shared per-frame linear + sigmoid head."""

    def __init__(self, exposed_dim, num_classes, seed=0):
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self.W = _uniform_init(rng, (num_classes, exposed_dim), exposed_dim)
        self.b = _uniform_init(rng, (num_classes,), exposed_dim)

    @property
    def num_classes(self):
        return self.W.shape[0]

    def named_parameters(self):
        return [("readout.W", self.W, True), ("readout.b", self.b, True)]

    def logits(self, h):
        return h @ self.W.T + self.b


def all_named_parameters(module: TemporalModule, readout: Readout):
    return [("module." + n, v, t) for n, v, t in module.named_parameters()] + \
        list(readout.named_parameters())


def count_trainable(module: TemporalModule, readout: Readout) -> int:
    return sum(v.size for _, v, trainable in all_named_parameters(module, readout) if trainable)


def forward(module: TemporalModule, readout: Readout, features: FeatureSequence | np.ndarray,
            train_mode: bool = False, rng=None) -> np.ndarray:
    """Frame-wise class posteriors, shape (T, C), strictly inside (0, 1)."""
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features)
    h, _ = module.forward_batch(frames[None], train_mode=train_mode, rng=rng)
    return sigmoid(readout.logits(h[0]))


def forward_batch(module: TemporalModule, readout: Readout, x: np.ndarray,
                  train_mode: bool = False, rng=None) -> np.ndarray:
    h, _ = module.forward_batch(x, train_mode=train_mode, rng=rng)
    return sigmoid(readout.logits(h))


def bce_loss_and_dlogits(logits, targets):
    """Mean binary cross-entropy over all elements, with its logit gradient."""
    loss = float(np.mean(softplus(logits) - targets * logits))
    dlogits = (sigmoid(logits) - targets) / logits.size
    return loss, dlogits


def backward(module: TemporalModule, readout: Readout, features, targets,
             train_mode: bool = False, rng=None):
    """Loss and exact gradients for every trainable tensor.

    `features` is (T, D) or (B, T, D); `targets` matches with a trailing
    class axis. Returns (loss, grads) with grads keyed like
    `all_named_parameters` names; frozen tensors never appear.
    """
    frames = features.frames if isinstance(features, FeatureSequence) else np.asarray(features)
    single = frames.ndim == 2
    x = frames[None] if single else frames
    y = np.asarray(targets, dtype=np.float64)
    if single:
        y = y[None]
    h, caches = module.forward_batch(x, train_mode=train_mode, rng=rng)
    if y.shape != h.shape[:2] + (readout.num_classes,):
        raise ModelError(f"targets of shape {y.shape} do not match posteriors "
                         f"{h.shape[:2] + (readout.num_classes,)}")
    logits = readout.logits(h)
    loss, dlogits = bce_loss_and_dlogits(logits, y)
    flat_dl = dlogits.reshape(-1, readout.num_classes)
    grads = {
        "readout.W": flat_dl.T @ h.reshape(-1, h.shape[-1]),
        "readout.b": flat_dl.sum(axis=0),
    }
    if module.has_trainable():
        dh = dlogits @ readout.W
        for name, g in module.backward_batch(dh, caches).items():
            grads["module." + name] = g
    return loss, grads


def config_hash(module_config: ModuleConfig, extra: dict | None = None) -> str:
    payload = {"module": module_config.to_dict(), "extra": extra or {}}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()
