"""Selective state-space model (S6) and the Mamba block.

Layout conventions: sequences are ``[..., N, D]`` (steps, channels); the
recurrent state is ``[..., D, S]`` with S the state size. ``A`` is stored as
``A_log`` so that ``A = -exp(A_log)`` is always strictly negative.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _sigmoid,
    _softplus,
    get_default_dtype,
    linear,
    mul,
    neg,
    rmsnorm,
    silu,
    softplus,
    texp,
)


# ---------------------------------------------------------------------------
# discretization and raw scans (numpy)
# ---------------------------------------------------------------------------

def discretize(A, B, delta, exact_zoh: bool = False):
    """Return (A_bar, B_bar) for step size ``delta``.

    A_bar = exp(delta * A). B_bar is delta * B (Euler) unless ``exact_zoh``,
    in which case B_bar = (exp(delta * A) - 1) / A * B.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    delta = np.asarray(delta)
    A_bar = np.exp(delta * A)
    if exact_zoh:
        return A_bar, np.expm1(delta * A) / A * B
    return A_bar, delta * B


def _check_scan_inputs(x, delta, A, B, C, D):
    if x.ndim < 2:
        raise ShapeError(f"scan input must be [..., N, D], got {x.shape}")
    if x.shape[-2] < 1:
        raise ShapeError("scan needs at least one step")
    if delta.shape != x.shape:
        raise ShapeError(f"delta shape {delta.shape} != x shape {x.shape}")
    d, s = A.shape
    if x.shape[-1] != d or D.shape != (d,):
        raise ShapeError(f"channel mismatch: x {x.shape}, A {A.shape}, D {D.shape}")
    if B.shape != x.shape[:-1] + (s,) or C.shape != B.shape:
        raise ShapeError(f"B/C must be [..., N, {s}], got {B.shape} and {C.shape}")
    for name, v in (("x", x), ("delta", delta), ("B", B), ("C", C)):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite values in scan input {name}")


def _scan_terms(x, delta, A, B, exact_zoh):
    # a, b: [..., N, D, S]
    dA = delta[..., None] * A
    a = np.exp(dA)
    if exact_zoh:
        f = np.expm1(dA) / A
    else:
        f = np.broadcast_to(delta[..., None], dA.shape)
    b = f * B[..., None, :] * x[..., None]
    return a, b, f


def _readout(hs, x, C, D):
    return np.einsum("...nds,...ns->...nd", hs, C) + D * x


def scan_sequential(x, delta, A, B, C, D, exact_zoh: bool = False, return_states: bool = False):
    """Reference recurrence h_n = A_bar_n h_{n-1} + B_bar_n x_n, y_n = <C_n, h_n> + D x_n."""
    _check_scan_inputs(x, delta, A, B, C, D)
    a, b, _ = _scan_terms(x, delta, A, B, exact_zoh)
    N = x.shape[-2]
    hs = np.empty_like(b)
    h = np.zeros(b.shape[:-3] + b.shape[-2:], dtype=b.dtype)
    for n in range(N):
        h = a[..., n, :, :] * h + b[..., n, :, :]
        hs[..., n, :, :] = h
    y = _readout(hs, x, C, D)
    return (y, hs) if return_states else y


def combine(first, second):
    """Compose two affine state maps: apply ``first`` then ``second``.

    (a2, b2) o (a1, b1) = (a2 * a1, a2 * b1 + b2)
    """
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def _prefix_scan(a, b, axis):
    """Inclusive Hillis-Steele scan of affine maps along ``axis`` (log2 passes)."""
    a = np.moveaxis(a, axis, 0).copy()
    b = np.moveaxis(b, axis, 0).copy()
    n = a.shape[0]
    k = 1
    while k < n:
        a_new, b_new = combine((a[:-k], b[:-k]), (a[k:], b[k:]))
        a[k:] = a_new
        b[k:] = b_new
        k *= 2
    return np.moveaxis(a, 0, axis), np.moveaxis(b, 0, axis)


def chunked_affine_scan(a, b, chunk: int = 64, h0=None):
    """All prefix states of h_n = a_n h_{n-1} + b_n, with a and b shaped [..., N, D, S].

    Each chunk is scanned independently (parallel across chunks); chunk
    carries are then folded in with one multiply-add per chunk.
    """
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    N = a.shape[-3]
    lead = a.shape[:-3]
    tail = a.shape[-2:]
    n_chunks = -(-N // chunk)
    pad = n_chunks * chunk - N
    if pad:
        widths = [(0, 0)] * len(lead) + [(0, pad), (0, 0), (0, 0)]
        a = np.pad(a, widths, constant_values=1)
        b = np.pad(b, widths)
    a = a.reshape(lead + (n_chunks, chunk) + tail)
    b = b.reshape(lead + (n_chunks, chunk) + tail)
    A_cum, hs = _prefix_scan(a, b, axis=-3)
    carry = np.zeros(lead + tail, dtype=b.dtype) if h0 is None else h0
    for c in range(n_chunks):
        if c > 0 or h0 is not None:
            hs[..., c, :, :, :] += A_cum[..., c, :, :, :] * carry[..., None, :, :]
        carry = hs[..., c, -1, :, :]
    hs = hs.reshape(lead + (n_chunks * chunk,) + tail)
    return hs[..., :N, :, :]


def scan_parallel(x, delta, A, B, C, D, exact_zoh: bool = False, chunk: int = 64, return_states: bool = False):
    _check_scan_inputs(x, delta, A, B, C, D)
    a, b, _ = _scan_terms(x, delta, A, B, exact_zoh)
    hs = chunked_affine_scan(a, b, chunk)
    y = _readout(hs, x, C, D)
    return (y, hs) if return_states else y


# ---------------------------------------------------------------------------
# differentiable selective scan
# ---------------------------------------------------------------------------

def selective_scan(
    x: Tensor,
    delta: Tensor,
    A: Tensor,
    B: Tensor,
    C: Tensor,
    D: Tensor,
    method: str = "parallel",
    exact_zoh: bool = False,
    chunk: int = 64,
) -> Tensor:
    """Differentiable fused scan; the backward pass runs the adjoint recurrence in reverse."""
    if method == "parallel":
        y, hs = scan_parallel(x.data, delta.data, A.data, B.data, C.data, D.data, exact_zoh, chunk, True)
    elif method == "sequential":
        y, hs = scan_sequential(x.data, delta.data, A.data, B.data, C.data, D.data, exact_zoh, True)
    else:
        raise ValueError(f"unknown scan method {method!r}")

    def bw(gy):
        xd, dd, Ad, Bd, Cd = x.data, delta.data, A.data, B.data, C.data
        a, _, f = _scan_terms(xd, dd, Ad, Bd, exact_zoh)
        N = xd.shape[-2]
        gh_all = np.empty_like(hs)
        gh = np.zeros_like(hs[..., 0, :, :])
        for n in range(N - 1, -1, -1):
            if n + 1 < N:
                gh = gh * a[..., n + 1, :, :]
            gh = gh + gy[..., n, :, None] * Cd[..., n, None, :]
            gh_all[..., n, :, :] = gh
        h_prev = np.zeros_like(hs)
        h_prev[..., 1:, :, :] = hs[..., :-1, :, :]

        lead_axes = tuple(range(xd.ndim - 1))  # batch + step axes
        ga = gh_all * h_prev
        gaa = ga * a  # d/d(delta*A)
        gC = np.einsum("...nd,...nds->...ns", gy, hs)
        Bx = Bd[..., None, :] * xd[..., None]
        gf = gh_all * Bx
        gx = np.einsum("...nds,...nds,...ns->...nd", gh_all, f, Bd) + D.data * gy
        gB = np.einsum("...nds,...nds,...nd->...ns", gh_all, f, xd)
        gdelta = (gaa * Ad).sum(axis=-1)
        gA = (gaa * dd[..., None]).sum(axis=lead_axes)
        if exact_zoh:
            gdelta = gdelta + (gf * a).sum(axis=-1)
            dA = dd[..., None] * Ad
            gA = gA + (gf * (dA * a - np.expm1(dA)) / (Ad * Ad)).sum(axis=lead_axes)
        else:
            gdelta = gdelta + gf.sum(axis=-1)
        gD = (gy * xd).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gdelta, gA, gB, gC, gD

    return Tensor.from_op(y, (x, delta, A, B, C, D), bw)


# ---------------------------------------------------------------------------
# Mamba block
# ---------------------------------------------------------------------------

@dataclass
class MambaConfig:
    d_model: int = 64
    d_state: int = 16
    expand: int = 2
    d_conv: int = 4
    dt_rank: Optional[int] = None
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    exact_zoh: bool = False
    scan_chunk: int = 64
    norm_eps: float = 1e-5

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    @property
    def rank(self) -> int:
        return self.dt_rank or math.ceil(self.d_model / 16)

    def to_dict(self) -> dict:
        return asdict(self)


PARAM_NAMES = (
    "norm.weight",
    "in_proj.weight",
    "conv.weight",
    "conv.bias",
    "x_proj.weight",
    "dt_proj.weight",
    "dt_proj.bias",
    "A_log",
    "D",
    "out_proj.weight",
)


def init_mamba_params(cfg: MambaConfig, rng: np.random.Generator) -> dict:
    dt = get_default_dtype()
    dm, di, S, R, w = cfg.d_model, cfg.d_inner, cfg.d_state, cfg.rank, cfg.d_conv

    def uni(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    dt_init = np.exp(rng.uniform(math.log(cfg.dt_min), math.log(cfg.dt_max), size=di))
    inv_softplus = dt_init + np.log(-np.expm1(-dt_init))
    p = {
        "norm.weight": np.ones(dm),
        "in_proj.weight": uni((2 * di, dm), dm),
        "conv.weight": uni((di, w), w),
        "conv.bias": uni((di,), w),
        "x_proj.weight": uni((R + 2 * S, di), di),
        "dt_proj.weight": uni((di, R), R),
        "dt_proj.bias": inv_softplus,
        "A_log": np.log(np.tile(np.arange(1, S + 1, dtype=np.float64), (di, 1))),
        "D": np.ones(di),
        "out_proj.weight": uni((dm, di), di),
    }
    return {k: Tensor(v, requires_grad=True, name=k, dtype=dt) for k, v in p.items()}


def causal_conv1d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along steps: x [..., N, D], weight [D, W]."""
    N, Dm = x.shape[-2:]
    W = weight.shape[1]
    if weight.shape[0] != Dm:
        raise ShapeError(f"causal_conv1d channel mismatch: {x.shape} vs {weight.shape}")
    widths = [(0, 0)] * (x.ndim - 2) + [(W - 1, 0), (0, 0)]
    xp = np.pad(x.data, widths)
    out = np.broadcast_to(bias.data, x.shape).copy()
    for k in range(W):
        out += xp[..., k:k + N, :] * weight.data[:, k]

    def bw(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for k in range(W):
            gxp[..., k:k + N, :] += g * weight.data[:, k]
            gw[:, k] = (g * xp[..., k:k + N, :]).reshape(-1, Dm).sum(axis=0)
        gb = g.reshape(-1, Dm).sum(axis=0)
        return gxp[..., W - 1:, :], gw, gb

    return Tensor.from_op(out, (x, weight, bias), bw)


@dataclass
class SSMParams:
    """Selective-SSM parameters for one layer; B, C and delta come from projections of x."""

    x_proj: Tensor
    dt_proj_w: Tensor
    dt_proj_b: Tensor
    A_log: Tensor
    D: Tensor
    d_state: int

    @classmethod
    def from_block(cls, p: dict, d_state: int) -> "SSMParams":
        return cls(p["x_proj.weight"], p["dt_proj.weight"], p["dt_proj.bias"], p["A_log"], p["D"], d_state)

    @property
    def rank(self) -> int:
        return self.dt_proj_w.shape[1]


def _ssm_inputs(x: Tensor, sp: SSMParams):
    R, S = sp.rank, sp.d_state
    dbc = linear(x, sp.x_proj)
    delta = softplus(linear(dbc[..., :R], sp.dt_proj_w, sp.dt_proj_b))
    A = neg(texp(sp.A_log))
    return delta, A, dbc[..., R:R + S], dbc[..., R + S:R + 2 * S]


def selective_scan_sequential(x: Tensor, sp: SSMParams, exact_zoh: bool = False) -> Tensor:
    delta, A, B, C = _ssm_inputs(x, sp)
    return selective_scan(x, delta, A, B, C, sp.D, method="sequential", exact_zoh=exact_zoh)


def selective_scan_parallel(x: Tensor, sp: SSMParams, exact_zoh: bool = False, chunk: int = 64) -> Tensor:
    delta, A, B, C = _ssm_inputs(x, sp)
    return selective_scan(x, delta, A, B, C, sp.D, method="parallel", exact_zoh=exact_zoh, chunk=chunk)


def mamba_block_forward(u: Tensor, p: dict, cfg: MambaConfig, method: str = "parallel") -> Tensor:
    """Pre-norm Mamba block with residual: u + out_proj(scan(silu(conv(x))) * silu(z))."""
    if u.shape[-1] != cfg.d_model:
        raise ShapeError(f"mamba block expects d_model={cfg.d_model}, got input {u.shape}")
    di = cfg.d_inner
    hn = rmsnorm(u, p["norm.weight"], cfg.norm_eps)
    xz = linear(hn, p["in_proj.weight"])
    x = silu(causal_conv1d(xz[..., :di], p["conv.weight"], p["conv.bias"]))
    z = xz[..., di:]
    delta, A, B, C = _ssm_inputs(x, SSMParams.from_block(p, cfg.d_state))
    y = selective_scan(x, delta, A, B, C, p["D"], method=method, exact_zoh=cfg.exact_zoh, chunk=cfg.scan_chunk)
    return u + linear(mul(y, silu(z)), p["out_proj.weight"])


# ---------------------------------------------------------------------------
# streaming (single-step) inference
# ---------------------------------------------------------------------------

class SSMState:
    """Per-layer recurrent state: SSM state h [..., D, S] and the conv tail [..., W-1, D]."""

    __slots__ = ("h", "conv")

    def __init__(self, cfg: MambaConfig, batch_shape: tuple = (), dtype=None):
        dtype = dtype or get_default_dtype()
        self.h = np.zeros(batch_shape + (cfg.d_inner, cfg.d_state), dtype=dtype)
        self.conv = np.zeros(batch_shape + (cfg.d_conv - 1, cfg.d_inner), dtype=dtype)

    @property
    def nbytes(self) -> int:
        return self.h.nbytes + self.conv.nbytes

    def copy(self) -> "SSMState":
        new = SSMState.__new__(SSMState)
        new.h = self.h.copy()
        new.conv = self.conv.copy()
        return new


def _rms(v, w, eps):
    return v / np.sqrt((v * v).mean(axis=-1, keepdims=True) + eps) * w


def _silu(v):
    return v * _sigmoid(v)


def mamba_step(state: SSMState, u: np.ndarray, p: dict, cfg: MambaConfig):
    """Advance one step; returns (new_state, y). ``p`` maps names to Tensors or arrays."""
    g = {k: (v.data if isinstance(v, Tensor) else v) for k, v in p.items()}
    di, S = cfg.d_inner, cfg.d_state
    R = g["dt_proj.weight"].shape[1]
    if u.shape[-1] != cfg.d_model:
        raise ShapeError(f"mamba_step expects d_model={cfg.d_model}, got {u.shape}")
    if state.h.shape[-2:] != (di, S) or state.conv.shape[-2:] != (cfg.d_conv - 1, di):
        raise ShapeError("SSMState shape does not match block configuration")
    xz = _rms(u, g["norm.weight"], cfg.norm_eps) @ g["in_proj.weight"].T
    x, z = xz[..., :di], xz[..., di:]
    window = np.concatenate([state.conv, x[..., None, :]], axis=-2)  # [..., W, D]
    xc = _silu((window * g["conv.weight"].T).sum(axis=-2) + g["conv.bias"])
    dbc = xc @ g["x_proj.weight"].T
    delta = _softplus(dbc[..., :R] @ g["dt_proj.weight"].T + g["dt_proj.bias"])
    B, C = dbc[..., R:R + S], dbc[..., R + S:R + 2 * S]
    A = -np.exp(g["A_log"])
    a_bar, b_bar = discretize(A, B[..., None, :], delta[..., None], cfg.exact_zoh)
    new = SSMState.__new__(SSMState)
    new.h = a_bar * state.h + b_bar * xc[..., None]
    new.conv = window[..., 1:, :]
    y = (new.h * C[..., None, :]).sum(axis=-1) + g["D"] * xc
    y = y * _silu(z)
    return new, u + y @ g["out_proj.weight"].T


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

class MambaBackbone:
    """Stack of residual Mamba blocks followed by a final RMS norm."""

    def __init__(self, cfg: MambaConfig, n_layers: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_layers = n_layers
        self.layers = [init_mamba_params(cfg, rng) for _ in range(n_layers)]
        self.norm_f = Tensor(np.ones(cfg.d_model), requires_grad=True, name="norm_f.weight")

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for k in PARAM_NAMES:
                out[f"{prefix}layers.{i}.{k}"] = layer[k]
        out[f"{prefix}norm_f.weight"] = self.norm_f
        return out

    def forward(self, u: Tensor, method: str = "parallel") -> Tensor:
        for layer in self.layers:
            u = mamba_block_forward(u, layer, self.cfg, method)
        return rmsnorm(u, self.norm_f, self.cfg.norm_eps)

    def init_state(self, batch_shape: tuple = ()) -> list:
        return [SSMState(self.cfg, batch_shape) for _ in self.layers]

    def step(self, states: list, u: np.ndarray):
        if len(states) != len(self.layers):
            raise ShapeError(f"expected {len(self.layers)} layer states, got {len(states)}")
        new_states = []
        for st, layer in zip(states, self.layers):
            st, u = mamba_step(st, u, layer, self.cfg)
            new_states.append(st)
        return new_states, _rms(u, self.norm_f.data, self.cfg.norm_eps)
