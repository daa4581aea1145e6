"""Hand-derived reverse-mode gradients for the block, checked against
central finite differences.

There is no autodiff engine here: the forward pass records its
intermediates onto a tape and ``salad_loss_grads`` walks the chain
backwards with explicit formulas. The loss is the sum of squares of the
block output, which is enough to exercise every parameter path.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .block import SaladParams, gate_pre_activations, salad_forward
from .errors import StateError
from .linear_attention import EPSILON, RopeConfig, rope3d_rotate
from .masking import LatentGrid, MaskPlan
from .numerics import Array, matmul, relu, sigmoid, tanh

FD_STEP = 1e-5
FD_TOL = 1e-6


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of one parameter's finite-difference comparison."""

    param: str
    analytic_norm: float
    max_rel_err: float
    passed: bool
    step: float

    def to_dict(self) -> dict:
        return {
            "param": self.param,
            "analytic_norm": self.analytic_norm,
            "max_rel_err": self.max_rel_err,
            "passed": self.passed,
            "step": self.step,
        }

    @staticmethod
    def from_dict(d: dict) -> "GradCheckReport":
        return GradCheckReport(
            param=d["param"],
            analytic_norm=d["analytic_norm"],
            max_rel_err=d["max_rel_err"],
            passed=d["passed"],
            step=d["step"],
        )


# ---------------------------------------------------------------------------
# Primitive backward rules


def matmul_backward(a: Array, b: Array, g: Array) -> tuple[Array, Array]:
    """Gradients of C = A B given upstream dC: (dC B^T, A^T dC)."""
    return matmul(g, np.asarray(b).T), matmul(np.asarray(a).T, g)


def softmax_masked_backward(y: Array, mask: Array, gy: Array) -> Array:
    """Jacobian-vector product of the masked softmax.

    ``y`` is the forward output. Row rule on unmasked entries:
    y * (g - sum(y * g)); masked logits receive exactly zero because the
    exclusion is structural, not a large negative addend.
    """
    dot = np.sum(y * gy, axis=1, keepdims=True)
    return np.where(mask, y * (gy - dot), 0.0)


def elementwise_backward(op: str, x: Array, gy: Array) -> Array:
    x = np.asarray(x, dtype=np.float64)
    if op == "relu":
        return gy * (x > 0)
    if op == "sigmoid":
        s = sigmoid(x)
        return gy * s * (1.0 - s)
    if op == "tanh":
        t = tanh(x)
        return gy * (1.0 - t * t)
    raise ValueError(f"unknown elementwise op {op!r}")


def rope3d_backward(gy: Array, coords: Array, cfg: RopeConfig) -> Array:
    """Transpose of the rotary map: rotate the cotangent by negated angles."""
    return rope3d_rotate(gy, -np.asarray(coords), cfg)


def relu_linear_attention_backward(
    q: Array, k: Array, v: Array, go: Array
) -> tuple[Array, Array, Array]:
    """Gradients of the streaming ReLU linear attention output.

    Quotient rule through O_i = f_i H / (f_i Z + eps) with f = relu(Q),
    H = relu(K)^T V, Z = relu(K)^T 1, then the ReLU gates route the
    feature gradients back onto Q and K.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    fq = relu(q)
    fk = relu(k)
    h = matmul(fk.T, v)
    z = fk.sum(axis=0)
    num = matmul(fq, h)
    den = matmul(fq, z[:, None])[:, 0] + EPSILON

    dnum = go / den[:, None]
    dden = -np.sum(num * go, axis=1) / (den * den)
    dfq = matmul(dnum, h.T) + dden[:, None] * z[None, :]
    dh = matmul(fq.T, dnum)
    dz = matmul(fq.T, dden[:, None])[:, 0]
    dfk = matmul(v, dh.T) + dz[None, :]
    dv = matmul(fk, dh)
    return dfq * (q > 0), dfk * (k > 0), dv


def gate_mean_backward(
    x: Array,
    gate_w: Array,
    gate_b: float,
    activation: str,
    g_up: float,
) -> tuple[Array, Array, float]:
    """Gradients of the token-mean gate scalar w.r.t. X, gate_w, gate_b."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(gate_w, dtype=np.float64).reshape(-1)
    n = x.shape[0]
    u = gate_pre_activations(x, w, gate_b)
    dact = np.full(n, g_up / n)
    du = elementwise_backward(activation, u, dact)
    dw = matmul(x.T, du[:, None])[:, 0]
    db = float(du.sum())
    dx = du[:, None] * w[None, :]
    return dx, dw, db


# ---------------------------------------------------------------------------
# Whole-block backward


def salad_loss_grads(
    x: Array,
    params: SaladParams,
    plan: MaskPlan,
    grid: LatentGrid,
    rope_cfg: RopeConfig | None = None,
) -> tuple[float, dict[str, Array | float]]:
    """Sum-of-squares loss of the block output and gradients for every
    parameter (and the input).

    Dropped blocks have exactly-zero proj and gate gradients; constant or
    overridden gates detach the gate parameters and report the scalar's
    own gradient under the key "lambda"; a detached gate keeps its
    parameter gradients but sends nothing back into X.
    """
    tape: dict = {}
    out, _ = salad_forward(x, params, plan, grid, rope_cfg, _tape=tape)
    if not tape:
        raise StateError("forward pass recorded no tape")
    loss = float(np.sum(out * out))
    grid = tape["grid"]
    coords = grid.coords()
    cfg = tape["rope_cfg"]
    slices = tape["slices"]
    shared = params.variant == "shared"

    dfinal = 2.0 * out
    dwo = matmul(tape["fused"].T, dfinal)
    dfused = matmul(dfinal, tape["wo"].T)

    zeros_like = lambda a: np.zeros_like(np.asarray(a, dtype=np.float64))
    grads: dict[str, Array | float] = {
        "proj": zeros_like(params.proj),
        "gate_w": zeros_like(params.gate_w),
        "gate_b": 0.0,
    }

    do_s = dfused
    do_l = None
    dx = np.zeros_like(x, dtype=np.float64)
    if not params.dropped:
        gate_applied = tape["gate_applied"]
        dproj_out = gate_applied * dfused
        dg_applied = float(np.sum(tape["proj_out"] * dfused))
        grads["proj"] = matmul(tape["o_l"].T, dproj_out)
        do_l = matmul(dproj_out, np.asarray(params.proj).T)
        if params.lambda_override is not None or params.gate_activation == "constant":
            grads["lambda"] = dg_applied
        else:
            dx_gate, dw_gate, db_gate = gate_mean_backward(
                x, params.gate_w, params.gate_b, params.gate_activation, dg_applied
            )
            grads["gate_w"] = dw_gate
            grads["gate_b"] = db_gate
            if not params.gate_detached:
                dx += dx_gate

    dq_rot = np.zeros_like(tape["q_rot"])
    dk_rot = np.zeros_like(tape["k_rot"])
    dv = np.zeros_like(tape["v"])
    dql_rot = np.zeros_like(tape["ql_rot"])
    dkl_rot = np.zeros_like(tape["kl_rot"])
    dvl = np.zeros_like(tape["vl"])

    for head, s in enumerate(slices):
        ht = tape["heads"][head]
        doh = do_s[:, s]
        perm = ht["perm"]
        do2 = doh[perm] if perm is not None else doh
        attn, v2 = ht["attn"], ht["v2"]
        dattn = matmul(do2, v2.T)
        dv2 = matmul(attn.T, do2)
        dlogits = softmax_masked_backward(attn, ht["mask"], dattn)
        dq2 = matmul(dlogits, ht["k2"]) * tape["inv_sqrt_d"]
        dk2 = matmul(dlogits.T, ht["q2"]) * tape["inv_sqrt_d"]
        if perm is not None:
            for dst, src in ((dq_rot, dq2), (dk_rot, dk2), (dv, dv2)):
                buf = np.zeros_like(src)
                buf[perm] = src
                dst[:, s] += buf
        else:
            dq_rot[:, s] += dq2
            dk_rot[:, s] += dk2
            dv[:, s] += dv2

        if do_l is not None:
            dql_h, dkl_h, dvl_h = relu_linear_attention_backward(
                tape["ql_rot"][:, s], tape["kl_rot"][:, s], tape["vl"][:, s], do_l[:, s]
            )
            dql_rot[:, s] += dql_h
            dkl_rot[:, s] += dkl_h
            dvl[:, s] += dvl_h

    if shared:
        dq_rot += dql_rot
        dk_rot += dkl_rot
        dv += dvl

    dq_pre = np.concatenate([rope3d_backward(dq_rot[:, s], coords, cfg) for s in slices], axis=1)
    dk_pre = np.concatenate([rope3d_backward(dk_rot[:, s], coords, cfg) for s in slices], axis=1)

    grads["w_q"] = matmul(x.T, dq_pre)
    grads["w_k"] = matmul(x.T, dk_pre)
    grads["w_v"] = matmul(x.T, dv)
    grads["w_o"] = dwo
    dx += matmul(dq_pre, tape["wq"].T)
    dx += matmul(dk_pre, tape["wk"].T)
    dx += matmul(dv, tape["wv"].T)

    if not shared:
        dql_pre = np.concatenate([rope3d_backward(dql_rot[:, s], coords, cfg) for s in slices], axis=1)
        dkl_pre = np.concatenate([rope3d_backward(dkl_rot[:, s], coords, cfg) for s in slices], axis=1)
        grads["w_q_lin"] = matmul(x.T, dql_pre)
        grads["w_k_lin"] = matmul(x.T, dkl_pre)
        grads["w_v_lin"] = matmul(x.T, dvl)
        dx += matmul(dql_pre, np.asarray(params.w_q_lin).T)
        dx += matmul(dkl_pre, np.asarray(params.w_k_lin).T)
        dx += matmul(dvl, np.asarray(params.w_v_lin).T)

    for name, u in params.lora.items():
        dmerged = grads[f"w_{name}"]
        grads[f"lora_{name}.a"] = u.scale * matmul(dmerged, u.b).T
        grads[f"lora_{name}.b"] = u.scale * matmul(u.a, dmerged).T

    grads["x"] = dx
    return loss, grads


# ---------------------------------------------------------------------------
# Finite-difference verification


def _with_param(x: Array, params: SaladParams, name: str, value: Array):
    """(x, params) with the named parameter replaced by ``value``."""
    if name == "x":
        return value, params
    if name == "gate_b":
        return x, dataclasses.replace(params, gate_b=float(value.reshape(())))
    if name.startswith("lora_"):
        target, fld = name[len("lora_"):].split(".")
        u = params.lora[target]
        lora = dict(params.lora)
        lora[target] = dataclasses.replace(u, **{fld: value})
        return x, dataclasses.replace(params, lora=lora)
    return x, dataclasses.replace(params, **{name: value})


def _param_value(x: Array, params: SaladParams, name: str) -> Array:
    if name == "x":
        return np.asarray(x, dtype=np.float64)
    if name == "gate_b":
        return np.array(params.gate_b, dtype=np.float64)
    if name.startswith("lora_"):
        target, fld = name[len("lora_"):].split(".")
        return np.asarray(getattr(params.lora[target], fld), dtype=np.float64)
    return np.asarray(getattr(params, name), dtype=np.float64)


def checkable_params(params: SaladParams) -> list[str]:
    names = ["x", "w_q", "w_k", "w_v", "w_o", "proj", "gate_w", "gate_b"]
    if params.variant == "non_shared":
        names += ["w_q_lin", "w_k_lin", "w_v_lin"]
    for target in sorted(params.lora):
        names += [f"lora_{target}.a", f"lora_{target}.b"]
    return names


def fd_gradient(
    x: Array,
    params: SaladParams,
    plan: MaskPlan,
    grid: LatentGrid,
    rope_cfg: RopeConfig | None,
    name: str,
    step: float = FD_STEP,
) -> Array:
    """Central-difference gradient of the sum-of-squares loss."""
    base = _param_value(x, params, name).copy()
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    for i in range(flat.size):
        for sign in (+1.0, -1.0):
            bumped = flat.copy()
            bumped[i] += sign * step
            x2, p2 = _with_param(x, params, name, bumped.reshape(base.shape))
            y, _ = salad_forward(x2, p2, plan, grid, rope_cfg)
            out[i] += sign * float(np.sum(y * y))
    return (out / (2.0 * step)).reshape(base.shape)


def max_rel_err(fd: Array, an: Array) -> float:
    fd = np.asarray(fd, dtype=np.float64)
    an = np.asarray(an, dtype=np.float64)
    err = np.abs(fd - an) / (np.abs(fd) + np.abs(an) + 1e-12)
    return float(err.max()) if err.size else 0.0


def gradcheck_salad(
    x: Array,
    params: SaladParams,
    plan: MaskPlan,
    grid: LatentGrid,
    rope_cfg: RopeConfig | None = None,
    step: float = FD_STEP,
    tol: float = FD_TOL,
    names: list[str] | None = None,
) -> list[GradCheckReport]:
    """Compare every analytic gradient against central differences.

    Sizes should stay small (N <= 64, head_dim <= 16); the finite
    differences run two forward passes per parameter element.
    """
    _, grads = salad_loss_grads(x, params, plan, grid, rope_cfg)
    reports = []
    for name in names if names is not None else checkable_params(params):
        an = np.asarray(grads[name], dtype=np.float64)
        fd = fd_gradient(x, params, plan, grid, rope_cfg, name, step)
        err = max_rel_err(fd, an)
        reports.append(
            GradCheckReport(
                param=name,
                analytic_norm=float(math.sqrt(np.sum(an * an))),
                max_rel_err=err,
                passed=err < tol,
                step=step,
            )
        )
    return reports
