"""The hybrid attention block: sparse branch + gated linear branch.

Forward pass over input X of shape (N, D):

    Q, K, V = X Wq, X Wk, X Wv          (LoRA-merged when adapters present)
    rotate Q, K by the 3-axis rotary embedding (per head)
    O_s  = per-head masked softmax attention under the plan
    O_l  = per-head streaming ReLU linear attention
    gate = mean over tokens of act(x_i . gate_w + gate_b), one scalar
    out  = (O_s + gate * (O_l @ proj)) @ Wo

``proj`` defaults to all-zeros, which makes the whole block collapse
exactly onto the sparse-only path; training can therefore start from the
plain sparse model. The non-shared variant derives the linear branch's
Q/K/V from its own projection matrices instead of sharing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, StateError
from .linear_attention import (
    RopeConfig,
    linear_attention_map,
    linear_attention_streaming,
    rope3d_apply,
)
from .masking import LatentGrid, MaskPlan, Window, realize_head_mask
from .numerics import Array, matmul, relu, sigmoid, softmax_masked, tanh

GATE_ACTIVATIONS = ("sigmoid", "tanh", "relu", "constant")
VARIANTS = ("shared", "non_shared")


@dataclass(frozen=True)
class LoraUpdate:
    """Low-rank additive update: the merged weight is W + scale * (b a)^T."""

    a: Array  # (r, D)
    b: Array  # (H, r)
    scale: float = 1.0


@dataclass
class SaladParams:
    """All weights of one block.

    ``w_q/w_k/w_v`` are (D, H), ``w_o`` is (H, D), ``proj`` is (H, H) and
    zero unless loaded, ``gate_w`` is (D,). ``lora`` maps "q"/"k"/"v"/"o"
    to adapters merged into the dense weights before the forward pass.
    ``lambda_override`` replaces the computed gate scalar at inference;
    ``dropped`` removes the linear branch entirely; ``gate_detached``
    keeps the gate value in the forward pass but blocks its gradient path
    back into X.
    """

    w_q: Array
    w_k: Array
    w_v: Array
    w_o: Array
    proj: Array
    gate_w: Array
    gate_b: float
    lora: dict[str, LoraUpdate] = field(default_factory=dict)
    gate_activation: str = "sigmoid"
    gate_constant: float = 0.5
    lambda_override: float | None = None
    dropped: bool = False
    gate_detached: bool = False
    variant: str = "shared"
    w_q_lin: Array | None = None
    w_k_lin: Array | None = None
    w_v_lin: Array | None = None

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def channels(self) -> int:
        return self.w_q.shape[1]

    def validate(self, grid: LatentGrid) -> None:
        d, h = self.d_model, self.channels
        expect = {
            "w_q": (d, h), "w_k": (d, h), "w_v": (d, h),
            "w_o": (h, d), "proj": (h, h), "gate_w": (d,),
        }
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.variant == "non_shared":
            for name in ("w_q_lin", "w_k_lin", "w_v_lin"):
                if getattr(self, name) is None:
                    raise ConfigError(f"non_shared variant requires {name}")
                expect[name] = (d, h)
        for name, shape in expect.items():
            got = np.asarray(getattr(self, name)).shape
            if got != shape:
                raise ConfigError(f"{name} has shape {got}, expected {shape}")
        if self.gate_activation not in GATE_ACTIVATIONS:
            raise ConfigError(f"unknown gate activation {self.gate_activation!r}")
        for key, u in self.lora.items():
            if key not in ("q", "k", "v", "o"):
                raise ConfigError(f"unknown lora target {key!r}")
            base = {"q": (d, h), "k": (d, h), "v": (d, h), "o": (h, d)}[key]
            r = u.a.shape[0]
            if u.a.shape != (r, base[0]) or u.b.shape != (base[1], r):
                raise ConfigError(
                    f"lora[{key}] shapes a={u.a.shape} b={u.b.shape} do not fit weight {base}"
                )
        if grid.channels != h:
            raise ConfigError(f"grid supplies {grid.channels} channels but weights carry {h}")


def lora_apply(w: Array, a: Array, b: Array, scale: float = 1.0) -> Array:
    """Merge a low-rank update into a dense weight: W + scale * (b a)^T.

    Composed so that x @ merged == x @ W + scale * (x @ a^T) @ b^T; the
    update's rank is at most the adapter rank.
    """
    w = np.asarray(w, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != w.shape[0] or b.shape[0] != w.shape[1] or a.shape[0] != b.shape[1]:
        raise DimensionError(f"lora shapes a={a.shape} b={b.shape} do not fit weight {w.shape}")
    return w + scale * matmul(b, a).T


def lora_apply_unmerged(x: Array, w: Array, a: Array, b: Array, scale: float = 1.0) -> Array:
    """Adapter applied as two extra matmuls: x W + scale (x a^T) b^T.

    Numerically interchangeable with multiplying by the merged weight;
    kept for gradient work where the factors stay separate.
    """
    return matmul(x, w) + scale * matmul(matmul(x, np.asarray(a, dtype=np.float64).T),
                                         np.asarray(b, dtype=np.float64).T)


def merged_weight(params: SaladParams, name: str) -> Array:
    """Dense weight with any adapter for ``name`` ("q"/"k"/"v"/"o") merged in."""
    w = getattr(params, f"w_{name}")
    u = params.lora.get(name)
    if u is None:
        return np.asarray(w, dtype=np.float64)
    return lora_apply(w, u.a, u.b, u.scale)


def added_param_count(
    variant: str,
    d_model: int,
    channels: int,
    with_proj: bool = True,
    with_gate: bool = True,
) -> int:
    """Parameters added on top of the pretrained attention weights.

    shared:     proj contributes channels * d_model, the gate contributes
                d_model + 1 (the scalar bias is counted).
    non_shared: 4 * channels * d_model covers the branch's own Q/K/V plus
                proj; the gate add-on is the same.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    gate = (d_model + 1) if with_gate else 0
    if variant == "non_shared":
        return 4 * channels * d_model + gate
    return (channels * d_model if with_proj else 0) + gate


def gate_pre_activations(x: Array, gate_w: Array, gate_b: float) -> Array:
    """Per-token affine gate inputs x_i . gate_w + gate_b, shape (N,)."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(gate_w, dtype=np.float64).reshape(-1)
    return matmul(x, w[:, None])[:, 0] + gate_b


def compute_gate(
    x: Array,
    gate_w: Array,
    gate_b: float,
    activation: str = "sigmoid",
    constant: float = 0.5,
) -> float:
    """Scalar gate: token mean of the activated per-token projections.

    With ``constant`` activation the input is ignored and the fixed value
    is returned, which turns the fused output into an affine function of
    that value.
    """
    if activation == "constant":
        return float(constant)
    u = gate_pre_activations(x, gate_w, gate_b)
    if activation == "sigmoid":
        g = sigmoid(u)
    elif activation == "tanh":
        g = tanh(u)
    elif activation == "relu":
        g = relu(u)
    else:
        raise ConfigError(f"unknown gate activation {activation!r}")
    return float(np.mean(g))


@dataclass
class BlockTrace:
    """Intermediate products of one forward pass.

    ``gate`` is the scalar the gate path computed; ``gate_applied`` is the
    value that actually scaled the linear branch (None when the branch is
    dropped). Attention maps are captured only on request; sparse maps of
    reordered heads are stored in the order they were computed in, i.e.
    after the permutation, where the band structure is visible.
    """

    o_s: Array
    o_l: Array | None
    gate: float
    gate_applied: float | None
    fused: Array
    final: Array
    attended_pairs: list[int]
    reordered: list[bool]
    sparse_maps: list[Array] | None = None
    linear_maps: list[Array] | None = None


def head_slices(channels: int, heads: int) -> list[slice]:
    d = channels // heads
    return [slice(h * d, (h + 1) * d) for h in range(heads)]


def sparse_head_attention(
    q: Array,
    k: Array,
    v: Array,
    entry,
    grid: LatentGrid,
) -> tuple[Array, dict]:
    """One head of masked softmax attention under a plan entry.

    Realizes the entry's mask (permuting the sequence first for reordered
    window entries), runs scaled masked softmax attention, and scatters
    the output back to the original token order. The returned info dict
    carries the realized mask, permutation, and attention weights.
    """
    d = q.shape[1]
    mask, perm = realize_head_mask(entry, grid, q, k)
    if perm is not None:
        q2, k2, v2 = q[perm], k[perm], v[perm]
    else:
        q2, k2, v2 = q, k, v
    logits = matmul(q2, k2.T) * (1.0 / math.sqrt(d))
    attn = softmax_masked(logits, mask)
    o2 = matmul(attn, v2)
    if perm is not None:
        out = np.empty_like(o2)
        out[perm] = o2
    else:
        out = o2
    return out, {"mask": mask, "perm": perm, "attn": attn, "q2": q2, "k2": k2, "v2": v2}


def salad_forward(
    x: Array,
    params: SaladParams,
    plan: MaskPlan,
    grid: LatentGrid,
    rope_cfg: RopeConfig | None = None,
    capture_maps: bool = False,
    _tape: dict | None = None,
) -> tuple[Array, BlockTrace]:
    """Run the block on one sequence; returns (output, trace).

    ``_tape`` is a private hook used by the gradient module: when a dict is
    passed, every intermediate needed for the hand-derived backward pass is
    recorded into it.
    """
    x = np.asarray(x, dtype=np.float64)
    params.validate(grid)
    n, d = grid.seq_len, grid.head_dim
    if x.shape != (n, params.d_model):
        raise DimensionError(f"input shape {x.shape} does not match (N={n}, D={params.d_model})")
    if len(plan) != grid.heads:
        raise ConfigError(f"plan has {len(plan)} entries for {grid.heads} heads")
    if rope_cfg is None:
        rope_cfg = RopeConfig.default(d)
    if rope_cfg.head_dim != d:
        raise ConfigError(f"rope split covers {rope_cfg.head_dim} channels, head_dim is {d}")

    wq, wk, wv, wo = (merged_weight(params, m) for m in ("q", "k", "v", "o"))
    q_pre = matmul(x, wq)
    k_pre = matmul(x, wk)
    v = matmul(x, wv)

    slices = head_slices(params.channels, grid.heads)
    q_rot = np.concatenate([rope3d_apply(q_pre[:, s], grid, rope_cfg) for s in slices], axis=1)
    k_rot = np.concatenate([rope3d_apply(k_pre[:, s], grid, rope_cfg) for s in slices], axis=1)

    if params.variant == "non_shared":
        ql_pre = matmul(x, params.w_q_lin)
        kl_pre = matmul(x, params.w_k_lin)
        vl = matmul(x, params.w_v_lin)
        ql_rot = np.concatenate([rope3d_apply(ql_pre[:, s], grid, rope_cfg) for s in slices], axis=1)
        kl_rot = np.concatenate([rope3d_apply(kl_pre[:, s], grid, rope_cfg) for s in slices], axis=1)
    else:
        ql_rot, kl_rot, vl = q_rot, k_rot, v

    inv_sqrt_d = 1.0 / math.sqrt(d)
    o_s = np.zeros_like(q_rot)
    o_l = np.zeros_like(q_rot)
    attended: list[int] = []
    reordered: list[bool] = []
    sparse_maps: list[Array] | None = [] if capture_maps else None
    linear_maps: list[Array] | None = [] if capture_maps else None
    head_tapes: list[dict] = []

    for head, s in enumerate(slices):
        oh, info = sparse_head_attention(q_rot[:, s], k_rot[:, s], v[:, s], plan[head], grid)
        o_s[:, s] = oh

        ol_h = linear_attention_streaming(ql_rot[:, s], kl_rot[:, s], vl[:, s])
        o_l[:, s] = ol_h

        attended.append(int(info["mask"].sum()))
        reordered.append(isinstance(plan[head], Window) and plan[head].reordered)
        if capture_maps:
            sparse_maps.append(info["attn"])
            linear_maps.append(linear_attention_map(ql_rot[:, s], kl_rot[:, s]))
        if _tape is not None:
            head_tapes.append(info)

    gate = compute_gate(x, params.gate_w, params.gate_b,
                        params.gate_activation, params.gate_constant)
    gate_applied: float | None
    if params.dropped:
        gate_applied = None
        fused = o_s
        proj_out = None
    else:
        gate_applied = params.lambda_override if params.lambda_override is not None else gate
        proj_out = matmul(o_l, params.proj)
        fused = o_s + gate_applied * proj_out
    final = matmul(fused, wo)

    if _tape is not None:
        _tape.update({
            "x": x, "params": params, "grid": grid, "rope_cfg": rope_cfg,
            "wq": wq, "wk": wk, "wv": wv, "wo": wo,
            "q_rot": q_rot, "k_rot": k_rot, "v": v,
            "ql_rot": ql_rot, "kl_rot": kl_rot, "vl": vl,
            "heads": head_tapes, "slices": slices,
            "o_s": o_s, "o_l": o_l, "proj_out": proj_out,
            "gate": gate, "gate_applied": gate_applied,
            "fused": fused, "final": final, "inv_sqrt_d": inv_sqrt_d,
        })

    trace = BlockTrace(
        o_s=o_s,
        o_l=None if params.dropped else o_l,
        gate=gate,
        gate_applied=gate_applied,
        fused=fused,
        final=final,
        attended_pairs=attended,
        reordered=reordered,
        sparse_maps=sparse_maps,
        linear_maps=linear_maps,
    )
    return final, trace


def write_pgm(mat: Array, path: Path) -> None:
    """8-bit binary PGM with each row scaled by its own maximum."""
    mat = np.asarray(mat, dtype=np.float64)
    row_max = mat.max(axis=1)
    safe = np.where(row_max > 0, row_max, 1.0)
    pixels = np.clip(np.rint(255.0 * mat / safe[:, None]), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mat.shape[1]} {mat.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def export_attention_maps(trace: BlockTrace, head: int, out_prefix: str | Path) -> list[Path]:
    """Write one head's sparse and linear maps as CSV plus 8-bit PGM.

    CSV keeps full precision; the PGM scales each row by its maximum.
    Raises :class:`StateError` if the forward pass did not capture maps.
    """
    if trace.sparse_maps is None or trace.linear_maps is None:
        raise StateError("attention maps were not captured; run the forward pass with capture_maps")
    if not 0 <= head < len(trace.sparse_maps):
        raise ConfigError(f"head {head} out of range for {len(trace.sparse_maps)} captured heads")
    prefix = Path(out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, mat in (("sparse", trace.sparse_maps[head]), ("linear", trace.linear_maps[head])):
        csv_path = prefix.with_name(f"{prefix.name}_{kind}_h{head}.csv")
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            for row in mat:
                writer.writerow([repr(float(val)) for val in row])
        pgm_path = prefix.with_name(f"{prefix.name}_{kind}_h{head}.pgm")
        write_pgm(mat, pgm_path)
        written += [csv_path, pgm_path]
    return written


def sparse_only_params(params: SaladParams) -> SaladParams:
    """Copy of ``params`` with the linear branch removed."""
    return replace(params, dropped=True)
