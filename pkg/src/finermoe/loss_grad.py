"""Load-balancing loss and manual reverse-mode gradients for the layer.

The balance loss follows the usual auxiliary-loss treatment: the load
factors f are constants (no gradient through the discrete activation
counts), only the mean scores P are differentiated. The layer backward
likewise treats every mask/top-k selection as constant and differentiates
through the shared expert, the activated experts, the weighted-sum
weights, and the softmax router scores.

fd_check verifies the analytic gradients against central finite
differences, skipping coordinates whose perturbation flips a routing
decision (a derivative across a discrete boundary is meaningless).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from finermoe.config import FineRConfig, derive
from finermoe.experts import DenseFfnWeights, ExpertWeights
from finermoe.moe_layer import MoEModel, build_dispatch_plan, forward, sparse_experts_forward
from finermoe.numerics import Matrix, Rng, dsilu, matmul, silu
from finermoe.router import RoutingDecision, route, route_separate, score


@dataclass
class BalanceLossReport:
    f: np.ndarray  # per-expert load factor, mean 1 under perfect balance
    P: np.ndarray  # per-expert mean routing score
    loss: float
    alpha: float


def balance_loss(decision: RoutingDecision, cfg: FineRConfig, alpha: float = 0.001) -> BalanceLossReport:
    """alpha * sum_i f_i P_i with f_i = N/(A*L) * activation count of expert i
    and P_i the mean (pre-mask) softmax score of expert i."""
    dims = derive(cfg)
    L = decision.n_tokens
    if L < 1:
        raise ValueError("balance_loss needs at least one token")
    counts = np.bincount(decision.indices.ravel(), minlength=dims.N)
    # counts * N stays integral, so the division is the only rounding step.
    f = (counts * dims.N).astype(np.float64) / (dims.n_active * L)
    P = decision.score.astype(np.float64).mean(axis=0)
    loss = alpha * float((f * P).sum())
    return BalanceLossReport(f=f, P=P, loss=loss, alpha=alpha)


def balance_loss_score_grad(decision: RoutingDecision, cfg: FineRConfig, alpha: float = 0.001) -> np.ndarray:
    """d(balance loss)/d(score), with f treated as constant: alpha * f_i / L."""
    rep = balance_loss(decision, cfg, alpha)
    L = decision.n_tokens
    return np.broadcast_to(rep.alpha * rep.f / L, decision.score.shape).copy()


@dataclass
class LayerGradients:
    d_shared: DenseFfnWeights | None
    d_experts: list[ExpertWeights]
    d_router: Matrix
    d_router_cc: Matrix | None
    d_concat_proj: Matrix | None
    d_x: Matrix


def _swiglu_backward(x_rows: Matrix, w, d_out: np.ndarray, acc64: bool):
    """Shared SwiGLU chain rule. Returns (dW1, dWg, dW2, d_x_rows, out_rows)."""
    up = matmul(x_rows, w.w1, acc64=acc64).a
    gate = matmul(x_rows, w.wg, acc64=acc64).a
    s_gate = silu(gate)
    inner = Matrix.wrap(up * s_gate)
    out = matmul(inner, w.w2, acc64=acc64)

    d_out_m = Matrix.wrap(np.ascontiguousarray(d_out))
    d_w2 = matmul(inner.transpose(), d_out_m, acc64=acc64)
    d_inner = matmul(d_out_m, w.w2.transpose(), acc64=acc64).a
    d_up = Matrix.wrap(d_inner * s_gate)
    d_gate = Matrix.wrap(d_inner * up * dsilu(gate))
    xt = x_rows.transpose()
    d_w1 = matmul(xt, d_up, acc64=acc64)
    d_wg = matmul(xt, d_gate, acc64=acc64)
    d_x = matmul(d_up, w.w1.transpose(), acc64=acc64).a + matmul(
        d_gate, w.wg.transpose(), acc64=acc64
    ).a
    return d_w1, d_wg, d_w2, d_x, out


def backward(
    x: Matrix,
    model: MoEModel,
    upstream: Matrix,
    decision: RoutingDecision,
    d_score_extra: np.ndarray | None = None,
    acc64: bool = False,
) -> LayerGradients:
    """Exact gradients of (upstream . y) plus any extra score-level term
    (e.g. the balance loss) with respect to every weight and the input.

    Discrete selections are constants; non-activated experts get zero
    gradient, and in separate-router mode the candidate router is
    selection-only, so its gradient is identically zero.
    """
    cfg, dims = model.cfg, model.dims
    dtype = x.dtype
    L = x.rows
    if upstream.shape != (L, cfg.h):
        raise ValueError(f"upstream must be {L}x{cfg.h}, got {upstream.shape}")

    d_x = np.zeros((L, cfg.h), dtype=dtype)
    d_score = np.zeros((L, dims.N), dtype=np.float64)

    # Projection (if any) sits between the concatenation and the output add.
    if model.concat_proj is not None:
        y_cat, _ = sparse_experts_forward(x, model, decision, acc64=acc64)
        d_proj = matmul(y_cat.transpose(), upstream, acc64=acc64)
        d_cat = matmul(upstream, model.concat_proj.transpose(), acc64=acc64).a
    else:
        d_proj = None
        d_cat = upstream.a

    d_shared = None
    if model.shared is not None:
        d_w1, d_wg, d_w2, d_x_s, _ = _swiglu_backward(x, model.shared, upstream.a, acc64)
        d_shared = DenseFfnWeights(d_w1, d_wg, d_w2)
        d_x += d_x_s

    # Sparse path, one activated expert batch at a time.
    plan = build_dispatch_plan(decision, dims.N)
    d_experts = []
    for k in range(dims.N):
        s, e = plan.offsets[k], plan.offsets[k + 1]
        if s == e:
            d_experts.append(
                ExpertWeights(
                    Matrix.zeros(cfg.h, dims.H_e, dtype=dtype),
                    Matrix.zeros(cfg.h, dims.H_e, dtype=dtype),
                    Matrix.zeros(dims.H_e, dims.h_e, dtype=dtype),
                )
            )
            continue
        batch_tokens = plan.tokens_by_expert[s:e]
        comp = k // (dims.group_size * cfg.R_O)
        x_rows = Matrix.wrap(np.ascontiguousarray(x.a[batch_tokens]))
        u_rows = d_cat[batch_tokens, comp * dims.h_e : (comp + 1) * dims.h_e]
        w_rows = decision.score[batch_tokens, k].astype(dtype)

        d_w1, d_wg, d_w2, d_x_rows, out = _swiglu_backward(
            x_rows, model.experts[k], u_rows * w_rows[:, None], acc64
        )
        d_experts.append(ExpertWeights(d_w1, d_wg, d_w2))
        d_x[batch_tokens] += d_x_rows
        # Weight gradient: d loss / d score[t, k] = u . E_k(x_t).
        d_score[batch_tokens, k] = (u_rows.astype(np.float64) * out.a.astype(np.float64)).sum(axis=1)

    if d_score_extra is not None:
        d_score = d_score + d_score_extra

    # Softmax Jacobian back to the router logits, then to weights/input.
    s_full = decision.score.astype(np.float64)
    d_logits = s_full * (d_score - (d_score * s_full).sum(axis=1, keepdims=True))
    d_logits_m = Matrix.wrap(np.ascontiguousarray(d_logits.astype(dtype)))
    d_router = matmul(x.transpose(), d_logits_m, acc64=acc64)
    d_x += matmul(d_logits_m, model.router.w.transpose(), acc64=acc64).a

    d_router_cc = None
    if model.router_cc is not None:
        d_router_cc = Matrix.zeros(cfg.h, dims.n_groups, dtype=dtype)

    return LayerGradients(
        d_shared=d_shared,
        d_experts=d_experts,
        d_router=d_router,
        d_router_cc=d_router_cc,
        d_concat_proj=d_proj,
        d_x=Matrix.wrap(d_x),
    )


@dataclass
class LossFn:
    """A scalar objective paired with its analytic gradient provider."""

    value: Callable[[Matrix, MoEModel], float]
    grads: Callable[[Matrix, MoEModel], LayerGradients]


def mean_squared_output_loss() -> LossFn:
    """mean(y^2) over all output elements of the layer."""

    def value(x: Matrix, model: MoEModel) -> float:
        y = forward(x, model).y.a.astype(np.float64)
        return float(np.mean(y * y))

    def grads(x: Matrix, model: MoEModel) -> LayerGradients:
        out = forward(x, model)
        y = out.y.a
        upstream = Matrix.wrap(np.ascontiguousarray((2.0 / y.size) * y, dtype=x.dtype))
        return backward(x, model, upstream, out.decision)

    return LossFn(value=value, grads=grads)


def balance_loss_fn(alpha: float = 0.001) -> LossFn:
    """The load-balancing loss alone, as a function of input and router."""

    def _decide(x: Matrix, model: MoEModel) -> RoutingDecision:
        s = score(x, model.router)
        if model.cfg.router_mode == "separate":
            return route_separate(s, score(x, model.router_cc), model.cfg)
        return route(s, model.cfg)

    def value(x: Matrix, model: MoEModel) -> float:
        return balance_loss(_decide(x, model), model.cfg, alpha).loss

    def grads(x: Matrix, model: MoEModel) -> LayerGradients:
        decision = _decide(x, model)
        upstream = Matrix.zeros(x.rows, model.cfg.h, dtype=x.dtype)
        d_score = balance_loss_score_grad(decision, model.cfg, alpha)
        return backward(x, model, upstream, decision, d_score_extra=d_score)

    return LossFn(value=value, grads=grads)


def central_difference(f: Callable[[float], float], x0: float, eps: float) -> float:
    """Two-point central difference, the FD harness primitive."""
    return (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps)


def named_parameters(model: MoEModel) -> list[tuple[str, Matrix]]:
    params: list[tuple[str, Matrix]] = []
    if model.shared is not None:
        params += [
            ("shared.w1", model.shared.w1),
            ("shared.wg", model.shared.wg),
            ("shared.w2", model.shared.w2),
        ]
    for k, e in enumerate(model.experts):
        params += [(f"expert.{k}.w1", e.w1), (f"expert.{k}.wg", e.wg), (f"expert.{k}.w2", e.w2)]
    params.append(("router.w", model.router.w))
    if model.router_cc is not None:
        params.append(("router_cc.w", model.router_cc.w))
    if model.concat_proj is not None:
        params.append(("concat_proj.w", model.concat_proj))
    return params


def gradient_for(grads: LayerGradients, name: str) -> Matrix:
    if name.startswith("shared."):
        return getattr(grads.d_shared, name.split(".")[1])
    if name.startswith("expert."):
        _, k, w = name.split(".")
        return getattr(grads.d_experts[int(k)], w)
    if name == "router.w":
        return grads.d_router
    if name == "router_cc.w":
        return grads.d_router_cc
    if name == "concat_proj.w":
        return grads.d_concat_proj
    raise KeyError(name)


@dataclass
class FdReport:
    max_rel_err: float
    n_checked: int
    n_skipped: int
    skipped: list[tuple[str, int]]  # (param name, flat index) of unstable coords


def _routing_signature(x: Matrix, model: MoEModel) -> bytes:
    s = score(x, model.router)
    if model.cfg.router_mode == "separate":
        d = route_separate(s, score(x, model.router_cc), model.cfg)
    else:
        d = route(s, model.cfg)
    return d.indices.tobytes()


def fd_check(
    x: Matrix,
    model: MoEModel,
    loss_fn: LossFn,
    epsilon: float = 1e-5,
    margin: float = 10.0,
    n_coords: int = 24,
    seed: int = 0,
    rel_floor: float = 1e-6,
) -> FdReport:
    """Compare analytic gradients against central differences on a random
    coordinate subsample.

    A coordinate is checked only if the routing decision survives a
    +-margin*epsilon perturbation (only router-weight and input coordinates
    can flip it). Relative error uses max(|fd|, |analytic|, rel_floor) as
    the denominator so exact-zero gradients compare cleanly.
    """
    model = model.astype(np.float64)
    x = x.astype(np.float64)
    analytic = loss_fn.grads(x, model)

    groups: list[tuple[str, np.ndarray, np.ndarray]] = [
        (name, mat.a.ravel(), gradient_for(analytic, name).a.ravel())
        for name, mat in named_parameters(model)
    ]
    groups.append(("x", x.a.ravel(), analytic.d_x.a.ravel()))

    rng = Rng(seed)
    base_signature = _routing_signature(x, model)

    max_rel = 0.0
    checked = 0
    skipped: list[tuple[str, int]] = []
    for _ in range(n_coords):
        g = int(rng.uniform(1)[0] * len(groups))
        name, theta, grad = groups[g]
        idx = int(rng.uniform(1)[0] * theta.size)
        old = theta[idx]

        def loss_at(v: float) -> float:
            theta[idx] = v
            out = loss_fn.value(x, model)
            theta[idx] = old
            return out

        if name == "x" or name.startswith("router"):
            stable = True
            for delta in (margin * epsilon, -margin * epsilon):
                theta[idx] = old + delta
                if _routing_signature(x, model) != base_signature:
                    stable = False
                theta[idx] = old
            if not stable:
                skipped.append((name, idx))
                continue

        fd = central_difference(loss_at, old, epsilon)
        an = grad[idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), rel_floor)
        max_rel = max(max_rel, rel)
        checked += 1

    return FdReport(max_rel_err=max_rel, n_checked=checked, n_skipped=len(skipped), skipped=skipped)
