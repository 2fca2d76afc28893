"""Finite-difference checks of every backward rule, the loss gradients and the encoder chain.

All checks run in float64. Each check draws several random instances and
reports the worst relative error.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import loss as L
from . import model as M
from . import tensor as T

OP_TOL = 1e-6
E2E_TOL = 1e-5
POSITIVE_GRAD_TOL = 1e-3
INSTANCES = 10


@dataclass
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<34} max_err={self.max_error:.3e}  tol={self.tolerance:.0e}"


def _tape_check(build: Callable[[list[T.Tensor]], T.Tensor], inputs: list[np.ndarray],
                rng: np.random.Generator) -> float:
    """Compare tape gradients of ``sum(out * R)`` with central differences for every input."""
    leaves = [T.Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = build(leaves)
    proj = rng.standard_normal(out.shape)
    T.sum(T.mul_elementwise(out, T.Tensor(proj))).backward()
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(v, k=k):
            args = [T.Tensor(v if j == k else inputs[j]) for j in range(len(inputs))]
            return float(np.sum(build(args).data * proj))
        numeric = T.finite_difference_gradient(f, x, h=1e-6)
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)
        worst = max(worst, T.relative_error(analytic, numeric))
    return worst


def _away_from_zero(rng, shape, margin=0.05):
    return rng.uniform(margin, 2.0, shape) * rng.choice([-1.0, 1.0], shape)


def _op_cases() -> dict[str, Callable[[np.random.Generator], float]]:
    def matmul(rng):
        return _tape_check(lambda a: T.matmul(a[0], a[1]), [rng.standard_normal((4, 3)), rng.standard_normal((3, 5))], rng)

    def conv2d(rng):
        stride, padding = [(1, 1), (2, 0), (1, 0)][rng.integers(0, 3)]
        return _tape_check(lambda a: T.conv2d(a[0], a[1], a[2], stride=stride, padding=padding),
                           [rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3)),
                            rng.standard_normal(4)], rng)

    def relu(rng):
        return _tape_check(lambda a: T.relu(a[0]), [_away_from_zero(rng, (5, 7))], rng)

    def l2_normalize_rows(rng):
        return _tape_check(lambda a: T.l2_normalize_rows(a[0]), [rng.standard_normal((5, 8))], rng)

    def affine(rng):
        return _tape_check(lambda a: T.affine(a[0], a[1], a[2]),
                           [rng.standard_normal((6, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)], rng)

    def mean(rng):
        return _tape_check(lambda a: T.mean(a[0]), [rng.standard_normal((3, 4))], rng)

    def sum_(rng):
        return _tape_check(lambda a: T.sum(a[0]), [rng.standard_normal((3, 4))], rng)

    def reshape(rng):
        return _tape_check(lambda a: T.reshape(a[0], (4, 6)), [rng.standard_normal((2, 3, 4))], rng)

    def global_avg_pool(rng):
        return _tape_check(lambda a: T.global_avg_pool(a[0]), [rng.standard_normal((2, 3, 4, 4))], rng)

    def max_pool2x2(rng):
        return _tape_check(lambda a: T.max_pool2x2(a[0]), [rng.standard_normal((2, 3, 6, 6))], rng)

    def take(rng):
        return _tape_check(lambda a: T.concat_rows([a[0][1:3], a[0][0:2]]), [rng.standard_normal((4, 3))], rng)

    def softmax_cross_entropy(rng):
        labels = rng.integers(0, 4, size=6)
        return _tape_check(lambda a: T.softmax_cross_entropy(a[0], labels), [rng.standard_normal((6, 4))], rng)

    return {
        "matmul": matmul, "conv2d": conv2d, "relu": relu, "l2_normalize_rows": l2_normalize_rows,
        "affine": affine, "mean": mean, "sum": sum_, "reshape": reshape,
        "global_avg_pool": global_avg_pool, "max_pool2x2": max_pool2x2, "take/concat_rows": take,
        "softmax_cross_entropy": softmax_cross_entropy,
    }


def random_sims(rng: np.random.Generator, n: int, d: int, tau: float, aux: bool = True) -> L.ScaledSimilarities:
    def unit(shape):
        m = rng.standard_normal(shape)
        return m / np.linalg.norm(m, axis=1, keepdims=True)
    emb = L.BatchEmbeddings(unit((n, d)), unit((n, d)), unit((n, d)) if aux else None)
    return L.similarity_matrices(emb, tau)


_SIM_KEYS = ("xy", "xx", "yy", "zx", "zy")


def _component_sum(sims: L.ScaledSimilarities, kind: str) -> float:
    return L.contrastive_loss(sims, kind).total * sims.n


def similarity_grad_error(sims: L.ScaledSimilarities, kind: str) -> float:
    analytic = L.similarity_grads(sims, kind)
    worst = 0.0
    for key in _SIM_KEYS:
        base = getattr(sims, key)
        if base is None:
            continue

        def f(v, key=key):
            perturbed = L.ScaledSimilarities(**{**sims.__dict__, key: v})
            return _component_sum(perturbed, kind)
        worst = max(worst, T.relative_error(analytic[key], T.finite_difference_gradient(f, base, 1e-6)))
    return worst


def positive_grad_deviation(sims: L.ScaledSimilarities) -> float:
    """Largest |FD derivative of a GNT-Xent log-term w.r.t. its own positive + 1|."""
    n, h = sims.n, 1e-5
    off = ~np.eye(n, dtype=bool)
    worst = 0.0
    families = [("xy", lambda s: (np.diag(s.xy), np.concatenate([s.xy, s.xy.T, s.xx, s.yy], axis=1), np.tile(off, (1, 4))))]
    if sims.has_aux:
        families += [("zx_row", lambda s: (np.diag(s.zx), s.zx, off)), ("zx_col", lambda s: (np.diag(s.zx), s.zx.T, off)),
                     ("zy_row", lambda s: (np.diag(s.zy), s.zy, off)), ("zy_col", lambda s: (np.diag(s.zy), s.zy.T, off))]
    for _, extract in families:
        pos, negs, mask = extract(sims)
        for i in range(n):
            row = negs[i][mask[i]]
            fp = L.gnt_xent_term(pos[i] + h, row)[0]
            fm = L.gnt_xent_term(pos[i] - h, row)[0]
            worst = max(worst, abs((fp - fm) / (2 * h) + 1.0))
    return worst


def embedding_grad_error(rng: np.random.Generator, n: int, d: int, tau: float, kind: str) -> float:
    mats = [rng.standard_normal((n, d)) for _ in range(3)]
    mats = [m / np.linalg.norm(m, axis=1, keepdims=True) for m in mats]
    emb = L.BatchEmbeddings(*mats)
    grads = L.full_loss_backward(emb, tau, kind)
    worst = 0.0
    for k in range(3):
        def f(v, k=k):
            parts = [v if j == k else mats[j] for j in range(3)]
            return L.contrastive_loss(L.similarity_matrices(L.BatchEmbeddings(*parts, check_norm=False), tau), kind).total
        worst = max(worst, T.relative_error(grads[k], T.finite_difference_gradient(f, mats[k], 1e-6)))
    return worst


def encoder_chain_error(rng: np.random.Generator, seed: int) -> float:
    """Gradients of the three-view loss w.r.t. every encoder parameter, through the whole tape."""
    cfg = M.EncoderConfig(widths=(3, 4), embed_dim=6, input_size=8)
    state = M.init_encoder(cfg, seed, dtype=np.float64)
    n = 3
    batch = rng.standard_normal((3 * n, 3, 8, 8))

    def loss_of(st: M.EncoderState) -> T.Tensor:
        _, emb = M.encode(st, T.Tensor(batch))
        return L.loss_on_tape(emb[0:n], emb[n:2 * n], emb[2 * n:3 * n], 0.5, "gnt_xent")[0]

    loss_of(state).backward()
    worst = 0.0
    for name, p in state.params.items():
        def f(v, name=name):
            params = {k: T.Tensor(v if k == name else q.data) for k, q in state.params.items()}
            return float(loss_of(M.EncoderState(cfg, params)).data)
        worst = max(worst, T.relative_error(p.grad, T.finite_difference_gradient(f, p.data, 1e-6)))
    return worst


def run_gradcheck(seed: int = 0, instances: int = INSTANCES) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    with T.float64_mode():
        for name, case in _op_cases().items():
            results.append(CheckResult(name, max(case(rng) for _ in range(instances)), OP_TOL))
        shapes = [(2, 8), (4, 8), (6, 16), (8, 32)]
        for kind in L.LOSS_KINDS:
            err = max(similarity_grad_error(random_sims(rng, n, d, 0.1), kind) for n, d in shapes)
            results.append(CheckResult(f"{kind} similarity grads", err, OP_TOL))
        dev = max(positive_grad_deviation(random_sims(rng, n, d, 0.1)) for n, d in shapes)
        results.append(CheckResult("gnt_xent positive grad == -1", dev, POSITIVE_GRAD_TOL))
        for kind in L.LOSS_KINDS:
            err = max(embedding_grad_error(rng, n, d, 0.1, kind) for n, d in [(2, 4), (4, 8), (6, 8)])
            results.append(CheckResult(f"{kind} embedding grads", err, E2E_TOL))
        err = max(encoder_chain_error(rng, s) for s in range(3))
        results.append(CheckResult("encoder end-to-end grads", err, E2E_TOL))
    return results
