"""Three-view contrastive losses with analytic similarity-level gradients.

Notation: rows of ``x`` and ``y`` embed the two core views, rows of ``z``
the auxiliary view. ``S_ab[i, j] = <a_i, b_j> / tau``.

Per image ``i`` the total loss sums three components:

* ``L_xy``: positive ``S_xy[i, i]`` against every core-core negative
  ``S_xy[i, j], S_xy[j, i], S_xx[i, j], S_yy[i, j]`` for ``j != i``;
* ``L_zx``: two log-terms sharing the positive ``S_zx[i, i]``, one over the
  row ``S_zx[i, j]`` and one over the column ``S_zx[j, i]``;
* ``L_zy``: as ``L_zx`` with ``y`` in place of ``x``.

Auxiliary-auxiliary pairs are never negatives. With ``kind="gnt_xent"``
the positive is left out of every denominator, so the gradient of a
log-term w.r.t. its positive is exactly -1 and the gradients w.r.t. its
negatives form a softmax. ``kind="nt_xent"`` puts the positive back in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

LOSS_KINDS = ("gnt_xent", "nt_xent")
TERM_NAMES = ("xy", "zx_row", "zx_col", "zy_row", "zy_col")


class ParameterError(ValueError):
    pass


class BatchSizeError(ValueError):
    pass


@dataclass
class BatchEmbeddings:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray | None = None
    check_norm: bool = True

    def __post_init__(self):
        self.x = np.asarray(self.x)
        self.y = np.asarray(self.y)
        if self.z is not None:
            self.z = np.asarray(self.z)
        mats = [m for m in (self.x, self.y, self.z) if m is not None]
        for m in mats:
            if m.ndim != 2 or m.shape != self.x.shape:
                raise T.DimensionError(f"embedding matrices must share one n x d shape, got {m.shape}")
        if self.x.shape[0] < 2:
            raise BatchSizeError(f"need at least 2 images per batch for negatives, got {self.x.shape[0]}")
        if self.check_norm:
            for m in mats:
                dev = np.abs(np.linalg.norm(m, axis=1) - 1.0).max()
                if dev > 1e-5:
                    raise ValueError(f"embedding rows must be unit-norm (max deviation {dev:.2e})")

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class ScaledSimilarities:
    temperature: float
    xy: np.ndarray
    xx: np.ndarray
    yy: np.ndarray
    zx: np.ndarray | None = None
    zy: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.xy.shape[0]

    @property
    def has_aux(self) -> bool:
        return self.zx is not None


@dataclass
class LogTerm:
    """One ``-log(e^pos / denominator)`` family, vectorized over the batch."""

    loss: np.ndarray  # (n,)
    grad_pos: np.ndarray  # (n,)
    grad_negs: np.ndarray  # (n, m), zero at excluded slots
    neg_mask: np.ndarray  # (n, m) bool


@dataclass
class LossReport:
    total: float
    l_xy: float
    l_zx: float
    l_zy: float
    grads: dict[str, np.ndarray]
    terms: dict[str, LogTerm] = field(repr=False)
    mean_pos_sim: float = 0.0
    mean_neg_sim: float = 0.0
    grad_pos: float = 0.0
    grad_neg_sum: float = 0.0

    @property
    def per_component(self) -> tuple[float, float, float]:
        return self.l_xy, self.l_zx, self.l_zy


def _check_temperature(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")


def similarity_matrices(emb: BatchEmbeddings, tau: float) -> ScaledSimilarities:
    _check_temperature(tau)
    x, y, z = emb.x, emb.y, emb.z
    inv = 1.0 / tau
    return ScaledSimilarities(
        temperature=tau,
        xy=(x @ y.T) * inv,
        xx=(x @ x.T) * inv,
        yy=(y @ y.T) * inv,
        zx=None if z is None else (z @ x.T) * inv,
        zy=None if z is None else (z @ y.T) * inv,
    )


def _log_term(pos: np.ndarray, negs: np.ndarray, mask: np.ndarray, include_positive: bool) -> LogTerm:
    masked = np.where(mask, negs, -np.inf)
    top = masked.max(axis=1)
    e_neg = np.where(mask, np.exp(masked - top[:, None]), 0.0)
    neg_sum = e_neg.sum(axis=1)
    lse_neg = top + np.log(neg_sum)
    if not include_positive:
        return LogTerm(loss=lse_neg - pos, grad_pos=np.full_like(pos, -1.0),
                       grad_negs=e_neg / neg_sum[:, None], neg_mask=mask)
    # -log(e^pos / (e^pos + sum e^neg)) = softplus(u) with u = lse_neg - pos, evaluated
    # without cancellation at either extreme
    u = lse_neg - pos
    tail = np.exp(-np.abs(u))
    loss = np.maximum(u, 0.0) + np.log1p(tail)
    neg_share = np.where(u >= 0, 1.0, tail) / (1.0 + tail)
    grad_negs = e_neg / neg_sum[:, None] * neg_share[:, None]
    return LogTerm(loss=loss, grad_pos=-neg_share, grad_negs=grad_negs, neg_mask=mask)


def _log_terms(sims: ScaledSimilarities, kind: str) -> dict[str, LogTerm]:
    if kind not in LOSS_KINDS:
        raise ParameterError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    n = sims.n
    if n < 2:
        raise BatchSizeError(f"need at least 2 images per batch for negatives, got {n}")
    nt = kind == "nt_xent"
    off = ~np.eye(n, dtype=bool)
    terms = {
        "xy": _log_term(np.diag(sims.xy).copy(),
                        np.concatenate([sims.xy, sims.xy.T, sims.xx, sims.yy], axis=1),
                        np.tile(off, (1, 4)), nt),
    }
    if sims.has_aux:
        for name, s in (("zx", sims.zx), ("zy", sims.zy)):
            pos = np.diag(s).copy()
            terms[f"{name}_row"] = _log_term(pos, s, off, nt)
            terms[f"{name}_col"] = _log_term(pos, s.T.copy(), off, nt)
    return terms


def _component_grads(terms: dict[str, LogTerm], n: int, has_aux: bool) -> dict[str, np.ndarray]:
    """Gradient of the per-image component sum (not yet divided by n)."""
    t = terms["xy"]
    blocks = np.split(t.grad_negs, 4, axis=1)
    grads = {
        "xy": blocks[0] + blocks[1].T + np.diag(t.grad_pos),
        "xx": blocks[2],
        "yy": blocks[3],
    }
    if has_aux:
        for name in ("zx", "zy"):
            row, col = terms[f"{name}_row"], terms[f"{name}_col"]
            grads[name] = row.grad_negs + col.grad_negs.T + np.diag(row.grad_pos + col.grad_pos)
    return grads


def similarity_grads(sims: ScaledSimilarities, kind: str = "gnt_xent") -> dict[str, np.ndarray]:
    """Gradients of ``sum_i (L_xy_i + L_zx_i + L_zy_i)`` w.r.t. each scaled-similarity entry.

    The diagonal of ``xy`` is -1 and the diagonals of ``zx``/``zy`` are -2 for
    GNT-Xent. Divide by ``n`` for the gradient of the batch-mean total.
    """
    terms = _log_terms(sims, kind)
    return _component_grads(terms, sims.n, sims.has_aux)


def gnt_xent_similarity_grads(sims: ScaledSimilarities) -> dict[str, np.ndarray]:
    return similarity_grads(sims, "gnt_xent")


def contrastive_loss(sims: ScaledSimilarities, kind: str = "gnt_xent") -> LossReport:
    terms = _log_terms(sims, kind)
    n = sims.n
    l_xy = terms["xy"].loss
    l_zx = terms["zx_row"].loss + terms["zx_col"].loss if sims.has_aux else np.zeros(n)
    l_zy = terms["zy_row"].loss + terms["zy_col"].loss if sims.has_aux else np.zeros(n)
    total = float(np.mean(l_xy + l_zx + l_zy))
    grads = {k: v / n for k, v in _component_grads(terms, n, sims.has_aux).items()}

    tau = sims.temperature
    pos = [np.diag(sims.xy)]
    if sims.has_aux:
        pos += [np.diag(sims.zx), np.diag(sims.zy)]
    negs = []
    term_sources = {"xy": np.concatenate([sims.xy, sims.xy.T, sims.xx, sims.yy], axis=1)}
    if sims.has_aux:
        term_sources.update(zx_row=sims.zx, zx_col=sims.zx.T, zy_row=sims.zy, zy_col=sims.zy.T)
    for name, t in terms.items():
        negs.append(term_sources[name][t.neg_mask])
    return LossReport(
        total=total,
        l_xy=float(l_xy.mean()),
        l_zx=float(l_zx.mean()),
        l_zy=float(l_zy.mean()),
        grads=grads,
        terms=terms,
        mean_pos_sim=float(np.concatenate(pos).mean() * tau),
        mean_neg_sim=float(np.concatenate(negs).mean() * tau),
        grad_pos=float(np.mean([t.grad_pos.mean() for t in terms.values()])),
        grad_neg_sum=float(np.mean([t.grad_negs.sum(axis=1).mean() for t in terms.values()])),
    )


def gnt_xent(sims: ScaledSimilarities) -> LossReport:
    return contrastive_loss(sims, "gnt_xent")


def nt_xent_loss(sims: ScaledSimilarities) -> LossReport:
    """Three-view loss with the positive restored to every denominator."""
    return contrastive_loss(sims, "nt_xent")


def nt_xent(pos: float, negs) -> tuple[float, tuple[float, np.ndarray]]:
    """Single-positive NT-Xent ``-log(e^pos / (e^pos + sum e^neg))`` and its gradients."""
    negs = np.atleast_1d(np.asarray(negs, dtype=np.float64))
    if negs.size == 0:
        raise ParameterError("nt_xent needs at least one negative")
    t = _log_term(np.array([float(pos)]), negs[None, :], np.ones((1, negs.size), bool), True)
    return float(t.loss[0]), (float(t.grad_pos[0]), t.grad_negs[0])


def gnt_xent_term(pos: float, negs) -> tuple[float, tuple[float, np.ndarray]]:
    """Single-positive GNT-Xent ``-log(e^pos / sum e^neg)`` and its gradients."""
    negs = np.atleast_1d(np.asarray(negs, dtype=np.float64))
    if negs.size == 0:
        raise ParameterError("gnt_xent_term needs at least one negative")
    t = _log_term(np.array([float(pos)]), negs[None, :], np.ones((1, negs.size), bool), False)
    return float(t.loss[0]), (float(t.grad_pos[0]), t.grad_negs[0])


def embedding_grads(emb: BatchEmbeddings, sims: ScaledSimilarities,
                    grads: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Chain similarity-level gradients through ``S = A B^T / tau``."""
    inv = 1.0 / sims.temperature
    x, y, z = emb.x, emb.y, emb.z
    g_xy, g_xx, g_yy = grads["xy"], grads["xx"], grads["yy"]
    dx = g_xy @ y + (g_xx + g_xx.T) @ x
    dy = g_xy.T @ x + (g_yy + g_yy.T) @ y
    dz = None
    if z is not None:
        g_zx, g_zy = grads["zx"], grads["zy"]
        dx += g_zx.T @ z
        dy += g_zy.T @ z
        dz = g_zx @ x + g_zy @ y
        dz *= inv
    return dx * inv, dy * inv, dz


def full_loss_backward(emb: BatchEmbeddings, tau: float, kind: str = "gnt_xent"):
    """Gradients of the batch-mean total w.r.t. the rows of x, y and z."""
    sims = similarity_matrices(emb, tau)
    report = contrastive_loss(sims, kind)
    return embedding_grads(emb, sims, report.grads)


def loss_on_tape(x: T.Tensor, y: T.Tensor, z: T.Tensor | None, tau: float,
                 kind: str = "gnt_xent") -> tuple[T.Tensor, LossReport]:
    """Scalar loss tensor whose backward rule feeds embedding gradients into the tape."""
    emb = BatchEmbeddings(x.data.astype(np.float64), y.data.astype(np.float64),
                          None if z is None else z.data.astype(np.float64), check_norm=False)
    sims = similarity_matrices(emb, tau)
    report = contrastive_loss(sims, kind)
    dx, dy, dz = embedding_grads(emb, sims, report.grads)

    def backward(g):
        scale = float(g)
        out = [(dx * scale).astype(x.dtype), (dy * scale).astype(y.dtype)]
        if z is not None:
            out.append((dz * scale).astype(z.dtype))
        return tuple(out)

    parents = (x, y) if z is None else (x, y, z)
    return T._result(np.asarray(report.total, dtype=x.dtype), parents, backward, "contrastive_loss"), report
