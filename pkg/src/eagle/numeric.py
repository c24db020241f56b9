"""Numeric substrate: differentiable op vocabulary, gradients, top-r SVD, RNG.

Tensors are ``torch.Tensor`` objects; every op checks its output for NaN/Inf
and raises :class:`NonFiniteError` naming itself.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch

from . import kernels

GELU_C = 0.7978845608
GELU_A = 0.044715
LN_EPS = 1e-10

Params = dict[str, torch.Tensor]


class NonFiniteError(FloatingPointError):
    """A computation produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"non-finite value in {op}" + (f": {detail}" if detail else ""))


def check_finite(t: torch.Tensor, op: str) -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NonFiniteError(op)
    return t


# -- differentiable op vocabulary -------------------------------------------------


def matmul(a, b):
    return check_finite(a @ b, "matmul")


def linear(x, w, b=None):
    y = x @ w
    if b is not None:
        y = y + b
    return check_finite(y, "linear")


def layer_norm(x, weight=None, bias=None, eps=LN_EPS):
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight + bias
    return check_finite(y, "layer_norm")


def softmax(x, dim=-1):
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    e = torch.exp(z)
    return check_finite(e / e.sum(dim=dim, keepdim=True), "softmax")


def log_softmax(x, dim=-1):
    z = x - x.max(dim=dim, keepdim=True).values.detach()
    return check_finite(z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True)), "log_softmax")


def gelu(x):
    """GELU, tanh approximation with pinned coefficients."""
    inner = GELU_C * (x + GELU_A * x * x * x)
    return check_finite(0.5 * x * (1.0 + torch.tanh(inner)), "gelu")


def sigmoid(x):
    return check_finite(torch.sigmoid(x), "sigmoid")


def log(x):
    return check_finite(torch.log(x), "log")


def l2_normalize(x, dim=-1):
    n = torch.sqrt((x * x).sum(dim=dim, keepdim=True))
    return check_finite(x / n, "l2_normalize")


def attention(q, k, v):
    """Scaled dot-product attention over the last two dims (..., L, d)."""
    scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return matmul(softmax(scores, dim=-1), v)


# -- gradients ------------------------------------------------------------------------


def value_and_grad(loss_fn: Callable[[Params], torch.Tensor], params: Mapping[str, torch.Tensor]):
    """Return ``(loss, {name: dloss/dparam})`` by reverse-mode accumulation."""
    for name, p in params.items():
        check_finite(p, f"param {name}")
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    loss = check_finite(loss_fn(leaves), "loss")
    names = list(leaves)
    gs = torch.autograd.grad(loss, [leaves[k] for k in names], allow_unused=True)
    grads = {k: (torch.zeros_like(leaves[k]) if g is None else g.detach()) for k, g in zip(names, gs)}
    return loss.detach(), grads


def grad(loss_fn: Callable[[Params], torch.Tensor], params: Mapping[str, torch.Tensor]) -> Params:
    """Gradient of a scalar ``loss_fn(params)`` w.r.t. every named tensor."""
    return value_and_grad(loss_fn, params)[1]


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    n_checked: int
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    def format(self) -> str:
        lines = [f"{'parameter':40s} {'n':>3s} {'max_rel_err':>12s}  status"]
        for e in self.entries:
            lines.append(
                f"{e.name:40s} {e.n_checked:3d} {e.max_rel_error:12.3e}  {'ok' if e.passed else 'FAIL'}"
            )
        return "\n".join(lines)


def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[Params], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 32,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    At most ``max_entries`` entries per tensor are probed, chosen by a fixed
    seed. Requires float64 parameters.

    A central difference cannot resolve gradients much below
    ``eps * |loss| / h`` (rounding in the two loss values), so the relative
    error denominator is floored at that resolution divided by ``tol``. A
    structurally zero gradient (for example an attention key bias, which
    softmax ignores) then passes when the difference sits at rounding level.
    """
    for name, p in params.items():
        if p.dtype != torch.float64:
            raise TypeError(f"check_gradients needs float64 params, {name} is {p.dtype}")
    analytic = grad(loss_fn, params)
    base = {k: v.detach().clone() for k, v in params.items()}
    rng = RngStream(seed).split("check_gradients")
    with torch.no_grad():
        scale = max(abs(float(loss_fn(base))), 1.0)
    floor = max(1e-8, float(np.finfo(np.float64).eps) * scale / (h * tol))
    report = GradCheckReport(tol=tol)
    with torch.no_grad():
        for name, p in base.items():
            n = p.numel()
            if n <= max_entries:
                idx = list(range(n))
            else:
                idx = sorted(rng.split(name).permutation(n)[:max_entries].tolist())
            flat = p.view(-1)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss_fn(base))
                flat[i] = orig - h
                fm = float(loss_fn(base))
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                worst = max(worst, rel_error(analytic[name].view(-1)[i].item(), num, floor))
            report.entries.append(GradCheckEntry(name, worst, len(idx), worst < tol))
    return report


# -- top-r SVD ------------------------------------------------------------------------


def _orthonormal_complete(cols: np.ndarray, k: int) -> np.ndarray:
    """Extend orthonormal columns ``cols`` (m x j) to ``k`` columns."""
    m = cols.shape[0]
    out = [cols[:, i] for i in range(cols.shape[1])]
    for e in range(m):
        if len(out) >= k:
            break
        v = np.zeros(m)
        v[e] = 1.0
        for _ in range(2):
            for u in out:
                v = v - (u @ v) * u
        nv = np.linalg.norm(v)
        if nv > 1e-8:
            out.append(v / nv)
    return np.stack(out, axis=1) if out else np.zeros((m, 0))


def jacobi_svd(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 60):
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Returns ``(U, S, V)`` with ``M = U @ diag(S) @ V.T``, singular values sorted
    in nonincreasing order and U completed to orthonormal columns when M is
    rank-deficient.
    """
    a = np.asarray(m, dtype=np.float64)
    transpose = a.shape[0] < a.shape[1]
    if transpose:
        a = a.T
    rows, n = a.shape
    at = np.array(a.T, dtype=np.float64, order="C", copy=True)
    vt = np.eye(n)
    kernels.jacobi_sweeps(at, vt, tol, max_sweeps)
    s = np.sqrt((at * at).sum(axis=1))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    at = at[order]
    v = vt[order].T
    scale = s[0] if s.size and s[0] > 0 else 1.0
    nz = s > scale * 1e-13
    u = np.zeros((rows, n))
    u[:, nz] = (at[nz] / s[nz, None]).T
    if not nz.all():
        k = int(nz.sum())
        u[:, :] = _orthonormal_complete(u[:, :k], n)[:, :n]
        s[~nz] = 0.0
    if transpose:
        u, v = v, u
    return u, s, v


def svd_topk(m, r: int):
    """Top-``r`` singular triplets of a matrix (numpy array or torch tensor).

    Returns ``(U_r, S_r, V_r)`` with the input's array type.
    """
    is_torch = isinstance(m, torch.Tensor)
    a = m.detach().cpu().double().numpy() if is_torch else np.asarray(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"svd_topk needs a matrix, got shape {a.shape}")
    if not 1 <= r <= min(a.shape):
        raise ValueError(f"rank {r} out of range for {a.shape[0]}x{a.shape[1]} matrix")
    if not np.isfinite(a).all():
        raise NonFiniteError("svd_topk")
    u, s, v = jacobi_svd(a)
    u, s, v = u[:, :r].copy(), s[:r].copy(), v[:, :r].copy()
    if is_torch:
        conv = lambda x: torch.from_numpy(x).to(m.dtype)
        return conv(u), conv(s), conv(v)
    return u, s, v


# -- deterministic randomness ----------------------------------------------------------

_MASK64 = (1 << 64) - 1


def hash64(seed: int, label: str) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update((seed & _MASK64).to_bytes(8, "little"))
    h.update(label.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


class RngStream:
    """Counter-based random stream: draw ``i`` is a pure function of (seed, i).

    Every draw advances ``counter``; :meth:`split` derives an independent child
    from a text label without touching the parent's counter.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def __eq__(self, other):
        return isinstance(other, RngStream) and (self.seed, self.counter) == (other.seed, other.counter)

    def split(self, label: str) -> "RngStream":
        return RngStream(hash64(self.seed, label))

    def bits(self, n: int) -> np.ndarray:
        ctr = np.arange(self.counter, self.counter + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _splitmix64(ctr ^ _splitmix64(np.full(n, self.seed, dtype=np.uint64)))

    def uniform(self, n: int | None = None):
        """Uniform draws in [0, 1) with 53-bit resolution."""
        u = (self.bits(1 if n is None else n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return float(u[0]) if n is None else u

    def integers(self, high: int, n: int | None = None):
        u = self.uniform(1 if n is None else n)
        k = np.minimum((u * high).astype(np.int64), high - 1)
        return int(k[0]) if n is None else k

    def normal(self, n: int) -> np.ndarray:
        m = (n + 1) // 2
        u1 = 1.0 - self.uniform(m)
        u2 = self.uniform(m)
        rad = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([rad * np.cos(2 * np.pi * u2), rad * np.sin(2 * np.pi * u2)])
        return z[:n]

    def truncated_normal(self, n: int, std: float, clip: float = 2.0) -> np.ndarray:
        out = self.normal(n)
        bad = np.abs(out) > clip
        while bad.any():
            out[bad] = self.normal(int(bad.sum()))
            bad = np.abs(out) > clip
        return out * std

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, cdf: np.ndarray, n: int) -> np.ndarray:
        """Draw indices from a categorical distribution given its CDF."""
        u = self.uniform(n) * cdf[-1]
        return np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)


def rng_split(stream: RngStream, label: str) -> RngStream:
    return stream.split(label)
