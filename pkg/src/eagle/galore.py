"""AdamW with gradient low-rank projection (GaLore) for 2-D weight matrices.

Each projected matrix keeps an orthonormal basis ``P`` from the top singular
vectors of its gradient, refreshed every ``refresh_period`` steps. Adam moments
live in the projected coordinates and are zeroed on refresh; the normalized
update is mapped back through ``P`` and scaled by ``scale``.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass

import torch

from .numeric import NonFiniteError, Params, svd_topk

log = logging.getLogger(__name__)

PROJECTED = re.compile(r"(\.(attn\.[qkvo]|mlp\.fc[12])\.w|^vis\.patch\.w)$")


@dataclass
class Schedule:
    base_lr: float
    warmup_steps: int
    total_steps: int
    shape: str = "cosine"

    def __post_init__(self):
        if self.shape not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule shape {self.shape!r}")

    def lr(self, t: int) -> float:
        if t < self.warmup_steps:
            return self.base_lr * t / self.warmup_steps
        if self.shape == "constant" or self.total_steps <= self.warmup_steps:
            return self.base_lr
        frac = min(1.0, (t - self.warmup_steps) / (self.total_steps - self.warmup_steps))
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    scale: float = 0.25
    rank: int = 4
    refresh_period: int = 200
    projection_type: str = "std"


@dataclass
class AdamState:
    moment1: torch.Tensor
    moment2: torch.Tensor
    step: int = 0


@dataclass
class GaLoreParamState:
    projection: torch.Tensor | None
    moment1: torch.Tensor | None
    moment2: torch.Tensor | None
    rank: int
    side: str
    step: int = 0
    last_refresh: int = -1


def select_params(
    params: Params,
    optimizer: str = "galore_adamw",
    supervision: str = "seq",
    freeze_text: bool = False,
    freeze_cls: bool = False,
) -> dict[str, str]:
    """Assign each parameter to ``galore``, ``adamw`` or ``frozen``.

    Attention q/k/v/out and MLP weight matrices are projected; everything else
    (biases, norms, embeddings, projection heads, logit scale) gets plain AdamW.
    """
    groups = {}
    for name in params:
        if freeze_text and name.startswith("txt."):
            groups[name] = "frozen"
        elif name == "vis.cls" and (supervision == "seq" or freeze_cls):
            groups[name] = "frozen"
        elif optimizer == "galore_adamw" and PROJECTED.search(name):
            groups[name] = "galore"
        else:
            groups[name] = "adamw"
    return groups


def choose_side(shape: tuple[int, int], projection_type: str = "std") -> str:
    """``std``: project the smaller dimension (left when m <= n)."""
    m, n = shape
    if projection_type == "std":
        return "left" if m <= n else "right"
    if projection_type in ("left", "right"):
        return projection_type
    raise ValueError(f"unknown projection type {projection_type!r}")


def refresh_projection(g: torch.Tensor, rank: int, side: str) -> torch.Tensor:
    u, _, v = svd_topk(g, rank)
    return u if side == "left" else v


def project(g, p, side):
    return p.T @ g if side == "left" else g @ p


def project_back(n, p, side):
    return p @ n if side == "left" else n @ p.T


def adam_direction(m1, m2, g, t, hyper: AdamWConfig):
    """Update moments in place with ``g`` and return the bias-corrected direction."""
    m1.mul_(hyper.beta1).add_(g, alpha=1 - hyper.beta1)
    m2.mul_(hyper.beta2).addcmul_(g, g, value=1 - hyper.beta2)
    m_hat = m1 / (1 - hyper.beta1**t)
    v_hat = m2 / (1 - hyper.beta2**t)
    return m_hat / (torch.sqrt(v_hat) + hyper.eps)


def adamw_step(state: AdamState, g, w, lr: float, hyper: AdamWConfig):
    """Full-space AdamW; returns the weight update."""
    state.step += 1
    n = adam_direction(state.moment1, state.moment2, g, state.step, hyper)
    return -lr * n - lr * hyper.weight_decay * w


def galore_step(state: GaLoreParamState, g, w, lr: float, hyper: AdamWConfig, refresh: bool):
    """GaLore AdamW update for one matrix.

    On ``refresh`` the basis is recomputed from ``g`` and moments are zeroed.
    Bias correction counts steps since the last refresh.
    """
    if refresh or state.projection is None:
        state.projection = refresh_projection(g, state.rank, state.side)
        r = project(g, state.projection, state.side)
        state.moment1 = torch.zeros_like(r)
        state.moment2 = torch.zeros_like(r)
        state.last_refresh = state.step
    r = project(g, state.projection, state.side)
    t = state.step - state.last_refresh + 1
    n = adam_direction(state.moment1, state.moment2, r, t, hyper)
    state.step += 1
    return -lr * hyper.scale * project_back(n, state.projection, state.side) - lr * hyper.weight_decay * w


class GaLoreAdamW:
    """Optimizer over a named parameter dict, partitioned by :func:`select_params`."""

    def __init__(self, params: Params, groups: dict[str, str], schedule: Schedule, hyper: AdamWConfig):
        self.groups = dict(groups)
        self.schedule = schedule
        self.hyper = hyper
        self.t = 0
        self.state: dict[str, AdamState | GaLoreParamState] = {}
        for name, p in params.items():
            group = self.groups.get(name, "frozen")
            if group == "galore":
                if p.ndim != 2:
                    raise ValueError(f"{name}: only matrices can be projected, got shape {tuple(p.shape)}")
                rank = hyper.rank
                if rank > min(p.shape):
                    log.warning("%s: rank %d clamped to %d", name, rank, min(p.shape))
                    rank = min(p.shape)
                side = choose_side(tuple(p.shape), hyper.projection_type)
                self.state[name] = GaLoreParamState(None, None, None, rank, side)
            elif group == "adamw":
                self.state[name] = AdamState(torch.zeros_like(p), torch.zeros_like(p))

    def lr(self) -> float:
        return self.schedule.lr(self.t)

    @torch.no_grad()
    def step(self, params: Params, grads: Params) -> float:
        """Apply one update in place; returns the learning rate used."""
        lr = self.lr()
        refresh = self.t % self.hyper.refresh_period == 0
        for name, st in self.state.items():
            g, w = grads[name], params[name]
            if isinstance(st, GaLoreParamState):
                dw = galore_step(st, g, w, lr, self.hyper, refresh)
            else:
                dw = adamw_step(st, g, w, lr, self.hyper)
            if not bool(torch.isfinite(dw).all()):
                raise NonFiniteError("optimizer step", f"{name} at step {self.t}")
            w.add_(dw)
        self.t += 1
        return lr

    # flat tensor view for checkpointing
    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"opt.t": torch.tensor([float(self.t)], dtype=torch.float64)}
        for name, st in self.state.items():
            if isinstance(st, AdamState):
                out[f"opt.{name}.m"] = st.moment1
                out[f"opt.{name}.v"] = st.moment2
                out[f"opt.{name}.step"] = torch.tensor([float(st.step)], dtype=torch.float64)
            else:
                meta = [float(st.step), float(st.last_refresh)]
                out[f"opt.{name}.step"] = torch.tensor(meta, dtype=torch.float64)
                if st.projection is not None:
                    out[f"opt.{name}.P"] = st.projection
                    out[f"opt.{name}.m"] = st.moment1
                    out[f"opt.{name}.v"] = st.moment2
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.t = int(tensors["opt.t"][0])
        for name, st in self.state.items():
            meta = tensors[f"opt.{name}.step"]
            if isinstance(st, AdamState):
                st.moment1 = tensors[f"opt.{name}.m"].clone()
                st.moment2 = tensors[f"opt.{name}.v"].clone()
                st.step = int(meta[0])
            else:
                st.step, st.last_refresh = int(meta[0]), int(meta[1])
                if f"opt.{name}.P" in tensors:
                    st.projection = tensors[f"opt.{name}.P"].clone()
                    st.moment1 = tensors[f"opt.{name}.m"].clone()
                    st.moment2 = tensors[f"opt.{name}.v"].clone()
