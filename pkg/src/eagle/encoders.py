"""Tiny dual encoder: a patch ViT (CLS + token sequence) and a prompt text encoder.

Parameters live in one flat ``{name: tensor}`` dict with ``vis.`` / ``txt.``
prefixes plus the scalar ``logit_scale``. Weight matrices are stored
``(in, out)`` so layers compute ``x @ W + b``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch

from . import numeric as nc
from .numeric import Params, RngStream

log = logging.getLogger(__name__)

PROMPT = "this is an image of"
LOGIT_SCALE_MAX = math.log(100.0)


@dataclass(frozen=True)
class ArchConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    width: int = 64
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    text_width: int = 64
    text_depth: int = 2
    text_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image side {self.image_size} not divisible by patch size {self.patch_size}"
            )
        if self.width % self.heads or self.text_width % self.text_heads:
            raise ValueError("width must be divisible by the number of heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def seq_len(self) -> int:
        return self.grid * self.grid


@dataclass
class TextVocab:
    """Word-level vocabulary: prompt words followed by one token per class."""

    class_names: list[str]
    words: list[str] = field(init=False)

    def __post_init__(self):
        self.words = PROMPT.split()
        for name in self.class_names:
            for w in name.lower().split():
                if w not in self.words:
                    self.words.append(w)
        self._index = {w: i for i, w in enumerate(self.words)}

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def tokenize(self, class_id: int) -> list[int]:
        if not 0 <= class_id < len(self.class_names):
            raise KeyError(f"unknown class id {class_id}")
        text = f"{PROMPT} {self.class_names[class_id]}"
        return [self._index[w] for w in text.lower().split()]

    def token_matrix(self) -> torch.Tensor:
        toks = [self.tokenize(c) for c in range(self.n_classes)]
        if len({len(t) for t in toks}) != 1:
            raise ValueError("class prompts must tokenize to equal length")
        return torch.tensor(toks, dtype=torch.long)

    @property
    def max_len(self) -> int:
        return len(PROMPT.split()) + max(len(n.split()) for n in self.class_names)


class EncoderOutput(NamedTuple):
    cls: torch.Tensor  # (B, E) unit norm
    seq: torch.Tensor  # (B, L, E) unit-norm rows, CLS excluded
    raw_seq: torch.Tensor  # (B, L, D) before the projection head


# -- initialization -------------------------------------------------------------------


def _block_shapes(prefix: str, d: int, mlp: int) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.w"] = (d,)
        shapes[f"{prefix}.{ln}.b"] = (d,)
    for p in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.{p}.w"] = (d, d)
        shapes[f"{prefix}.attn.{p}.b"] = (d,)
    shapes[f"{prefix}.mlp.fc1.w"] = (d, mlp)
    shapes[f"{prefix}.mlp.fc1.b"] = (mlp,)
    shapes[f"{prefix}.mlp.fc2.w"] = (mlp, d)
    shapes[f"{prefix}.mlp.fc2.b"] = (d,)
    return shapes


def param_shapes(arch: ArchConfig, vocab: TextVocab) -> dict[str, tuple[int, ...]]:
    d, dt, e = arch.width, arch.text_width, arch.embed_dim
    pdim = arch.patch_size * arch.patch_size * arch.channels
    shapes: dict[str, tuple[int, ...]] = {
        "vis.patch.w": (pdim, d),
        "vis.patch.b": (d,),
        "vis.cls": (d,),
        "vis.pos": (arch.seq_len + 1, d),
    }
    for i in range(arch.depth):
        shapes.update(_block_shapes(f"vis.blocks.{i}", d, d * arch.mlp_ratio))
    shapes.update({"vis.ln_post.w": (d,), "vis.ln_post.b": (d,), "vis.proj": (d, e)})
    shapes.update({"txt.tok": (len(vocab.words), dt), "txt.pos": (vocab.max_len, dt)})
    for i in range(arch.text_depth):
        shapes.update(_block_shapes(f"txt.blocks.{i}", dt, dt * arch.mlp_ratio))
    shapes.update({"txt.ln_final.w": (dt,), "txt.ln_final.b": (dt,), "txt.proj": (dt, e)})
    shapes["logit_scale"] = (1,)
    return shapes


def init_params(arch: ArchConfig, vocab: TextVocab, rng: RngStream, dtype=torch.float64) -> Params:
    """Truncated-normal weights (std 0.02, clipped at 2 std), zero biases, unit LN gains."""
    params = {}
    for name, shape in param_shapes(arch, vocab).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "logit_scale":
            arr = np.array([math.log(1 / 0.07)])
        elif ".ln" in name and leaf == "w":
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        else:
            n = int(np.prod(shape))
            arr = rng.split(name).truncated_normal(n, std=0.02).reshape(shape)
        params[name] = torch.tensor(arr, dtype=dtype)
    return params


# -- forward passes ---------------------------------------------------------------------


def _block(p: Params, prefix: str, x: torch.Tensor, heads: int) -> torch.Tensor:
    b, n, d = x.shape
    hd = d // heads
    h = nc.layer_norm(x, p[f"{prefix}.ln1.w"], p[f"{prefix}.ln1.b"])

    def split(t):
        return t.reshape(b, n, heads, hd).transpose(1, 2)

    q = split(nc.linear(h, p[f"{prefix}.attn.q.w"], p[f"{prefix}.attn.q.b"]))
    k = split(nc.linear(h, p[f"{prefix}.attn.k.w"], p[f"{prefix}.attn.k.b"]))
    v = split(nc.linear(h, p[f"{prefix}.attn.v.w"], p[f"{prefix}.attn.v.b"]))
    a = nc.attention(q, k, v).transpose(1, 2).reshape(b, n, d)
    x = x + nc.linear(a, p[f"{prefix}.attn.o.w"], p[f"{prefix}.attn.o.b"])
    h = nc.layer_norm(x, p[f"{prefix}.ln2.w"], p[f"{prefix}.ln2.b"])
    h = nc.gelu(nc.linear(h, p[f"{prefix}.mlp.fc1.w"], p[f"{prefix}.mlp.fc1.b"]))
    return x + nc.linear(h, p[f"{prefix}.mlp.fc2.w"], p[f"{prefix}.mlp.fc2.b"])


def patchify(images: torch.Tensor, patch: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, L, P*P*C), patches in row-major grid order."""
    b, c, h, w = images.shape
    x = images.reshape(b, c, h // patch, patch, w // patch, patch)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def encode_images(params: Params, arch: ArchConfig, images: torch.Tensor) -> EncoderOutput:
    """Encode a batch ``(B, C, H, W)`` of images in [0, 1]."""
    expect = (arch.channels, arch.image_size, arch.image_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expect:
        raise ValueError(f"expected images of shape (B, {expect}), got {tuple(images.shape)}")
    p = params
    images = (images.to(p["vis.patch.w"].dtype) - 0.5) / 0.25
    x = nc.linear(patchify(images, arch.patch_size), p["vis.patch.w"], p["vis.patch.b"])
    cls = p["vis.cls"].expand(x.shape[0], 1, -1)
    x = torch.cat([cls, x], dim=1) + p["vis.pos"]
    for i in range(arch.depth):
        x = _block(p, f"vis.blocks.{i}", x, arch.heads)
    x = nc.layer_norm(x, p["vis.ln_post.w"], p["vis.ln_post.b"])
    proj = nc.matmul(x, p["vis.proj"])
    return EncoderOutput(
        cls=nc.l2_normalize(proj[:, 0]),
        seq=nc.l2_normalize(proj[:, 1:]),
        raw_seq=x[:, 1:],
    )


def encode_image(params: Params, arch: ArchConfig, image) -> EncoderOutput:
    """Encode one ``H x W x C`` image; outputs keep a leading batch axis of 1."""
    img = torch.as_tensor(np.asarray(image))
    if img.ndim != 3:
        raise ValueError(f"expected an H x W x C image, got shape {tuple(img.shape)}")
    return encode_images(params, arch, img.permute(2, 0, 1).unsqueeze(0))


def encode_texts(params: Params, arch: ArchConfig, vocab: TextVocab, class_ids=None) -> torch.Tensor:
    """Prompt embeddings ``(n, E)``; all classes when ``class_ids`` is None."""
    toks = vocab.token_matrix()
    if class_ids is not None:
        ids = [int(c) for c in class_ids]
        for c in ids:
            if not 0 <= c < vocab.n_classes:
                raise KeyError(f"unknown class id {c}")
        toks = toks[ids]
    p = params
    x = p["txt.tok"][toks] + p["txt.pos"][: toks.shape[1]]
    for i in range(arch.text_depth):
        x = _block(p, f"txt.blocks.{i}", x, arch.text_heads)
    x = nc.layer_norm(x, p["txt.ln_final.w"], p["txt.ln_final.b"])
    return nc.l2_normalize(nc.matmul(x.mean(dim=1), p["txt.proj"]))


def encode_text(params: Params, arch: ArchConfig, vocab: TextVocab, class_id: int) -> torch.Tensor:
    return encode_texts(params, arch, vocab, [class_id])[0]


def scale_factor(params: Params) -> torch.Tensor:
    """exp(logit_scale) with the scale clamped at 100."""
    return torch.exp(torch.clamp(params["logit_scale"], max=LOGIT_SCALE_MAX))[0]


@dataclass
class Model:
    """Architecture, prompt vocabulary and parameters bundled for evaluation."""

    arch: ArchConfig
    vocab: TextVocab
    params: Params

    def encode_images(self, images: torch.Tensor) -> EncoderOutput:
        return encode_images(self.params, self.arch, images)

    def encode_texts(self, class_ids=None) -> torch.Tensor:
        return encode_texts(self.params, self.arch, self.vocab, class_ids)


# -- contrastive pretraining ---------------------------------------------------------


def info_nce(img: torch.Tensor, txt: torch.Tensor, scale) -> torch.Tensor:
    """Symmetric InfoNCE over matched rows of ``img`` and ``txt``."""
    logits = scale * nc.matmul(img, txt.T)
    idx = torch.arange(logits.shape[0])
    li = -nc.log_softmax(logits, dim=1)[idx, idx].mean()
    lt = -nc.log_softmax(logits, dim=0)[idx, idx].mean()
    return 0.5 * (li + lt)


@dataclass
class PretrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 30
    weight_decay: float = 0.01


def clip_pretrain(
    params: Params,
    arch: ArchConfig,
    vocab: TextVocab,
    images: torch.Tensor,
    captions: torch.Tensor,
    config: PretrainConfig,
    rng: RngStream,
    on_step=None,
) -> Params:
    """Full-parameter AdamW on symmetric InfoNCE(CLS, prompt of caption class).

    ``images`` is ``(N, C, H, W)``, ``captions`` the dominant class per image.
    Returns new parameters; the input dict is left untouched.
    """
    from .galore import AdamWConfig, GaLoreAdamW, Schedule

    params = {k: v.detach().clone() for k, v in params.items()}
    n = images.shape[0]
    steps_per_epoch = max(1, n // config.batch_size)
    total = config.epochs * steps_per_epoch
    opt = GaLoreAdamW(
        params,
        {k: "adamw" for k in params},
        Schedule(config.lr, config.warmup, total, "cosine"),
        AdamWConfig(weight_decay=config.weight_decay),
    )
    images = images.to(params["vis.patch.w"].dtype)
    step = 0
    for epoch in range(config.epochs):
        order = torch.from_numpy(rng.split(f"epoch/{epoch}").permutation(n))
        for s in range(steps_per_epoch):
            idx = order[s * config.batch_size : (s + 1) * config.batch_size]
            cap = captions[idx]

            def loss_fn(p):
                out = encode_images(p, arch, images[idx])
                return info_nce(out.cls, encode_texts(p, arch, vocab)[cap], scale_factor(p))

            try:
                loss, g = nc.value_and_grad(loss_fn, params)
                opt.step(params, g)
            except nc.NonFiniteError as err:
                raise nc.NonFiniteError(err.op, f"pretraining diverged at step {step}") from err
            if on_step is not None:
                on_step(step, float(loss), params)
            step += 1
    return params
