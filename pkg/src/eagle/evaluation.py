"""Zero-shot accuracy (CLS and token sequence), FP@K, linear probing, drift."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import encoders as enc
from .data import DatasetManifest, image_tensor

log = logging.getLogger(__name__)

FP_KS = (1, 3, 5)


@dataclass
class EvalReport:
    cls_acc: float
    seq_acc: float
    fp_at: dict[int, float] = field(default_factory=dict)
    probe_cls_acc: float | None = None
    probe_seq_acc: float | None = None
    n_samples: int = 0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ValueError("EvalReport needs n_samples > 0")
        for v in [self.cls_acc, self.seq_acc, *self.fp_at.values(), self.probe_cls_acc, self.probe_seq_acc]:
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"fraction out of range: {v}")

    def as_dict(self) -> dict[str, float | int]:
        d: dict[str, float | int] = {"cls_acc": self.cls_acc, "seq_acc": self.seq_acc}
        for k, v in sorted(self.fp_at.items()):
            d[f"fp{k}"] = v
        if self.probe_cls_acc is not None:
            d["probe_cls_acc"] = self.probe_cls_acc
        if self.probe_seq_acc is not None:
            d["probe_seq_acc"] = self.probe_seq_acc
        d["n_samples"] = self.n_samples
        return d


def format_report(values: dict) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in values.items())


def write_report(path, report: EvalReport, extra: dict | None = None) -> None:
    values = dict(report.as_dict())
    values.update(extra or {})
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_report(values))


def read_report(path) -> dict[str, float]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def report_from_dict(d: dict) -> EvalReport:
    return EvalReport(
        cls_acc=d["cls_acc"],
        seq_acc=d["seq_acc"],
        fp_at={int(k[2:]): v for k, v in d.items() if k.startswith("fp") and k[2:].isdigit()},
        probe_cls_acc=d.get("probe_cls_acc"),
        probe_seq_acc=d.get("probe_seq_acc"),
        n_samples=int(d["n_samples"]),
    )


# -- feature extraction ----------------------------------------------------------------


@dataclass
class SplitFeatures:
    cls: torch.Tensor  # (N, E)
    seq: torch.Tensor  # (N, L, E)
    labels: torch.Tensor  # (N,) dominant class
    gt_sets: list[set[int]]


@torch.no_grad()
def encode_split(model: enc.Model, manifest: DatasetManifest, split: str = "val", chunk: int = 512) -> SplitFeatures:
    ids = manifest.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    samples = [manifest.samples[i] for i in ids]
    cls, seq = [], []
    for s in range(0, len(samples), chunk):
        out = model.encode_images(image_tensor(samples[s : s + chunk]))
        cls.append(out.cls)
        seq.append(out.seq)
    return SplitFeatures(
        torch.cat(cls),
        torch.cat(seq),
        torch.tensor([smp.dominant_class for smp in samples]),
        [smp.classes for smp in samples],
    )


def cls_logits(feats: SplitFeatures, text: torch.Tensor) -> torch.Tensor:
    return feats.cls @ text.T


def seq_logits(feats: SplitFeatures, text: torch.Tensor) -> torch.Tensor:
    """Per-token cosine logits averaged over the sequence: ``(N, K)``."""
    return (feats.seq @ text.T).mean(dim=1)


def accuracy(logits: torch.Tensor, labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == labels).double().mean())


def fp_at_k(logits: torch.Tensor, gt_sets: list[set[int]], ks=FP_KS) -> dict[int, float]:
    """Mean over images of |top-K \\ GT| / K (per-image ratio, then averaged)."""
    n_classes = logits.shape[1]
    for k in ks:
        if k > n_classes:
            raise ValueError(f"K={k} exceeds vocabulary size {n_classes}")
    order = torch.argsort(logits, dim=1, descending=True, stable=True)
    out = {}
    for k in ks:
        ratios = [sum(int(c) not in gt for c in order[i, :k]) / k for i, gt in enumerate(gt_sets)]
        out[k] = float(np.mean(ratios))
    return out


def zero_shot_cls(model: enc.Model, manifest: DatasetManifest, split: str = "val", feats=None) -> float:
    feats = feats or encode_split(model, manifest, split)
    with torch.no_grad():
        return accuracy(cls_logits(feats, model.encode_texts()), feats.labels)


def zero_shot_seq(model: enc.Model, manifest: DatasetManifest, split: str = "val", feats=None) -> float:
    feats = feats or encode_split(model, manifest, split)
    with torch.no_grad():
        return accuracy(seq_logits(feats, model.encode_texts()), feats.labels)


def false_positives_at_k(model: enc.Model, manifest: DatasetManifest, ks=FP_KS, split: str = "val",
                         feats=None) -> dict[int, float]:
    feats = feats or encode_split(model, manifest, split)
    with torch.no_grad():
        return fp_at_k(seq_logits(feats, model.encode_texts()), feats.gt_sets, ks)


# -- linear probing -------------------------------------------------------------------


def fit_probe(features: torch.Tensor, labels: torch.Tensor, n_classes: int, lr: float = 0.1,
              epochs: int = 500) -> tuple[torch.Tensor, torch.Tensor]:
    """Softmax regression by full-batch gradient descent from zero weights.

    ``features`` is ``(N, E)`` or ``(N, L, E)``; for sequences the logits of
    every token are averaged.
    """
    features = features.detach()
    w = torch.zeros(features.shape[-1], n_classes, dtype=features.dtype, requires_grad=True)
    b = torch.zeros(n_classes, dtype=features.dtype, requires_grad=True)
    for _ in range(epochs):
        loss = torch.nn.functional.cross_entropy(probe_logits(features, w, b), labels)
        gw, gb = torch.autograd.grad(loss, [w, b])
        with torch.no_grad():
            w -= lr * gw
            b -= lr * gb
    return w.detach(), b.detach()


def probe_logits(features, w, b):
    logits = features @ w + b
    return logits.mean(dim=1) if features.ndim == 3 else logits


def linear_probe(model: enc.Model, manifest: DatasetManifest, mode: str = "cls", lr: float = 0.1,
                 epochs: int = 500, train=None, val=None) -> float:
    """Val accuracy of a linear classifier trained on frozen train-split features."""
    if mode not in ("cls", "seq"):
        raise ValueError(f"probe mode must be cls or seq, got {mode!r}")
    train = train or encode_split(model, manifest, "train")
    val = val or encode_split(model, manifest, "val")
    pick = (lambda f: f.cls) if mode == "cls" else (lambda f: f.seq)
    w, b = fit_probe(pick(train), train.labels, manifest.K, lr, epochs)
    with torch.no_grad():
        return accuracy(probe_logits(pick(val), w, b), val.labels)


# -- full battery -----------------------------------------------------------------------


def evaluate(model: enc.Model, manifest: DatasetManifest, probe: bool = False, probe_lr: float = 0.1,
             probe_epochs: int = 500, split: str = "val") -> EvalReport:
    feats = encode_split(model, manifest, split)
    with torch.no_grad():
        text = model.encode_texts()
        cls_acc = accuracy(cls_logits(feats, text), feats.labels)
        seq_l = seq_logits(feats, text)
        seq_acc = accuracy(seq_l, feats.labels)
        ks = [k for k in FP_KS if k <= manifest.K]
        fps = fp_at_k(seq_l, feats.gt_sets, ks)
    report = EvalReport(cls_acc, seq_acc, fps, n_samples=len(feats.labels))
    if probe:
        train = encode_split(model, manifest, "train")
        report.probe_cls_acc = linear_probe(model, manifest, "cls", probe_lr, probe_epochs, train, feats)
        report.probe_seq_acc = linear_probe(model, manifest, "seq", probe_lr, probe_epochs, train, feats)
    return report


def drift_report(before: EvalReport, after: EvalReport) -> dict[str, float]:
    """Arithmetic after-minus-before deltas."""
    if before.n_samples != after.n_samples:
        log.warning("drift report over different sample counts: %d vs %d", before.n_samples, after.n_samples)
    out = {"cls_delta": after.cls_acc - before.cls_acc, "seq_delta": after.seq_acc - before.seq_acc}
    for k in sorted(set(before.fp_at) & set(after.fp_at)):
        out[f"fp{k}_delta"] = after.fp_at[k] - before.fp_at[k]
    if before.probe_cls_acc is not None and after.probe_cls_acc is not None:
        out["probe_cls_delta"] = after.probe_cls_acc - before.probe_cls_acc
    if before.probe_seq_acc is not None and after.probe_seq_acc is not None:
        out["probe_seq_delta"] = after.probe_seq_acc - before.probe_seq_acc
    return out

