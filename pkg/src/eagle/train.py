"""Run orchestration: dataset, contrastive pretraining, grounding tuning, ablation grid."""

from __future__ import annotations

import logging
from pathlib import Path

import torch

from . import checkpoint as ckpt
from . import data as dt
from . import encoders as enc
from . import evaluation as ev
from . import galore
from . import grounding
from . import losses
from . import numeric as nc
from .config import TrainConfig

log = logging.getLogger(__name__)

CSV_HEADER = "step,lr,loss_ins,loss_ce,loss_total,cls_acc,seq_acc,fp1,fp3,fp5"

# ablation grid: optimizer x supervision
ABLATION_GRID = [
    (opt, sup) for opt in ("adamw", "galore_adamw") for sup in ("cls", "seq", "both")
]


def torch_dtype(cfg: TrainConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def arch_of(cfg: TrainConfig) -> enc.ArchConfig:
    return enc.ArchConfig(
        image_size=cfg.image_size, patch_size=cfg.patch_size, width=cfg.width, embed_dim=cfg.embed_dim,
        depth=cfg.depth, heads=cfg.heads, text_width=cfg.text_width, text_depth=cfg.text_depth,
        text_heads=cfg.text_heads, mlp_ratio=cfg.mlp_ratio,
    )


def data_config_of(cfg: TrainConfig) -> dt.DataConfig:
    return dt.DataConfig(
        n_images=cfg.n_images, n_classes=cfg.n_classes, image_size=cfg.image_size,
        min_objects=cfg.min_objects, max_objects=cfg.max_objects, zipf=cfg.zipf,
        color_jitter=cfg.color_jitter, **dt.sizes_for(cfg.image_size),
    )


def root_stream(cfg: TrainConfig) -> nc.RngStream:
    return nc.RngStream(cfg.seed)


def configure_threads() -> None:
    torch.set_num_threads(dt.worker_count())


def generate_dataset(cfg: TrainConfig, root=None) -> dt.DatasetManifest:
    return dt.generate(data_config_of(cfg), root_stream(cfg), root)


def load_dataset(cfg: TrainConfig) -> dt.DatasetManifest:
    return dt.load(cfg.data_root)


def new_model(cfg: TrainConfig, class_names) -> enc.Model:
    vocab = enc.TextVocab(list(class_names))
    arch = arch_of(cfg)
    params = enc.init_params(arch, vocab, root_stream(cfg).split("init"), torch_dtype(cfg))
    return enc.Model(arch, vocab, params)


def load_model(cfg: TrainConfig, path, class_names) -> enc.Model:
    params, _, _ = ckpt.load_checkpoint(path)
    model = new_model(cfg, class_names)
    missing = set(model.params) ^ set(params)
    if missing:
        raise ckpt.CheckpointError(f"{path}: parameter set does not match the configured architecture "
                                   f"({sorted(missing)[:4]}...)")
    for k, v in params.items():
        if tuple(v.shape) != tuple(model.params[k].shape):
            raise ckpt.CheckpointError(f"{path}: {k} has shape {tuple(v.shape)}, expected "
                                       f"{tuple(model.params[k].shape)}")
    model.params = {k: params[k].to(torch_dtype(cfg)) for k in model.params}
    return model


# -- contrastive pretraining -----------------------------------------------------------


def pretrain(cfg: TrainConfig, manifest: dt.DatasetManifest, on_step=None) -> enc.Model:
    model = new_model(cfg, manifest.class_names)
    ids = manifest.ids("train")
    images = dt.image_tensor([manifest.samples[i] for i in ids], torch_dtype(cfg))
    captions = torch.tensor([manifest.samples[i].dominant_class for i in ids])
    pc = enc.PretrainConfig(cfg.pretrain_epochs, cfg.pretrain_batch_size, cfg.pretrain_lr,
                            cfg.pretrain_warmup, cfg.pretrain_weight_decay)
    model.params = enc.clip_pretrain(model.params, model.arch, model.vocab, images, captions, pc,
                                     root_stream(cfg).split("pretrain"), on_step)
    return model


# -- grounding objective ----------------------------------------------------------------


def grounding_loss(params, arch: enc.ArchConfig, vocab: enc.TextVocab, batch: dt.Batch,
                   cfg: TrainConfig) -> losses.LossBreakdown:
    """Pooled-token (and/or CLS) objective for one batch, by ``cfg.supervision``."""
    out = enc.encode_images(params, arch, batch.images)
    text = enc.encode_texts(params, arch, vocab)
    targets = batch.class_ids
    parts = []
    if cfg.supervision in ("seq", "both"):
        parts.append(grounding.pool_batch(out.raw_seq, batch.selected, params["vis.proj"]))
    if cfg.supervision in ("cls", "both"):
        parts.append(out.cls)
    emb = torch.cat(parts)
    targets = targets.repeat(len(parts))
    log_scale = torch.clamp(params["logit_scale"], max=enc.LOGIT_SCALE_MAX)
    return losses.total_loss(emb, targets, text, log_scale, cfg.sig_scale, cfg.sig_bias)


class ImageSampler:
    """Epoch-wise pass over training images, one uniformly drawn mask each."""

    def __init__(self, manifest: dt.DatasetManifest, rng: nc.RngStream):
        self.manifest = manifest
        self.ids = manifest.ids("train")
        self.rng = rng
        self.epoch = 0
        self.pos = 0

    def __next__(self):
        order = self.rng.split(f"epoch/{self.epoch}").permutation(len(self.ids))
        image_id = self.ids[int(order[self.pos])]
        k, _ = grounding.sample_mask(self.manifest.samples[image_id],
                                     grounding.mask_stream(self.rng, image_id, self.epoch))
        self.pos += 1
        if self.pos == len(self.ids):
            self.epoch, self.pos = self.epoch + 1, 0
        return image_id, k

    def take(self, n):
        return [next(self) for _ in range(n)]

    def state(self):
        return self.epoch, self.pos

    def set_state(self, epoch, pos):
        self.epoch, self.pos = int(epoch), int(pos)


def make_optimizer(cfg: TrainConfig, params) -> galore.GaLoreAdamW:
    groups = galore.select_params(params, cfg.optimizer, cfg.supervision, cfg.freeze_text, cfg.freeze_cls)
    schedule = galore.Schedule(cfg.lr, cfg.warmup, cfg.total_steps, cfg.schedule)
    hyper = galore.AdamWConfig(
        weight_decay=cfg.weight_decay, scale=cfg.galore_scale, rank=cfg.galore_rank,
        refresh_period=cfg.galore_refresh_period, projection_type=cfg.galore_projection_type,
    )
    return galore.GaLoreAdamW(params, groups, schedule, hyper)


class NumericalFailure(RuntimeError):
    def __init__(self, step: int, cause: Exception):
        self.step = step
        super().__init__(f"numerical failure at step {step}: {cause}")


def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class Tuner:
    """Grounding-stage training loop with exact checkpoint/resume."""

    def __init__(self, cfg: TrainConfig, manifest: dt.DatasetManifest, model: enc.Model, out_dir):
        self.cfg = cfg
        self.manifest = manifest
        self.model = model
        self.params = {k: v.detach().clone() for k, v in model.params.items()}
        self.out_dir = Path(out_dir)
        self.opt = make_optimizer(cfg, self.params)
        rng = root_stream(cfg).split("sampler")
        self.sampler = dt.BalancedSampler(manifest, rng) if cfg.balanced else ImageSampler(manifest, rng)
        self.step = 0
        self.dtype = torch_dtype(cfg)

    @property
    def csv_path(self) -> Path:
        return self.out_dir / "metrics.csv"

    def current_model(self) -> enc.Model:
        return enc.Model(self.model.arch, self.model.vocab, self.params)

    def state_rng(self) -> dict[str, int]:
        epoch, pos = self.sampler.state()
        return {"sampler.seed": self.sampler.rng.seed, "sampler.epoch": epoch, "sampler.pos": pos,
                "step": self.step}

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self.params, self.opt.state_tensors(), self.state_rng())

    def resume(self, path) -> None:
        params, opt_state, rng = ckpt.load_checkpoint(path)
        if set(params) != set(self.params):
            raise ckpt.CheckpointError(f"{path}: parameter names do not match the model")
        if rng.get("sampler.seed") != self.sampler.rng.seed:
            raise ckpt.CheckpointError(f"{path}: sampler seed differs from the configured seed")
        self.params = {k: params[k].to(self.dtype).clone() for k in self.params}
        self.opt = make_optimizer(self.cfg, self.params)
        self.opt.load_state_tensors(opt_state)
        self.sampler.set_state(rng["sampler.epoch"], rng["sampler.pos"])
        self.step = rng["step"]
        if self.csv_path.exists():
            keep = [ln for ln in self.csv_path.read_text().splitlines()[1:] if int(ln.split(",")[0]) < self.step]
            self.csv_path.write_text("".join(f"{ln}\n" for ln in [CSV_HEADER, *keep]))

    def train_step(self) -> tuple[float, losses.LossBreakdown]:
        entries = self.sampler.take(self.cfg.batch_size)
        batch = dt.make_batch(entries, self.manifest, self.cfg.patch_size, self.cfg.theta, self.dtype)
        box = {}

        def loss_fn(p):
            box["b"] = grounding_loss(p, self.model.arch, self.model.vocab, batch, self.cfg)
            return box["b"].total

        try:
            _, grads = nc.value_and_grad(loss_fn, self.params)
            lr = self.opt.step(self.params, grads)
        except nc.NonFiniteError as err:
            raise NumericalFailure(self.step, err) from err
        return lr, box["b"]

    def run(self, stop_at: int | None = None, log_fn=None) -> ev.EvalReport | None:
        """Train until ``stop_at`` (default: total_steps); returns the last eval."""
        cfg = self.cfg
        stop_at = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if not self.csv_path.exists() or self.step == 0:
            self.csv_path.write_text(CSV_HEADER + "\n")
        report = None
        with self.csv_path.open("a") as csv:
            while self.step < stop_at:
                lr, b = self.train_step()
                l_ins, l_ce, total = b.floats()
                row = [str(self.step), _fmt(lr), _fmt(l_ins), _fmt(l_ce), _fmt(total)]
                done = self.step + 1
                if done % cfg.eval_every == 0 or done == cfg.total_steps:
                    report = ev.evaluate(self.current_model(), self.manifest)
                    row += [_fmt(report.cls_acc), _fmt(report.seq_acc)]
                    row += [_fmt(report.fp_at.get(k)) for k in (1, 3, 5)]
                    if log_fn:
                        log_fn(f"step {done}: loss {total:.4f} cls {report.cls_acc:.4f} "
                               f"seq {report.seq_acc:.4f} fp1 {report.fp_at.get(1, float('nan')):.4f}")
                else:
                    row += [""] * 5
                csv.write(",".join(row) + "\n")
                csv.flush()
                self.step = done
                if done % cfg.checkpoint_every == 0 or done == cfg.total_steps:
                    self.save(self.out_dir / f"step_{done:06d}.ckpt")
        return report


def tune(cfg: TrainConfig, manifest: dt.DatasetManifest, model: enc.Model, out_dir, resume=None,
         log_fn=None) -> tuple[ev.EvalReport, ev.EvalReport, Tuner]:
    """Evaluate the starting model, run the grounding stage, write final checkpoint and report."""
    before = ev.evaluate(model, manifest)
    tuner = Tuner(cfg, manifest, model, out_dir)
    if resume is not None:
        tuner.resume(resume)
    tuner.run(log_fn=log_fn)
    after = ev.evaluate(tuner.current_model(), manifest)
    out = Path(out_dir)
    tuner.save(out / "final.ckpt")
    extra = {f"before_{k}": v for k, v in before.as_dict().items() if k != "n_samples"}
    extra.update(ev.drift_report(before, after))
    ev.write_report(out / "final.report", after, extra)
    return before, after, tuner


def ablate(cfg: TrainConfig, manifest: dt.DatasetManifest, model: enc.Model, out_dir, log_fn=None):
    """One tuning run per (optimizer, supervision) cell; one report file each."""
    out_dir = Path(out_dir)
    results = {}
    for opt, sup in ABLATION_GRID:
        cell = cfg.replace(optimizer=opt, supervision=sup)
        name = f"{'galore' if opt == 'galore_adamw' else 'full'}_{sup}"
        if log_fn:
            log_fn(f"ablation cell {name}")
        before, after, _ = tune(cell, manifest, model, out_dir / name, log_fn=log_fn)
        extra = {f"before_{k}": v for k, v in before.as_dict().items() if k != "n_samples"}
        extra.update(ev.drift_report(before, after))
        ev.write_report(out_dir / f"ablate_{name}.report", after, extra)
        results[name] = (before, after)
    return results
