import pytest
import torch

from eagle import checkpoint as ck
from eagle import data as dt
from eagle import train
from eagle.numeric import RngStream


@pytest.fixture()
def run_cfg(tiny_cfg):
    return tiny_cfg.replace(total_steps=6, warmup=2, lr=1e-3, batch_size=4, eval_every=3, checkpoint_every=3)


def test_tuning_is_deterministic(run_cfg, tiny_manifest, tmp_path):
    for name in ("a", "b"):
        model = train.new_model(run_cfg, tiny_manifest.class_names)
        train.tune(run_cfg, tiny_manifest, model, tmp_path / name)
    a, b = (tmp_path / n / "metrics.csv" for n in ("a", "b"))
    assert a.read_bytes() == b.read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    rows = a.read_text().splitlines()
    assert rows[0] == train.CSV_HEADER and len(rows) == 7
    assert rows[3].split(",")[5] != "" and rows[1].split(",")[5] == ""


@pytest.mark.parametrize("balanced", [False, True])
def test_resume_matches_uninterrupted(run_cfg, tiny_manifest, tmp_path, balanced):
    cfg = run_cfg.replace(balanced=balanced)
    model = train.new_model(cfg, tiny_manifest.class_names)
    train.tune(cfg, tiny_manifest, model, tmp_path / "full")
    first = train.Tuner(cfg, tiny_manifest, model, tmp_path / "split")
    first.run(stop_at=4)  # runs past the step-3 checkpoint, as a crash would
    train.tune(cfg, tiny_manifest, model, tmp_path / "split", resume=tmp_path / "split" / "step_000003.ckpt")
    for f in ("metrics.csv", "final.ckpt"):
        assert (tmp_path / "full" / f).read_bytes() == (tmp_path / "split" / f).read_bytes()


def test_resume_rejects_other_seed(run_cfg, tiny_manifest, tmp_path):
    model = train.new_model(run_cfg, tiny_manifest.class_names)
    t = train.Tuner(run_cfg, tiny_manifest, model, tmp_path)
    t.run(stop_at=3)
    other = train.Tuner(run_cfg.replace(seed=1), tiny_manifest, model, tmp_path / "o")
    with pytest.raises(ck.CheckpointError, match="seed"):
        other.resume(tmp_path / "step_000003.ckpt")


def test_nan_raises_numerical_failure(run_cfg, tiny_manifest, tmp_path):
    model = train.new_model(run_cfg, tiny_manifest.class_names)
    t = train.Tuner(run_cfg, tiny_manifest, model, tmp_path)
    t.params["vis.proj"][0, 0] = float("nan")
    with pytest.raises(train.NumericalFailure, match="step 0"):
        t.train_step()


def test_source_model_untouched(run_cfg, tiny_manifest, tmp_path):
    model = train.new_model(run_cfg, tiny_manifest.class_names)
    keep = {k: v.clone() for k, v in model.params.items()}
    train.tune(run_cfg, tiny_manifest, model, tmp_path)
    assert all(torch.equal(keep[k], v) for k, v in model.params.items())


@pytest.mark.parametrize("mode", ["cls", "seq", "both"])
def test_grounding_loss_modes(run_cfg, tiny_manifest, mode):
    cfg = run_cfg.replace(supervision=mode)
    model = train.new_model(cfg, tiny_manifest.class_names)
    ids = tiny_manifest.ids("train")[:3]
    batch = dt.make_batch([(i, 0) for i in ids], tiny_manifest, cfg.patch_size, cfg.theta)
    b = train.grounding_loss(model.params, model.arch, model.vocab, batch, cfg)
    assert float(b.total) == float(b.l_ins) + float(b.l_ce)
    assert float(b.total) > 0


def test_cls_token_frozen_under_seq(run_cfg, tiny_manifest, tmp_path):
    model = train.new_model(run_cfg, tiny_manifest.class_names)
    _, _, tuner = train.tune(run_cfg, tiny_manifest, model, tmp_path)
    assert torch.equal(tuner.params["vis.cls"], model.params["vis.cls"])
    assert not torch.equal(tuner.params["vis.proj"], model.params["vis.proj"])


def test_image_sampler_covers_epoch(tiny_manifest):
    s = train.ImageSampler(tiny_manifest, RngStream(2))
    n = len(tiny_manifest.ids("train"))
    first = s.take(n)
    assert sorted(i for i, _ in first) == sorted(tiny_manifest.ids("train"))
    assert s.state() == (1, 0)


def test_ablation_writes_every_cell(run_cfg, tiny_manifest, tmp_path):
    cfg = run_cfg.replace(total_steps=2, eval_every=2, checkpoint_every=2)
    model = train.new_model(cfg, tiny_manifest.class_names)
    out = train.ablate(cfg, tiny_manifest, model, tmp_path)
    assert set(out) == {f"{o}_{s}" for o in ("full", "galore") for s in ("cls", "seq", "both")}
    assert len(list(tmp_path.glob("ablate_*.report"))) == 6
