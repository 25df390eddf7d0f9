import math

import numpy as np
import pytest

from saliency_tal import config, synth
from saliency_tal import model as mdl
from saliency_tal import numerics as nx
from saliency_tal.config import TrainConfig
from saliency_tal.postprocess import temporal_iou
from saliency_tal.training import (AdamW, NumericalError, clip_grad_norm, decays, learning_rate, load_checkpoint,
                                   overfit_probe, save_checkpoint, train)

SMALL_DATA = ["data.num_classes=3", "data.num_recordings=3", "data.recording_length_s=30",
              "data.feature_dim=8"]
TINY_MODEL = ["model.d_model=16", "model.heads=2", "model.levels=3"]


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    cfg = config.load(None, SMALL_DATA)
    manifest, feats = synth.generate_dataset(cfg.data)
    synth.write_dataset(root, manifest, feats)
    return root, manifest


@pytest.fixture(scope="module")
def toy_batch():
    cfg = config.load(None, ["data.num_classes=4", "data.num_recordings=3", "data.recording_length_s=40"])
    manifest, feats = synth.generate_dataset(cfg.data)
    clips = manifest.split("train")[:8]
    return cfg, np.stack([feats[c.clip_id] for c in clips]).astype(np.float32), [c.annotations for c in clips]


def _steps(cfg, batch, anns, lr, n, steps_per_epoch=None):
    """``n`` optimizer steps at constant ``lr``, or on the training schedule when ``steps_per_epoch`` is set."""
    mcfg = cfg.model_config()
    losses = []
    with nx.precision(32):
        params = mdl.init_params(mcfg, cfg.train.seed)
        opt = AdamW(params, cfg.train)
        for _ in range(n):
            for p in params.values():
                p.grad = None
            total, _, _ = mdl.batch_loss(params, batch, anns, mcfg)
            losses.append(float(total.data))
            total.backward()
            clip_grad_norm(params, cfg.train.grad_clip)
            opt.step(lr if steps_per_epoch is None else learning_rate(cfg.train, opt.step_count, steps_per_epoch))
    return losses, params


def test_zero_lr_leaves_parameters_unchanged(toy_batch):
    cfg, batch, anns = toy_batch
    start = {k: p.data.copy() for k, p in mdl.init_params(cfg.model_config(), cfg.train.seed).items()}
    _, params = _steps(cfg, batch, anns, 0.0, 3)
    assert all(np.array_equal(params[k].data, v) for k, v in start.items())


@pytest.mark.parametrize("seed", range(5))
def test_loss_decreases_on_fixed_batch(toy_batch, seed):
    cfg, batch, anns = toy_batch
    cfg = config.from_dict(cfg.to_dict() | {"train": {"seed": seed}})
    # 200 training clips at batch 8, as in the default run
    losses, _ = _steps(cfg, batch, anns, None, 11, steps_per_epoch=25)
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_learning_rate_schedule():
    c = TrainConfig(epochs=10, warmup_epochs=2, lr=1e-3)
    assert learning_rate(c, 0, 5) == pytest.approx(1e-4)
    assert learning_rate(c, 9, 5) == pytest.approx(1e-3)
    assert learning_rate(c, 10, 5) == pytest.approx(1e-3)
    assert learning_rate(c, 30, 5) == pytest.approx(0.5e-3)
    assert learning_rate(c, 50, 5) == pytest.approx(0.0, abs=1e-18)
    rates = [learning_rate(c, s, 5) for s in range(10, 50)]
    assert all(b <= a for a, b in zip(rates, rates[1:]))


def test_adamw_first_step_and_decay_exclusion():
    c = TrainConfig(weight_decay=0.1)
    with nx.precision(64):
        params = {"w.weight": nx.Tensor(np.array([1.0, -2.0]), requires_grad=True),
                  "w.bias": nx.Tensor(np.array([1.0]), requires_grad=True)}
        params["w.weight"].grad = np.array([0.5, -0.25])
        params["w.bias"].grad = np.array([0.0])
        AdamW(params, c).step(0.01)
    # first bias-corrected Adam step is sign(g) up to eps
    np.testing.assert_allclose(params["w.weight"].data, [1 - 0.01 * (1 + 0.1), -2 + 0.01 * (1 + 0.2)], rtol=1e-6)
    assert params["w.bias"].data[0] == 1.0


def test_decay_applies_to_weights_only():
    cfg = config.load().model_config()
    names = mdl.init_params(cfg, 0)
    excluded = sorted(k for k in names if not decays(k))
    assert excluded and all(k.endswith(".bias") or k.endswith(".gain") for k in excluded)
    assert all(k.endswith(".weight") or k.startswith("scale.") for k in names if decays(k))
    assert not any(decays(k) for k in names if ".ln" in k and k.endswith(".gain"))


def test_clip_grad_norm_keeps_direction(rng):
    with nx.precision(64):
        params = {k: nx.Tensor(rng.normal(size=s), requires_grad=True) for k, s in (("a", (3, 4)), ("b", (5,)))}
    for p in params.values():
        p.grad = rng.normal(size=p.shape) * 10
    before = np.concatenate([p.grad.ravel() for p in params.values()])
    norm = clip_grad_norm(params, 1.0)
    after = np.concatenate([p.grad.ravel() for p in params.values()])
    assert norm == pytest.approx(np.linalg.norm(before))
    assert np.linalg.norm(after) == pytest.approx(1.0)
    np.testing.assert_allclose(after / np.linalg.norm(after), before / norm, rtol=1e-12)
    small = after.copy()
    clip_grad_norm(params, 5.0)
    np.testing.assert_array_equal(np.concatenate([p.grad.ravel() for p in params.values()]), small)


def test_overfit_single_clip():
    cfg = config.load(None, ["data.num_classes=4"])
    manifest, feats = synth.generate_dataset(cfg.data)
    picked = [c for c in manifest.clips if len(c.annotations) == 1 and c.annotations[0].label != 0
              and c.annotations[0].end_s - c.annotations[0].start_s < 9][:2]
    picked.append(next(c for c in manifest.clips if len(c.annotations) == 1))
    for clip in picked:
        x = feats[clip.clip_id].astype(np.float32)
        loss, params = overfit_probe(x, clip.annotations, cfg, steps=500, target=0.05)
        assert loss < 0.05, clip.clip_id
        with nx.precision(32):
            top = mdl.detect(params, x, clip.clip_id, cfg.model_config(), cfg.nms)[0]
        gt = clip.annotations[0]
        assert top.label == gt.label
        assert temporal_iou((top.start_s, top.end_s), (gt.start_s, gt.end_s)) > 0.8


def test_empty_clip_drives_classification_loss_to_zero():
    cfg = config.load(None, ["data.num_classes=4"])
    x = np.random.default_rng(0).normal(size=(72, 32)).astype(np.float32)
    loss, params = overfit_probe(x, [], cfg, steps=100)
    with nx.precision(32), nx.no_grad():
        _, cls, reg = mdl.batch_loss(params, x[None], [[]], cfg.model_config())
    assert float(cls.data) < 1e-3 and float(reg.data) == 0.0 and loss < 1e-3


def test_checkpoint_file_round_trip(tmp_path, tiny_data):
    root, manifest = tiny_data
    cfg = config.load(None, SMALL_DATA + TINY_MODEL + ["train.epochs=1", "train.batch_size=4"])
    ck = train(root, manifest, cfg).checkpoint
    save_checkpoint(tmp_path / "a.ckpt", ck)
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:8] == b"SALTCKPT"
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config_hash == cfg.model_hash() and (back.epoch, back.step) == (ck.epoch, ck.step)
    for group in ("params", "m", "v"):
        a, b = getattr(ck, group), getattr(back, group)
        assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    (tmp_path / "bad.ckpt").write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_resume_is_bit_identical(tmp_path, tiny_data):
    root, manifest = tiny_data
    cfg = config.load(None, SMALL_DATA + TINY_MODEL + ["train.epochs=3", "train.batch_size=4",
                                                       "train.warmup_epochs=1"])
    for name in ("full", "part"):
        (tmp_path / name).mkdir()
    full = train(root, manifest, cfg, out_dir=tmp_path / "full")
    train(root, manifest, cfg, out_dir=tmp_path / "part", stop_epoch=1)
    resumed = train(root, manifest, cfg, out_dir=tmp_path / "part",
                    resume=load_checkpoint(tmp_path / "part" / "last.ckpt"))
    assert resumed.history == full.history
    assert all(np.array_equal(full.checkpoint.params[k], resumed.checkpoint.params[k]) for k in full.checkpoint.params)
    assert (tmp_path / "full" / "last.ckpt").read_bytes() == (tmp_path / "part" / "last.ckpt").read_bytes()
    assert (tmp_path / "full" / "metrics.jsonl").read_text() == (tmp_path / "part" / "metrics.jsonl").read_text()


def test_resume_rejects_other_model(tiny_data):
    root, manifest = tiny_data
    cfg = config.load(None, SMALL_DATA + TINY_MODEL + ["train.epochs=1"])
    ck = train(root, manifest, cfg).checkpoint
    other = config.load(None, SMALL_DATA + TINY_MODEL + ["train.epochs=1", "model.window=5"])
    with pytest.raises(ValueError):
        train(root, manifest, other, resume=ck)


def test_non_finite_loss_names_clip(tmp_path):
    cfg = config.load(None, SMALL_DATA + TINY_MODEL + ["train.epochs=1", "train.batch_size=1"])
    manifest, feats = synth.generate_dataset(cfg.data)
    victim = manifest.split("train")[0].clip_id
    feats[victim] = feats[victim].copy()
    feats[victim][3, 2] = np.nan
    synth.write_dataset(tmp_path, manifest, feats)
    with pytest.raises(NumericalError, match=victim):
        train(tmp_path, manifest, cfg)


def test_history_fields(tiny_data):
    root, manifest = tiny_data
    cfg = config.load(None, SMALL_DATA + TINY_MODEL + ["train.epochs=2"])
    hist = train(root, manifest, cfg).history
    assert [h["epoch"] for h in hist] == [1, 2]
    for h in hist:
        assert set(h) == {"epoch", "step", "loss", "cls_loss", "reg_loss", "test_mAP"}
        assert math.isclose(h["loss"], h["cls_loss"] + h["reg_loss"], rel_tol=1e-6)
