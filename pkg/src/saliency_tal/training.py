"""Deterministic training: AdamW, warmup + cosine schedule, gradient clipping, checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as mdl
from . import numerics as nx
from .config import RunConfig, TrainConfig
from .evaluation import evaluate
from .numerics import Tensor
from .synth import ClipRecord, DatasetManifest, read_features

log = logging.getLogger(__name__)

MAGIC = b"SALTCKPT"
FORMAT_VERSION = 1


class NumericalError(RuntimeError):
    pass


def decays(name: str) -> bool:
    """Weight decay applies to everything except normalisation gains and biases."""
    return not (name.endswith(".bias") or (".ln" in name and name.endswith(".gain")))


@dataclass
class AdamW:
    params: dict[str, Tensor]
    cfg: TrainConfig
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for k, p in self.params.items():
            self.m.setdefault(k, np.zeros_like(p.data))
            self.v.setdefault(k, np.zeros_like(p.data))

    def step(self, lr: float) -> None:
        c = self.cfg
        self.step_count += 1
        bc1 = 1.0 - c.beta1 ** self.step_count
        bc2 = 1.0 - c.beta2 ** self.step_count
        for k in sorted(self.params):
            p = self.params[k]
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype)
            m, v = self.m[k], self.v[k]
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if decays(k):
                update = update + c.weight_decay * p.data
            p.data -= (lr * update).astype(p.data.dtype)


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [params[k].grad for k in sorted(params) if params[k].grad is not None]
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


def learning_rate(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup over ``warmup_epochs`` then cosine decay to zero; ``step`` counts from 0."""
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.epochs * steps_per_epoch
    if step < warm:
        return cfg.lr * (step + 1) / warm
    progress = (step - warm) / max(1, total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    epoch: int
    step: int
    config_hash: str
    meta: dict = field(default_factory=dict)


def save_checkpoint(path: Path, ck: Checkpoint) -> None:
    """Binary container: magic, version, config hash, JSON metadata, named float32 blobs."""
    blobs = [(f"param/{k}", a) for k, a in sorted(ck.params.items())]
    blobs += [(f"adam_m/{k}", a) for k, a in sorted(ck.m.items())]
    blobs += [(f"adam_v/{k}", a) for k, a in sorted(ck.v.items())]
    meta = json.dumps(ck.meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(bytes.fromhex(ck.config_hash))
        fh.write(struct.pack("<III", ck.epoch, ck.step, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            raw = name.encode()
            fh.write(struct.pack("<HB", len(raw), arr.ndim))
            fh.write(raw)
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: Path) -> Checkpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config_hash = data[12:44].hex()
    epoch, step, meta_len = struct.unpack_from("<III", data, 44)
    pos = 56
    meta = json.loads(data[pos:pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    groups = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        name_len, ndim = struct.unpack_from("<HB", data, pos)
        pos += 3
        name = data[pos:pos + name_len].decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        group, key = name.split("/", 1)
        groups[group][key] = arr
    return Checkpoint(groups["param"], groups["adam_m"], groups["adam_v"], epoch, step, config_hash, meta)


def params_from_checkpoint(ck: Checkpoint) -> dict[str, Tensor]:
    with nx.precision(32):
        return {k: Tensor(v, requires_grad=True) for k, v in ck.params.items()}


# ---------------------------------------------------------------- data


def load_split(root: Path, manifest: DatasetManifest, split: str) -> tuple[list[ClipRecord], dict[str, np.ndarray]]:
    clips = manifest.split(split)
    return clips, {c.clip_id: read_features(root, c) for c in clips}


def infer_clips(params: dict[str, Tensor], clips: list[ClipRecord], feats: dict[str, np.ndarray],
                cfg: RunConfig):
    mcfg = cfg.model_config()
    out = []
    with nx.precision(32):
        for c in clips:
            out.extend(mdl.detect(params, feats[c.clip_id], c.clip_id, mcfg, cfg.nms))
    return out


def evaluate_clips(params, clips, feats, manifest: DatasetManifest, cfg: RunConfig) -> float:
    dets = infer_clips(params, clips, feats, cfg)
    report = evaluate(dets, manifest.ground_truth(clips), manifest.num_classes, cfg.eval.thresholds,
                      manifest.label_names)
    return report.mean_ap


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]


def _batch_step(params, opt: AdamW, feats: np.ndarray, anns, clip_ids, mcfg, tcfg: TrainConfig, lr: float):
    for p in params.values():
        p.grad = None
    total, cls, reg = mdl.batch_loss(params, feats, anns, mcfg)
    value = float(total.data)
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss on batch containing clips {clip_ids}")
    total.backward()
    for k, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for {k} on batch containing clips {clip_ids}")
    clip_grad_norm(params, tcfg.grad_clip)
    opt.step(lr)
    return value, float(cls.data), float(reg.data)


def train(root: Path, manifest: DatasetManifest, cfg: RunConfig, out_dir: Path | None = None,
          resume: Checkpoint | None = None, stop_epoch: int | None = None) -> TrainResult:
    """Train from scratch or from ``resume``; returns the final checkpoint and per-epoch log.

    ``stop_epoch`` ends the run early (after that many completed epochs) without
    changing the schedule, which is always laid out for ``cfg.train.epochs``.
    """
    cfg = cfg.resolved()
    tcfg, mcfg = cfg.train, cfg.model_config()
    train_clips, train_feats = load_split(root, manifest, "train")
    if not train_clips:
        raise ValueError("manifest has no train split")
    test_clips, test_feats = load_split(root, manifest, "test")
    steps_per_epoch = math.ceil(len(train_clips) / tcfg.batch_size)
    history: list[dict] = []

    with nx.precision(32):
        if resume is None:
            params = mdl.init_params(mcfg, tcfg.seed)
            opt = AdamW(params, tcfg)
            start_epoch = 0
        else:
            if resume.config_hash != cfg.model_hash():
                raise ValueError("checkpoint was trained with a different model configuration")
            params = params_from_checkpoint(resume)
            opt = AdamW(params, tcfg, resume.step,
                        {k: v.copy() for k, v in resume.m.items()}, {k: v.copy() for k, v in resume.v.items()})
            start_epoch = resume.epoch
            history = list(resume.meta.get("history", []))

        end_epoch = tcfg.epochs if stop_epoch is None else min(stop_epoch, tcfg.epochs)
        for epoch in range(start_epoch, end_epoch):
            order = np.random.default_rng([tcfg.seed, epoch]).permutation(len(train_clips))
            sums = np.zeros(3)
            for b in range(steps_per_epoch):
                idx = order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]
                batch = [train_clips[i] for i in idx]
                feats = np.stack([train_feats[c.clip_id] for c in batch])
                anns = [c.annotations for c in batch]
                lr = learning_rate(tcfg, opt.step_count, steps_per_epoch)
                sums += _batch_step(params, opt, feats, anns, [c.clip_id for c in batch], mcfg, tcfg, lr)
            entry = {"epoch": epoch + 1, "step": opt.step_count,
                     "loss": sums[0] / steps_per_epoch, "cls_loss": sums[1] / steps_per_epoch,
                     "reg_loss": sums[2] / steps_per_epoch}
            if test_clips and tcfg.eval_every and ((epoch + 1) % tcfg.eval_every == 0 or epoch + 1 == end_epoch):
                entry["test_mAP"] = evaluate_clips(params, test_clips, test_feats, manifest, cfg)
            history.append(entry)
            log.info("epoch %d loss %.4f (cls %.4f reg %.4f)%s", entry["epoch"], entry["loss"],
                     entry["cls_loss"], entry["reg_loss"],
                     f" test mAP {entry['test_mAP']:.4f}" if "test_mAP" in entry else "")
            ck = _snapshot(params, opt, epoch + 1, cfg, history)
            if out_dir is not None:
                save_checkpoint(Path(out_dir) / "last.ckpt", ck)
                with open(Path(out_dir) / "metrics.jsonl", "a" if epoch > start_epoch or resume else "w") as fh:
                    fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return TrainResult(_snapshot(params, opt, max(end_epoch, start_epoch), cfg, history), history)


def _snapshot(params, opt: AdamW, epoch: int, cfg: RunConfig, history: list[dict]) -> Checkpoint:
    return Checkpoint({k: p.data.astype(np.float32).copy() for k, p in params.items()},
                      {k: a.astype(np.float32).copy() for k, a in opt.m.items()},
                      {k: a.astype(np.float32).copy() for k, a in opt.v.items()},
                      epoch, opt.step_count, cfg.model_hash(),
                      {"seed": cfg.train.seed, "history": history})


def overfit_probe(feats: np.ndarray, annotations, cfg: RunConfig, steps: int = 500,
                  lr: float = 1e-3, target: float | None = None) -> tuple[float, dict[str, Tensor]]:
    """Train on a single clip with a constant learning rate; returns the final loss and parameters.

    Stops early once the loss drops below ``target``.
    """
    cfg = cfg.resolved()
    mcfg = cfg.model_config()
    tcfg = cfg.train
    with nx.precision(32):
        params = mdl.init_params(mcfg, tcfg.seed)
        opt = AdamW(params, tcfg)
        batch = feats[None]
        for step in range(steps + 1):
            for p in params.values():
                p.grad = None
            total, _, _ = mdl.batch_loss(params, batch, [annotations], mcfg)
            loss = float(total.data)
            if not math.isfinite(loss):
                raise NumericalError("non-finite loss during overfit probe")
            # the last pass only measures the loss reached after ``steps`` updates
            if step == steps or (target is not None and loss < target):
                break
            total.backward()
            clip_grad_norm(params, tcfg.grad_clip)
            opt.step(lr)
    return loss, params
