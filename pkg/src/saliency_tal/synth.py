"""Synthetic seizure-like recordings, clip windowing, splitting, and the on-disk formats.

A recording is a frame-rate feature stream.  Every class owns a fixed unit
direction and a modulation frequency; while a class is active it adds
``u_c * (1 + 0.5 sin(2 pi f_c t))`` on top of Gaussian noise.  Outside
seizure episodes the background class (index 0, "Normal") is active.

Clips are cut with the usual 10 s / 5 s geometry and turned into one
feature row per 16-frame chunk at stride 4, mimicking the output shape of a
clip-level video backbone.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .structures import Detection, Segment

AU_NAMES = (
    "Normal", "Head Nodding", "Staring", "Neck Jerk", "Mouth Clonus",
    "Unilateral Forelimb Clonus", "Wet-Dog Shake", "Bilateral Forelimb Clonus", "Rearing",
    "Alternating Forelimb Clonus", "Jumping", "Falling", "Tonic Extension", "Wild Running",
)


@dataclass(frozen=True)
class GeneratorConfig:
    num_classes: int = 14
    feature_dim: int = 32
    num_recordings: int = 12
    recording_length_s: float = 120.0
    episode_rate: float = 3.0                  # mean episodes per minute
    episode_duration_s: tuple = (5.0, 12.0)
    au_duration_s: tuple = (1.0, 8.0)
    concurrency: float = 0.2
    noise_sigma: float = 0.1
    freq_range: tuple = (0.3, 1.5)
    aug_fraction: float = 0.25
    aug_blur_width: int = 5
    aug_attenuation: float = 0.6
    test_fraction: float = 0.35
    fps: int = 30
    clip_s: float = 10.0
    stride_s: float = 5.0
    feature_chunk: int = 16
    feature_stride: int = 4
    fragment_floor_s: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("episode_duration_s", "au_duration_s", "freq_range"):
            lo, hi = getattr(self, name)
            object.__setattr__(self, name, (float(lo), float(hi)))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be positive and ordered, got {(lo, hi)}")
        if not 2 <= self.num_classes <= len(AU_NAMES):
            raise ValueError(f"num_classes must lie in [2, {len(AU_NAMES)}], got {self.num_classes}")
        if self.noise_sigma < 0 or not 0 <= self.concurrency <= 1 or not 0 <= self.aug_fraction <= 1:
            raise ValueError("noise_sigma, concurrency and aug_fraction out of range")
        if self.episode_rate <= 0 or self.recording_length_s <= 0:
            raise ValueError("episode_rate and recording_length_s must be positive")
        if not 0 < self.test_fraction < 1:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")

    @property
    def frames_per_clip(self) -> int:
        return int(round(self.clip_s * self.fps))

    @property
    def rows_per_clip(self) -> int:
        return (self.frames_per_clip - self.feature_chunk) // self.feature_stride + 1

    @property
    def delta(self) -> float:
        return self.feature_stride / self.fps


@dataclass
class ClassSignatures:
    directions: np.ndarray   # [C, D], unit rows
    freqs: np.ndarray        # [C] Hz


@dataclass
class Recording:
    rec_id: str
    frames: np.ndarray       # [F, D] at cfg.fps
    annotations: list[Segment]
    length_s: float


@dataclass
class ClipRecord:
    clip_id: str
    feature_file: str
    T: int
    D: int
    duration_s: float
    split: str
    augmented: bool
    recording: str
    annotations: list[Segment] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["annotations"] = [s.to_dict() for s in self.annotations]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClipRecord":
        d = dict(d)
        d["annotations"] = [Segment(int(a["label"]), float(a["start_s"]), float(a["end_s"]))
                            for a in d["annotations"]]
        return cls(**d)


@dataclass
class DatasetManifest:
    label_names: list[str]
    fps: int
    frames_per_clip: int
    feature_chunk: int
    feature_stride: int
    clips: list[ClipRecord]

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def delta(self) -> float:
        return self.feature_stride / self.fps

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]

    def ground_truth(self, clips: list[ClipRecord] | None = None) -> dict[str, list[Segment]]:
        return {c.clip_id: list(c.annotations) for c in (self.clips if clips is None else clips)}

    def to_dict(self) -> dict:
        return {
            "label_names": list(self.label_names), "fps": self.fps,
            "frames_per_clip": self.frames_per_clip, "feature_chunk": self.feature_chunk,
            "feature_stride": self.feature_stride, "clips": [c.to_dict() for c in self.clips],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(list(d["label_names"]), int(d["fps"]), int(d["frames_per_clip"]),
                   int(d["feature_chunk"]), int(d["feature_stride"]),
                   [ClipRecord.from_dict(c) for c in d["clips"]])


# ---------------------------------------------------------------- generation


def class_signatures(cfg: GeneratorConfig) -> ClassSignatures:
    rng = np.random.default_rng([cfg.seed, 0xC1A55])
    u = rng.normal(size=(cfg.num_classes, cfg.feature_dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    freqs = rng.uniform(*cfg.freq_range, size=cfg.num_classes)
    return ClassSignatures(u, freqs)


def _merge_intervals(segs: list[Segment]) -> list[Segment]:
    out: list[Segment] = []
    for label in sorted({s.label for s in segs}):
        mine = sorted((s for s in segs if s.label == label), key=lambda s: s.start_s)
        cur = mine[0]
        for s in mine[1:]:
            if s.start_s <= cur.end_s:
                cur = Segment(label, cur.start_s, max(cur.end_s, s.end_s))
            else:
                out.append(cur)
                cur = s
        out.append(cur)
    return sorted(out, key=lambda s: (s.start_s, s.label))


def sample_annotations(cfg: GeneratorConfig, rng: np.random.Generator) -> list[Segment]:
    """Episodes with Poisson arrivals filled by consecutive action units; gaps are Normal."""
    length = cfg.recording_length_s
    if length < cfg.episode_duration_s[0]:
        raise ValueError(f"recording of {length} s is shorter than the minimum episode")
    mean_gap = 60.0 / cfg.episode_rate
    segs, episodes = [], []
    t = 0.0
    while True:
        start = t + rng.exponential(mean_gap)
        dur = rng.uniform(*cfg.episode_duration_s)
        if start + dur > length:
            break
        episodes.append((start, start + dur))
        t = start + dur
    seizure_labels = np.arange(1, cfg.num_classes)
    for ep_start, ep_end in episodes:
        a = ep_start
        while a < ep_end:
            b = min(ep_end, a + rng.uniform(*cfg.au_duration_s))
            c1 = int(rng.choice(seizure_labels))
            segs.append(Segment(c1, a, b))
            if seizure_labels.size > 1 and rng.random() < cfg.concurrency:
                c2 = int(rng.choice(seizure_labels[seizure_labels != c1]))
                segs.append(Segment(c2, a, b))
            a = b
    edges = [0.0] + [x for ep in episodes for x in ep] + [length]
    for a, b in zip(edges[0::2], edges[1::2]):
        if b > a:
            segs.append(Segment(0, a, b))
    return _merge_intervals(segs)


def render_frames(annotations: list[Segment], sig: ClassSignatures, cfg: GeneratorConfig,
                  length_s: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(length_s * cfg.fps))
    t = (np.arange(n) + 0.5) / cfg.fps
    x = rng.normal(0.0, cfg.noise_sigma, size=(n, cfg.feature_dim)) if cfg.noise_sigma > 0 \
        else np.zeros((n, cfg.feature_dim))
    for s in annotations:
        on = (t >= s.start_s) & (t < s.end_s)
        amp = 1.0 + 0.5 * np.sin(2 * math.pi * sig.freqs[s.label] * t[on])
        x[on] += amp[:, None] * sig.directions[s.label]
    return x


def generate_recording(cfg: GeneratorConfig, index: int = 0,
                       signatures: ClassSignatures | None = None) -> Recording:
    rng = np.random.default_rng([cfg.seed, index])
    sig = signatures or class_signatures(cfg)
    ann = sample_annotations(cfg, rng)
    frames = render_frames(ann, sig, cfg, cfg.recording_length_s, rng)
    return Recording(f"rec{index:03d}", frames, ann, cfg.recording_length_s)


def chunk_features(frames: np.ndarray, chunk: int, stride: int) -> np.ndarray:
    """Mean of every ``chunk``-frame window at ``stride``: [(F - chunk)//stride + 1, D]."""
    n = (frames.shape[0] - chunk) // stride + 1
    csum = np.concatenate([np.zeros((1, frames.shape[1])), np.cumsum(frames, axis=0)])
    starts = np.arange(n) * stride
    return (csum[starts + chunk] - csum[starts]) / chunk


def clip_annotations(annotations: list[Segment], offset: float, clip_s: float,
                     floor_s: float) -> list[Segment]:
    out = []
    for s in annotations:
        a, b = max(s.start_s, offset), min(s.end_s, offset + clip_s)
        if b - a >= floor_s:
            out.append(Segment(s.label, round(a - offset, 9), round(b - offset, 9)))
    return out


def window_clips(rec: Recording, cfg: GeneratorConfig) -> list[tuple[ClipRecord, np.ndarray]]:
    if rec.length_s < cfg.clip_s:
        raise ValueError(f"recording {rec.rec_id} shorter than one clip")
    out = []
    k = 0
    while True:
        offset = k * cfg.stride_s
        if offset + cfg.clip_s > rec.length_s + 1e-9:
            break
        f0 = int(round(offset * cfg.fps))
        frames = rec.frames[f0:f0 + cfg.frames_per_clip]
        feats = chunk_features(frames, cfg.feature_chunk, cfg.feature_stride)
        clip_id = f"{rec.rec_id}_c{k:03d}"
        rec_ = ClipRecord(clip_id, f"features/{clip_id}.f32", feats.shape[0], feats.shape[1],
                          cfg.clip_s, "train", False, rec.rec_id,
                          clip_annotations(rec.annotations, offset, cfg.clip_s, cfg.fragment_floor_s))
        out.append((rec_, feats))
        k += 1
    return out


def augment_features(feats: np.ndarray, width: int, attenuation: float) -> np.ndarray:
    """Temporal box blur (edge-padded) followed by amplitude attenuation."""
    if width > 1:
        pad = width // 2
        padded = np.pad(feats, [(pad, width - 1 - pad), (0, 0)], mode="edge")
        csum = np.concatenate([np.zeros((1, feats.shape[1])), np.cumsum(padded, axis=0)])
        feats = (csum[width:] - csum[:-width]) / width
    return feats * attenuation


def split_and_augment(per_recording: list[list[tuple[ClipRecord, np.ndarray]]], cfg: GeneratorConfig,
                      label_names: list[str]) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Recording-level train/test split, then feature-space augmentation of a fraction of clips."""
    R = len(per_recording)
    if R < 2:
        raise ValueError(f"need clips from at least 2 recordings, got {R}")
    rng = np.random.default_rng([cfg.seed, 0x5717])
    order = rng.permutation(R)
    n_test = min(range(1, R), key=lambda n: (abs(n / R - cfg.test_fraction), n))
    test_recs = set(order[:n_test].tolist())
    clips, feats = [], {}
    for r, items in enumerate(per_recording):
        for rec, f in items:
            rec.split = "test" if r in test_recs else "train"
            clips.append(rec)
            feats[rec.clip_id] = f
    augmented = []
    for split in ("train", "test"):
        pool = [c for c in clips if c.split == split]
        n_aug = int(round(cfg.aug_fraction * len(pool)))
        if n_aug == 0:
            continue
        pick = np.sort(rng.choice(len(pool), size=n_aug, replace=False))
        for i in pick:
            src = pool[i]
            cid = f"{src.clip_id}_aug"
            augmented.append(ClipRecord(cid, f"features/{cid}.f32", src.T, src.D, src.duration_s, src.split,
                                        True, src.recording, list(src.annotations)))
            feats[cid] = augment_features(feats[src.clip_id], cfg.aug_blur_width, cfg.aug_attenuation)
    manifest = DatasetManifest(list(label_names), cfg.fps, cfg.frames_per_clip, cfg.feature_chunk,
                               cfg.feature_stride, clips + augmented)
    return manifest, feats


def generate_dataset(cfg: GeneratorConfig) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    sig = class_signatures(cfg)
    per_rec = [window_clips(generate_recording(cfg, i, sig), cfg) for i in range(cfg.num_recordings)]
    return split_and_augment(per_rec, cfg, list(AU_NAMES[:cfg.num_classes]))


# ---------------------------------------------------------------- files


def validate_manifest(manifest: DatasetManifest) -> None:
    C = manifest.num_classes
    seen = set()
    for c in manifest.clips:
        if c.clip_id in seen:
            raise ValueError(f"duplicate clip id {c.clip_id}")
        seen.add(c.clip_id)
        if c.split not in ("train", "test"):
            raise ValueError(f"clip {c.clip_id}: unknown split {c.split!r}")
        by_label: dict[int, list[Segment]] = {}
        for s in c.annotations:
            if not (0 <= s.start_s < s.end_s <= c.duration_s + 1e-9):
                raise ValueError(f"clip {c.clip_id}: annotation {s} outside [0, {c.duration_s}]")
            if not 0 <= s.label < C:
                raise ValueError(f"clip {c.clip_id}: label {s.label} outside [0, {C})")
            by_label.setdefault(s.label, []).append(s)
        for segs in by_label.values():
            segs.sort(key=lambda s: s.start_s)
            for a, b in zip(segs, segs[1:]):
                if b.start_s < a.end_s:
                    raise ValueError(f"clip {c.clip_id}: overlapping same-label segments {a}, {b}")


def write_features(path: Path, feats: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(feats, dtype="<f4").tofile(path)


def read_features(root: Path, clip: ClipRecord) -> np.ndarray:
    path = Path(root) / clip.feature_file
    data = np.fromfile(path, dtype="<f4")
    if data.size != clip.T * clip.D:
        raise ValueError(f"{path}: expected {clip.T}x{clip.D} floats, found {data.size}")
    return data.reshape(clip.T, clip.D)


def write_dataset(root: Path, manifest: DatasetManifest, feats: dict[str, np.ndarray]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for c in manifest.clips:
        write_features(root / c.feature_file, feats[c.clip_id])
    (root / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=1) + "\n")


def load_manifest(root: Path, check_files: bool = True) -> DatasetManifest:
    root = Path(root)
    manifest = DatasetManifest.from_dict(json.loads((root / "manifest.json").read_text()))
    validate_manifest(manifest)
    if check_files:
        for c in manifest.clips:
            path = root / c.feature_file
            if not path.exists():
                raise FileNotFoundError(f"missing feature file {path}")
            if os.path.getsize(path) != 4 * c.T * c.D:
                raise ValueError(f"{path}: size does not match declared {c.T}x{c.D}")
    return manifest


def write_predictions(path: Path, dets: list[Detection]) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_dict()) + "\n")


def validate_prediction(d: dict, num_classes: int | None = None) -> Detection:
    missing = {"clip_id", "label", "start_s", "end_s", "score"} - set(d)
    if missing:
        raise ValueError(f"prediction missing fields {sorted(missing)}")
    det = Detection.from_dict(d)
    if not 0 <= det.start_s < det.end_s:
        raise ValueError(f"prediction with bad interval [{det.start_s}, {det.end_s}]")
    if not 0 < det.score <= 1:
        raise ValueError(f"prediction score {det.score} outside (0, 1]")
    if num_classes is not None and not 0 <= det.label < num_classes:
        raise ValueError(f"prediction label {det.label} outside [0, {num_classes})")
    return det


def read_predictions(path: Path, num_classes: int | None = None) -> list[Detection]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(validate_prediction(json.loads(line), num_classes))
    return out
