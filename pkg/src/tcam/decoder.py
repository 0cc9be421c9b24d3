"""U-Net style decoder over the frozen classifier encoder, and its training loop.

Training follows the temporal pseudo-label recipe: for every shot one time
position ``t`` is drawn per epoch, the CAMs of ``t`` and its ``n``
predecessors are max-pooled, an Otsu split of the pooled map yields one
foreground and one background pixel, and the decoder is updated on frame
``t`` with partial cross-entropy, the size barrier and the CRF term.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .arrays import load_arrays, save_arrays
from .cams import Encoder, FrameClassifier, normalize_input, resize, to_tensor
from .core import DomainError, iou
from .localize import TAU_GRID, boxes_for_taus
from .losses import LossBreakdown, LossConfig, total_loss_t
from .pseudo import PseudoLabelMask, frame_rng, sample_pseudo_labels, split_regions
from .temporal import max_pool_arrays, sequence_indices

log = logging.getLogger(__name__)


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
    )


class DecoderNet(nn.Module):
    """Frozen encoder, upsampling path with skips, two-channel softmax head.

    Skips tap the encoder stages at strides 4, 8 and 16; a last block at full
    resolution also sees the input image.
    """

    def __init__(self, encoder: Encoder, width: int = 32):
        super().__init__()
        self.encoder = encoder
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        names, chans = encoder.stage_names, encoder.channels
        skip_idx = [i for i, s in enumerate(encoder.strides) if s in (4, 8, 16)]
        deepest = len(names) - 1
        self.skip_names = [names[i] for i in reversed(skip_idx) if i != deepest]
        self.deep_name = names[deepest]
        self.reduce = nn.Conv2d(chans[deepest], width, 1)
        self.up_blocks = nn.ModuleList(
            _conv_block(width + chans[names.index(n)], width) for n in self.skip_names
        )
        self.full_res = _conv_block(width + 3, width // 2)
        self.head = nn.Conv2d(width // 2, 2, 1)

    def train(self, mode: bool = True):
        super().train(mode)
        self.encoder.eval()
        return self

    def decoder_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("encoder.")]

    def forward(self, x):
        """Return (B, 2, H, W) softmax maps ordered background, foreground."""
        xn = normalize_input(x)
        with torch.no_grad():
            feats = self.encoder(xn)
        h = F.relu(self.reduce(feats[self.deep_name]))
        for name, block in zip(self.skip_names, self.up_blocks):
            skip = feats[name]
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = block(torch.cat([h, skip], 1))
        h = F.interpolate(h, size=x.shape[-2:], mode="bilinear", align_corners=False)
        h = self.full_res(torch.cat([h, xn], 1))
        return torch.softmax(self.head(h), dim=1)


# -- data ---------------------------------------------------------------------

@dataclass
class ShotData:
    """All frames and CAMs of one shot, held in memory."""

    video_id: str
    shot_id: str
    class_id: int
    frame_indices: list[int]
    frames: np.ndarray            # (T, H, W, 3) uint8
    cams: np.ndarray | None       # (T, H, W) float32 in [0, 1]
    gt_boxes: list                # per frame: list[BoundingBox] | None

    def __post_init__(self):
        if len(self.frame_indices) != len(self.frames):
            raise DomainError("frames and frame indices disagree")
        if self.cams is not None and self.cams.shape[:3] != self.frames.shape[:3]:
            raise DomainError(f"shot {self.shot_id}: CAM/frame shape mismatch")

    @property
    def start(self) -> int:
        return self.frame_indices[0]

    def image(self, pos: int) -> np.ndarray:
        return self.frames[pos].astype(np.float32) / 255.0

    def pooled_cam(self, t: int, n: int) -> np.ndarray:
        """Temporal max over the CAMs of ``t`` and up to ``n`` predecessors."""
        idx = sequence_indices(t, n, self.start, self.frame_indices[-1])
        return max_pool_arrays(self.cams[i - self.start] for i in idx)


def load_shots(manifest, frame_store, cam_dir=None) -> list[ShotData]:
    """Gather manifest shots, with cached CAMs if ``cam_dir`` is given."""
    shots = []
    for v, s in manifest.iter_shots():
        frames = np.stack([
            np.round(frame_store.get(v.video_id, f) * 255).astype(np.uint8) for f in s.frames
        ])
        cams = None
        if cam_dir is not None:
            cams = load_arrays(Path(cam_dir) / f"{s.shot_id}.arrs", ["cams"])["cams"]
        shots.append(ShotData(v.video_id, s.shot_id, v.class_id,
                              [f.frame_index for f in s.frames], frames, cams,
                              [f.gt_boxes for f in s.frames]))
    return shots


def annotated_items(shots: list[ShotData]):
    """``(shot, position)`` for every annotated frame."""
    return [(s, i) for s in shots for i, g in enumerate(s.gt_boxes) if g]


def crop_pair(image: np.ndarray, cam: np.ndarray, resize_to: int, crop: int,
              rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Resize frame and CAM together, then take the same random crop of both."""
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    c = torch.from_numpy(np.ascontiguousarray(cam, dtype=np.float32))[None, None]
    x, c = resize(x, resize_to), resize(c, resize_to)
    oy, ox = (int(v) for v in rng.integers(0, resize_to - crop + 1, size=2))
    x = x[..., oy:oy + crop, ox:ox + crop]
    c = c[..., oy:oy + crop, ox:ox + crop]
    return x[0].permute(1, 2, 0).numpy(), np.clip(c[0, 0].numpy(), 0.0, 1.0)


@dataclass
class PreparedClip:
    key: str
    image: np.ndarray
    pooled_cam: np.ndarray
    mask: PseudoLabelMask
    degenerate: bool


def prepare_clip(shot: ShotData, t: int, n: int, resize_to: int, crop: int,
                 rng: np.random.Generator, n_fg: int = 1, n_bg: int = 1) -> PreparedClip:
    """Pool the clip's CAMs, crop with the frame, and sample pseudo-labels."""
    pooled = shot.pooled_cam(t, n)
    image, cam = crop_pair(shot.image(t - shot.start), pooled, resize_to, crop, rng)
    split = split_regions(cam)
    mask = sample_pseudo_labels(split, cam, rng, n_fg=n_fg, n_bg=n_bg)
    return PreparedClip(f"{shot.shot_id}:{t}", image, cam, mask, split.degenerate)


# -- estimator ---------------------------------------------------------------

@dataclass
class TrainConfig:
    n: int = 1
    epochs: int = 100
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.0
    resize: int = 256
    crop: int = 224
    seed: int = 0
    n_fg: int = 1
    n_bg: int = 1
    check_every: int = 100
    val_every: int = 1

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if self.epochs < 1 or self.batch_size < 1 or self.val_every < 1:
            raise ValueError("epochs, batch_size and val_every must be positive")
        if self.crop > self.resize:
            raise ValueError("crop must not exceed resize")


class TCAMDecoder(BaseEstimator):
    """Decoder trained from temporally pooled CAM pseudo-labels.

    ``fit`` takes lists of :class:`ShotData` (train, optional validation) and
    keeps the epoch with the best validation CorLoc, along with the box
    threshold ``tau_`` chosen on validation.
    """

    def __init__(self, classifier: FrameClassifier | None = None, train_config: TrainConfig | None = None,
                 loss_config: LossConfig | None = None, width: int = 32, tau: float | None = None):
        self.classifier = classifier
        self.train_config = train_config
        self.loss_config = loss_config
        self.width = width
        self.tau = tau

    # construction is separate from fit so tests can inspect an untrained model
    def build(self) -> "TCAMDecoder":
        if self.classifier is None:
            raise ValueError("a fitted classifier is required")
        cfg = self.train_config or TrainConfig()
        torch.manual_seed(cfg.seed)
        encoder = copy.deepcopy(self.classifier.encoder_)
        self.net_ = DecoderNet(encoder, self.width)
        self.net_.eval()
        self.optimizer_ = torch.optim.SGD(self.net_.decoder_parameters(), lr=cfg.lr,
                                          momentum=cfg.momentum)
        self.tau_ = 0.5 if self.tau is None else self.tau
        self.history_ = []
        return self

    def fit(self, train_shots: list[ShotData], val_shots: list[ShotData] | None = None):
        cfg = self.train_config or TrainConfig()
        lcfg = self.loss_config or LossConfig()
        if not train_shots:
            raise ValueError("empty manifest: no training shots")
        if any(s.cams is None for s in train_shots):
            raise ValueError("training shots need cached CAMs")
        self.build()
        best = (-1.0, None, None)
        for epoch in range(cfg.epochs):
            record = self.train_epoch(train_shots, epoch, cfg, lcfg)
            due = (epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1
            if val_shots and due:
                score, tau = self.validate(val_shots)
                record.update(val_corloc=score, tau=tau)
                if score > best[0]:
                    best = (score, tau, copy.deepcopy(self.net_.state_dict()))
            self.history_.append(record)
            log.info("decoder epoch %d %s", epoch, record)
        if best[2] is not None:
            self.net_.load_state_dict(best[2])
            if self.tau is None:
                self.tau_ = best[1]
            self.best_val_corloc_ = best[0]
        self.net_.eval()
        return self

    def epoch_schedule(self, shots: list[ShotData], epoch: int, seed: int) -> list[tuple[int, int]]:
        """One ``(shot position, t)`` per shot, in a shuffled order."""
        rng = np.random.default_rng([seed, epoch, 7919])
        picks = [(i, s.frame_indices[int(rng.integers(len(s.frame_indices)))])
                 for i, s in enumerate(shots)]
        order = rng.permutation(len(picks))
        return [picks[i] for i in order]

    def train_epoch(self, shots, epoch, cfg: TrainConfig, lcfg: LossConfig) -> dict:
        barrier_t = lcfg.barrier_at(epoch)
        schedule = self.epoch_schedule(shots, epoch, cfg.seed)
        sums = {"partial_ce": 0.0, "size_barrier": 0.0, "crf": 0.0, "total": 0.0}
        n_batches = 0
        for b in range(0, len(schedule), cfg.batch_size):
            clips = []
            for si, t in schedule[b:b + cfg.batch_size]:
                shot = shots[si]
                rng = frame_rng(cfg.seed, epoch, f"{shot.shot_id}:{t}")
                clips.append(prepare_clip(shot, t, cfg.n, cfg.resize, cfg.crop, rng,
                                          cfg.n_fg, cfg.n_bg))
            br = self.train_step(clips, lcfg, barrier_t,
                                 check=(self.step_count % cfg.check_every == 0))
            for k in sums:
                sums[k] += getattr(br, k)
            n_batches += 1
        rec = {"epoch": epoch, "barrier_t": round(barrier_t, 6)}
        rec.update({k: v / n_batches for k, v in sums.items()})
        return rec

    @property
    def step_count(self) -> int:
        return getattr(self, "steps_", 0)

    def train_step(self, clips: list[PreparedClip], lcfg: LossConfig, barrier_t: float,
                   check: bool = False) -> LossBreakdown:
        """One SGD update of the decoder on a batch of prepared clips."""
        check_is_fitted(self, "net_")
        self.net_.train()
        images = torch.from_numpy(np.stack([c.image for c in clips])).permute(0, 3, 1, 2)
        labels = torch.from_numpy(np.stack([c.mask.labels for c in clips]).astype(np.int64))
        probs = self.net_(images)
        if check:
            err = (probs.detach().sum(1) - 1.0).abs().max().item()
            if err > 1e-5:
                raise FloatingPointError(f"softmax channels off by {err}")
        total, breakdown = total_loss_t(probs, labels, images, lcfg, barrier_t)
        if not np.isfinite(breakdown.total):
            raise FloatingPointError("non-finite decoder loss")
        self.optimizer_.zero_grad()
        if total.requires_grad:
            total.backward()
        self.optimizer_.step()
        self.steps_ = self.step_count + 1
        self.last_step_ = {"images": images, "labels": labels, "probs": probs.detach(),
                           "barrier_t": barrier_t}
        self.net_.eval()
        return breakdown

    # -- inference --

    def predict_maps(self, X, batch_size: int = 64) -> np.ndarray:
        """Foreground maps at each image's own resolution, float64 (N, H, W)."""
        check_is_fitted(self, "net_")
        cfg = self.train_config or TrainConfig()
        xt = to_tensor(X)
        H, W = xt.shape[-2:]
        self.net_.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(xt), batch_size):
                xb = resize(xt[i:i + batch_size], cfg.crop)
                fg = self.net_(xb)[:, 1:2].double()
                fg = F.interpolate(fg, size=(H, W), mode="bilinear", align_corners=False)
                out.append(fg[:, 0].clamp(0.0, 1.0))
        return torch.cat(out).numpy()

    def validate(self, shots: list[ShotData]) -> tuple[float, float]:
        """Best CorLoc over the tau grid on annotated frames, and that tau."""
        items = annotated_items(shots)
        maps = self.predict_maps(np.stack([s.image(i) for s, i in items]))
        return best_tau([m for m in maps], [s.gt_boxes[i] for s, i in items])

    # -- persistence --

    def save(self, path) -> None:
        path = Path(path)
        state = {k: v.numpy() for k, v in self.net_.state_dict().items()}
        save_arrays(path, state)
        meta = {"width": self.width, "tau": self.tau_,
                "train_config": asdict(self.train_config or TrainConfig()),
                "loss_config": (self.loss_config or LossConfig()).to_dict(),
                "history": self.history_}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, path, classifier: FrameClassifier) -> "TCAMDecoder":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        model = cls(classifier, TrainConfig(**meta["train_config"]),
                    LossConfig(**meta["loss_config"]), width=meta["width"]).build()
        model.net_.load_state_dict({k: torch.from_numpy(v) for k, v in load_arrays(path).items()})
        model.tau_ = meta["tau"]
        model.history_ = meta["history"]
        return model


def corloc_at_taus(maps, gt_lists, taus=TAU_GRID) -> dict[float, float]:
    """Frame-level CorLoc of ``cam_to_box`` boxes at each tau."""
    hits = dict.fromkeys(taus, 0)
    for m, gts in zip(maps, gt_lists):
        for tau, box in boxes_for_taus(m, taus).items():
            if box is not None and max(iou(box, g) for g in gts) > 0.5:
                hits[tau] += 1
    n = max(len(gt_lists), 1)
    return {tau: h / n for tau, h in hits.items()}


def best_tau(maps, gt_lists, taus=TAU_GRID) -> tuple[float, float]:
    """Highest CorLoc over ``taus``; ties go to the smaller tau."""
    scores = corloc_at_taus(maps, gt_lists, taus)
    tau = max(taus, key=lambda t: (scores[t], -t))
    return scores[tau], tau
