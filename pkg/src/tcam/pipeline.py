"""Stage functions shared by the CLI and the experiment harness."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arrays import save_arrays
from .cams import FrameClassifier
from .data import FrameStore, SynthConfig, VideoManifest, generate_synthetic
from .decoder import ShotData, TCAMDecoder, annotated_items, best_tau, load_shots
from .localize import Prediction, cam_to_box
from .core import DomainError

log = logging.getLogger(__name__)


def manifest_frames(manifest: VideoManifest, store: FrameStore):
    """Stack every frame of ``manifest`` with its video label."""
    X, y = [], []
    for v, s, f in manifest.iter_frames():
        X.append(store.get(v.video_id, f))
        y.append(v.class_id)
    return np.stack(X), np.asarray(y)


POOL_DEFAULTS = dict(n_classes=6, n_videos=36, shots_per_video=4, frames_per_shot=12,
                     val_per_class=0, test_per_class=0)


def pretrain_backbone(pool: SynthConfig, seed: int, out_dir, epochs: int = 8,
                      **classifier_params) -> Path:
    """Train a classifier on a many-class synthetic pool and keep its encoder.

    This stands in for generic (ImageNet-style) pretraining. With only two
    target classes, a classifier trained from scratch can separate them with
    a single texture detector and read the other class off its absence, which
    leaves that class's CAM on the background. A backbone that already
    detects every texture avoids that shortcut.
    """
    out = Path(out_dir)
    manifest_path = out / "pool" / "manifest.json"
    if manifest_path.exists():
        manifest = VideoManifest.load(manifest_path)
    else:
        manifest = generate_synthetic(pool, seed + 10_000, out / "pool")
    X, y = manifest_frames(manifest, FrameStore(manifest))
    params = {**classifier_params, "epochs": epochs, "seed": seed, "backbone_weights": None}
    clf = FrameClassifier(**params).fit(X, y)
    path = out / "backbone.arrs"
    save_arrays(path, {k: v.numpy() for k, v in clf.net_.encoder.state_dict().items()})
    log.info("pretrained backbone on %d frames, final loss %.4f", len(X), clf.loss_history_[-1])
    return path


def dump_cams(classifier: FrameClassifier, manifest: VideoManifest, store: FrameStore,
              out_dir, kind: str = "layercam", target_layer: str | None = None) -> Path:
    """Cache the CAM of each video's label for every frame, one file per shot."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for v, s in manifest.iter_shots():
        X = np.stack([store.get(v.video_id, f) for f in s.frames])
        cams = classifier.cam_maps(X, v.class_id, kind, target_layer)
        save_arrays(out / f"{s.shot_id}.arrs", {
            "cams": cams,
            "frame_index": np.asarray([f.frame_index for f in s.frames], dtype=np.int64),
        })
    return out


def _eval_items(shots: list[ShotData], annotated_only: bool):
    if annotated_only:
        return annotated_items(shots)
    return [(s, i) for s in shots for i in range(len(s.frame_indices))]


def predict_shots(classifier: FrameClassifier, shots: list[ShotData], tau: float,
                  decoder: TCAMDecoder | None = None, cam_kind: str = "layercam",
                  target_layer: str | None = None, annotated_only: bool = True):
    """Per-frame predictions; without a decoder the classifier CAM is boxed.

    Returns ``(predictions, maps)`` with maps aligned to the predictions.
    """
    items = _eval_items(shots, annotated_only)
    if not items:
        return [], np.zeros((0, 0, 0))
    X = np.stack([s.image(i) for s, i in items])
    proba = classifier.predict_proba(X)
    k = proba.argmax(1)
    if decoder is None:
        maps = classifier.cam_maps(X, k, cam_kind, target_layer)
    else:
        maps = decoder.predict_maps(X)
    preds = []
    for (s, i), kk, p, m in zip(items, k, proba, maps):
        try:
            box = cam_to_box(m, tau)
        except DomainError:
            box = None
        preds.append(Prediction(s.video_id, s.shot_id, s.frame_indices[i], int(kk), float(p[kk]), box))
    return preds, maps


def tune_cam_tau(classifier: FrameClassifier, shots: list[ShotData], cam_kind="layercam",
                 target_layer=None) -> tuple[float, float]:
    """Validation CorLoc and tau for boxing raw classifier CAMs."""
    items = annotated_items(shots)
    X = np.stack([s.image(i) for s, i in items])
    maps = classifier.cam_maps(X, classifier.predict(X), cam_kind, target_layer)
    return best_tau(list(maps), [s.gt_boxes[i] for s, i in items])


@dataclass
class Workspace:
    """A generated dataset with its trained classifier and CAM cache."""

    manifest: VideoManifest
    classifier: FrameClassifier
    cam_dir: Path
    shots: dict = field(default_factory=dict)

    @classmethod
    def build(cls, manifest: VideoManifest, classifier: FrameClassifier, cam_dir,
              store: FrameStore | None = None) -> "Workspace":
        store = store or FrameStore(manifest)
        ws = cls(manifest, classifier, Path(cam_dir))
        for split in ("train", "val", "test"):
            ws.shots[split] = load_shots(manifest.subset(split), store, cam_dir)
        return ws
