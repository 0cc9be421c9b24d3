"""Desk-scale trend experiments on the synthetic moving-shapes data.

Two studies share one harness:

* an ablation comparing the raw CAM baseline, a decoder trained on
  pseudo-labels only, and the full objective with and without temporal
  pooling (``n = 0`` against ``n = 1``);
* a sweep of the temporal dependency ``n``.

Each seed gets its own dataset, pretrained backbone, classifier and CAM
cache (built once and cached on disk), and every decoder run is cached by a hash of its settings,
so the full-objective runs at ``n = 0`` and ``n = 1`` serve both studies.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .cams import CamMethod, FrameClassifier
from .config import CLASSIFIER_DEFAULTS
from .data import FrameStore, SynthConfig, VideoManifest, generate_synthetic
from .decoder import TCAMDecoder, TrainConfig
from .losses import LossConfig
from .metrics import corloc
from .pipeline import (
    POOL_DEFAULTS, Workspace, dump_cams, manifest_frames, predict_shots, pretrain_backbone, tune_cam_tau,
)

log = logging.getLogger(__name__)

SWEEP_NS = (0, 1, 2, 4, 8)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:10]


def desk_train_config() -> TrainConfig:
    """Decoder schedule for 96x96 synthetic frames on a CPU budget."""
    return TrainConfig(n=1, epochs=30, batch_size=8, lr=0.1, resize=104, crop=96, val_every=3)


def desk_loss_config() -> LossConfig:
    return LossConfig()


def desk_synth_config() -> SynthConfig:
    """The default synthetic world, with the class texture on a jumping spot.

    A fully textured object lets a single frame's CAM cover the whole object,
    so temporal pooling has nothing to add. When only a spot shows the
    texture, each frame's CAM covers part of the object and the max over
    neighbouring frames recovers more of it. Objects move 5 pixels per
    frame, so eight frames of motion exceed the largest object width.
    """
    return SynthConfig(texture_spot=0.3, speed=5)


def desk_cam_method() -> CamMethod:
    """LayerCAM on the stride-8 stage.

    At 96x96 the last stage is a 6x6 grid whose upsampled maps spill well
    past the object, which leaves pooling nothing to recover and only room
    to smear. The stride-8 stage gives maps that sit inside the object and
    under-cover it.
    """
    return CamMethod("layercam", "stage2")


@dataclass
class TrendConfig:
    synth: SynthConfig = field(default_factory=desk_synth_config)
    pool: SynthConfig = field(default_factory=lambda: SynthConfig(**POOL_DEFAULTS))
    pretrain_epochs: int = 8
    classifier: dict = field(default_factory=lambda: dict(CLASSIFIER_DEFAULTS))
    cam: CamMethod = field(default_factory=desk_cam_method)
    train: TrainConfig = field(default_factory=desk_train_config)
    loss: LossConfig = field(default_factory=desk_loss_config)
    decoder_width: int = 32
    seeds: tuple[int, ...] = (0, 1, 2)

    def world_key(self) -> str:
        def plain(c):
            d = asdict(c)
            d["object_size"] = list(d["object_size"])
            return d

        body = {"synth": plain(self.synth), "classifier": self.classifier, "cam": asdict(self.cam)}
        if self.pretrain_epochs:
            body["pretrain"] = {"pool": plain(self.pool), "epochs": self.pretrain_epochs}
        return _digest(body)


@dataclass
class RunResult:
    variant: str
    seed: int
    test_corloc: float
    val_corloc: float
    tau: float
    seconds: float
    history: list = field(default_factory=list)


VARIANTS = {
    # name -> (loss overrides, n); None marks the classifier-CAM baseline
    "cam": None,
    "pseudo": ({"use_crf": False, "use_size": False}, 0),
    **{f"full_n{n}": ({}, n) for n in range(0, 11)},
}


class TrendHarness:
    """Builds per-seed worlds and runs (or recalls) decoder variants."""

    def __init__(self, root, config: TrendConfig | None = None):
        self.root = Path(root)
        self.config = config or TrendConfig()
        self._worlds: dict[int, Workspace] = {}

    # -- per-seed data, classifier and CAM cache --

    def world_dir(self, seed: int) -> Path:
        return self.root / f"world-{self.config.world_key()}-s{seed}"

    def world(self, seed: int) -> Workspace:
        if seed in self._worlds:
            return self._worlds[seed]
        cfg = self.config
        wdir = self.world_dir(seed)
        manifest_path = wdir / "data" / "manifest.json"
        if manifest_path.exists():
            manifest = VideoManifest.load(manifest_path)
        else:
            manifest = generate_synthetic(cfg.synth, seed, wdir / "data")
        store = FrameStore(manifest)
        ckpt = wdir / "classifier.arrs"
        if ckpt.exists():
            clf = FrameClassifier.load(ckpt)
        else:
            params = dict(cfg.classifier)
            t0 = time.time()
            if cfg.pretrain_epochs and not params.get("backbone_weights"):
                params["backbone_weights"] = str(self.backbone(seed))
            train = manifest.subset("train")
            X, y = manifest_frames(train, store)
            clf = FrameClassifier(seed=seed, **params).fit(X, y)
            log.info("seed %d classifier trained in %.0fs", seed, time.time() - t0)
            clf.save(ckpt)
        cam_dir = wdir / "cams"
        done = cam_dir / "DONE"
        if not done.exists():
            dump_cams(clf, manifest, store, cam_dir, cfg.cam.kind, cfg.cam.target_layer)
            done.write_text("")
        ws = Workspace.build(manifest, clf, cam_dir, store)
        self._worlds[seed] = ws
        return ws

    def backbone(self, seed: int) -> Path:
        path = self.world_dir(seed) / "pretrain" / "backbone.arrs"
        if path.exists():
            return path
        base = {k: v for k, v in self.config.classifier.items() if k not in ("epochs", "backbone_weights")}
        return pretrain_backbone(self.config.pool, seed, path.parent, self.config.pretrain_epochs, **base)

    # -- variants --

    def run_key(self, variant: str, seed: int) -> str:
        spec = VARIANTS[variant]
        body = {"world": self.config.world_key(), "variant": variant}
        if spec is not None:
            train, loss = self.variant_configs(variant, seed)
            body.update(train=asdict(train), loss=loss.to_dict(), width=self.config.decoder_width)
        return _digest(body)

    def variant_configs(self, variant: str, seed: int) -> tuple[TrainConfig, LossConfig]:
        overrides, n = VARIANTS[variant]
        train = replace(self.config.train, n=n, seed=seed)
        loss = replace(self.config.loss, **overrides)
        return train, loss

    def result_path(self, variant: str, seed: int) -> Path:
        return self.root / "results" / f"{variant}-s{seed}-{self.run_key(variant, seed)}.json"

    def run(self, variant: str, seed: int) -> RunResult:
        path = self.result_path(variant, seed)
        if path.exists():
            return RunResult(**json.loads(path.read_text()))
        ws = self.world(seed)
        t0 = time.time()
        test_manifest = ws.manifest.subset("test")
        if VARIANTS[variant] is None:
            val, tau = tune_cam_tau(ws.classifier, ws.shots["val"], self.config.cam.kind,
                                    self.config.cam.target_layer)
            preds, _ = predict_shots(ws.classifier, ws.shots["test"], tau, None,
                                     self.config.cam.kind, self.config.cam.target_layer)
            history = []
        else:
            train, loss = self.variant_configs(variant, seed)
            dec = TCAMDecoder(ws.classifier, train, loss, width=self.config.decoder_width)
            dec.fit(ws.shots["train"], ws.shots["val"])
            val, tau = dec.best_val_corloc_, dec.tau_
            preds, _ = predict_shots(ws.classifier, ws.shots["test"], tau, dec)
            history = dec.history_
        result = RunResult(variant, seed, corloc(preds, test_manifest), float(val), float(tau),
                           round(time.time() - t0, 1), history)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(result), indent=1))
        log.info("%s seed %d: test CorLoc %.4f (val %.4f, tau %.1f) in %.0fs", variant, seed,
                 result.test_corloc, result.val_corloc, result.tau, result.seconds)
        return result

    def mean(self, variant: str) -> float:
        return float(np.mean([self.run(variant, s).test_corloc for s in self.config.seeds]))

    # -- studies --

    def ablation(self) -> dict[str, float]:
        """Mean test CorLoc of the baseline, pseudo-only and full objective at n=0 and n=1."""
        return {v: self.mean(v) for v in ("cam", "pseudo", "full_n0", "full_n1")}

    def n_sweep(self, ns=SWEEP_NS) -> dict[int, float]:
        """Mean test CorLoc of the full objective for each temporal dependency."""
        return {n: self.mean(f"full_n{n}") for n in ns}

    def per_seed(self, variant: str) -> list[float]:
        return [self.run(variant, s).test_corloc for s in self.config.seeds]


def fast_config(**overrides) -> TrendConfig:
    """A copy of the default trend config with field overrides."""
    return replace(copy.deepcopy(TrendConfig()), **overrides)
