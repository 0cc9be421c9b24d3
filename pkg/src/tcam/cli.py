"""Command-line entry point: ``tcam <command> --config run.json [--seed N] [--out DIR]``.

Commands run the pipeline one stage at a time and share a run directory
``<out>/<config hash>-s<seed>/`` laid out as::

    config.json         resolved configuration (with its hash)
    data/               generated synthetic dataset (gen-synth)
    checkpoints/        classifier.arrs, decoder.arrs (+ .json sidecars)
    cams/               one CAM cache file per shot (dump-cams)
    metrics.jsonl       decoder training log, one JSON record per epoch
    preds/<split>.jsonl per-frame predictions (infer)
    report.json         CorLoc and CL report (evaluate)

``TCAM_NUM_WORKERS`` sets how many threads decode frames when a stage loads
a dataset.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .arrays import ContainerError
from .cams import FrameClassifier, seed_everything
from .config import ConfigError, RunConfig, pool_config
from .core import DomainError
from .data import FrameStore, VideoManifest, generate_synthetic
from .decoder import TCAMDecoder, load_shots
from .localize import read_predictions, save_overlay, write_predictions
from .metrics import MissingPredictionError, cl_accuracy, corloc_table, format_report
from .pipeline import Workspace, dump_cams, manifest_frames, predict_shots, pretrain_backbone

log = logging.getLogger("tcam")

MODULE_ERRORS = (ConfigError, DomainError, ContainerError, MissingPredictionError,
                 FileNotFoundError, FloatingPointError, OSError, ValueError, KeyError)


def num_workers() -> int:
    try:
        return max(1, int(os.environ.get("TCAM_NUM_WORKERS", "1")))
    except ValueError:
        raise ConfigError("TCAM_NUM_WORKERS must be an integer") from None


class Run:
    """Resolved config plus the locations of every artifact it reads or writes."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.hash = cfg.config_hash()
        self.dir = Path(out) / cfg.run_name()
        p = cfg.paths
        self.data = Path(p["data"]) if p["data"] else self.dir / "data"
        self.classifier = Path(p["classifier"]) if p["classifier"] else self.dir / "checkpoints" / "classifier.arrs"
        self.cams = Path(p["cams"]) if p["cams"] else self.dir / "cams"
        self.decoder = Path(p["decoder"]) if p["decoder"] else self.dir / "checkpoints" / "decoder.arrs"
        self.metrics = self.dir / "metrics.jsonl"
        self.preds = self.dir / "preds"
        self.report = self.dir / "report.json"

    def open(self) -> "Run":
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "checkpoints").mkdir(exist_ok=True)
        body = {"config_hash": self.hash, **self.cfg.to_dict()}
        (self.dir / "config.json").write_text(json.dumps(body, indent=2, sort_keys=True))
        return self

    def manifest(self) -> VideoManifest:
        path = self.data / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"no dataset at {self.data}; run gen-synth or set paths.data")
        return VideoManifest.load(path)

    def load_classifier(self) -> FrameClassifier:
        if not self.classifier.exists():
            raise FileNotFoundError(f"no classifier at {self.classifier}; run train-classifier")
        return FrameClassifier.load(self.classifier)

    def workspace(self, classifier: FrameClassifier) -> Workspace:
        if not self.cams.is_dir():
            raise FileNotFoundError(f"no CAM cache at {self.cams}; run dump-cams or set paths.cams")
        manifest = self.manifest()
        return Workspace.build(manifest, classifier, self.cams,
                               FrameStore(manifest).preload(num_workers()))

    def stamp(self, stage: str, files) -> None:
        """Record which config produced each artifact."""
        path = self.dir / "artifacts.json"
        index = json.loads(path.read_text()) if path.exists() else {}
        index[stage] = {"config_hash": self.hash, "seed": self.cfg.seed,
                        "files": [str(f) for f in files]}
        path.write_text(json.dumps(index, indent=2, sort_keys=True))


# -- commands ------------------------------------------------------------------

def cmd_gen_synth(run: Run, args) -> None:
    if run.cfg.paths["data"]:
        raise ConfigError("paths.data points at an existing dataset; gen-synth does not overwrite inputs")
    m = generate_synthetic(run.cfg.synth, run.cfg.seed, run.data)
    run.stamp("gen-synth", [run.data / "manifest.json"])
    print(f"wrote {len(m.videos)} videos to {run.data}")


def cmd_train_classifier(run: Run, args) -> None:
    train = run.manifest().subset("train")
    params = dict(run.cfg.classifier)
    if run.cfg.pretrain is not None and not params["backbone_weights"]:
        base = {k: v for k, v in params.items() if k not in ("epochs", "backbone_weights")}
        params["backbone_weights"] = str(pretrain_backbone(
            pool_config(run.cfg.pretrain), run.cfg.seed, run.dir / "pretrain",
            run.cfg.pretrain["epochs"], **base))
    X, y = manifest_frames(train, FrameStore(train).preload(num_workers()))
    clf = FrameClassifier(seed=run.cfg.seed, **params).fit(X, y)
    run.classifier.parent.mkdir(parents=True, exist_ok=True)
    clf.save(run.classifier)
    run.stamp("train-classifier", [run.classifier])
    acc = float((clf.predict(X) == y).mean())
    print(f"classifier: train accuracy {acc:.3f}, final loss {clf.loss_history_[-1]:.4f}")


def cmd_dump_cams(run: Run, args) -> None:
    if run.cfg.paths["cams"]:
        raise ConfigError("paths.cams points at an existing cache; dump-cams does not overwrite inputs")
    manifest = run.manifest()
    clf = run.load_classifier()
    dump_cams(clf, manifest, FrameStore(manifest).preload(num_workers()), run.cams,
              run.cfg.cam.kind, run.cfg.cam.target_layer)
    run.stamp("dump-cams", [run.cams])
    print(f"cached CAMs for {sum(1 for _ in manifest.iter_shots())} shots in {run.cams}")


def cmd_train_decoder(run: Run, args) -> None:
    clf = run.load_classifier()
    ws = run.workspace(clf)
    seed_everything(run.cfg.seed)
    dec = TCAMDecoder(clf, run.cfg.train, run.cfg.loss, width=run.cfg.decoder["width"],
                      tau=run.cfg.tau).fit(ws.shots["train"], ws.shots["val"])
    run.decoder.parent.mkdir(parents=True, exist_ok=True)
    dec.save(run.decoder)
    with open(run.metrics, "w") as fh:
        for rec in dec.history_:
            fh.write(json.dumps({"config_hash": run.hash, **rec}, sort_keys=True) + "\n")
    run.stamp("train-decoder", [run.decoder, run.metrics])
    best = getattr(dec, "best_val_corloc_", float("nan"))
    print(f"decoder: best validation CorLoc {best:.4f} at tau {dec.tau_}")


def cmd_infer(run: Run, args) -> None:
    clf = run.load_classifier()
    if not run.decoder.exists():
        raise FileNotFoundError(f"no decoder at {run.decoder}; run train-decoder")
    dec = TCAMDecoder.load(run.decoder, clf)
    manifest = run.manifest().subset(args.split)
    shots = load_shots(manifest, FrameStore(manifest).preload(num_workers()))
    preds, maps = predict_shots(clf, shots, dec.tau_, dec, annotated_only=False)
    run.preds.mkdir(parents=True, exist_ok=True)
    out = run.preds / f"{args.split}.jsonl"
    write_predictions(out, preds)
    files = [out]
    if args.overlays:
        by_key = {(s.video_id, fi): (s, i) for s in shots for i, fi in enumerate(s.frame_indices)}
        for p, m in list(zip(preds, maps))[: args.overlays]:
            s, i = by_key[(p.video_id, p.frame_index)]
            gt = s.gt_boxes[i][0] if s.gt_boxes[i] else None
            path = run.preds / "overlays" / f"{p.video_id}_{p.frame_index:05d}.png"
            save_overlay(path, s.image(i), m, gt, p.box)
        files.append(run.preds / "overlays")
    run.stamp(f"infer-{args.split}", files)
    print(f"wrote {len(preds)} predictions to {out}")


def cmd_evaluate(run: Run, args) -> None:
    pred_path = Path(args.predictions) if args.predictions else run.preds / f"{args.split}.jsonl"
    manifest = VideoManifest.load(args.manifest) if args.manifest else run.manifest()
    manifest = manifest.subset(args.split) if args.split else manifest
    preds = read_predictions(pred_path)
    table = corloc_table(preds, manifest)
    cl = cl_accuracy(preds, manifest)
    report = {"config_hash": run.hash, "seed": run.cfg.seed, "predictions": str(pred_path),
              **table, "cl_accuracy": cl}
    run.report.write_text(json.dumps(report, indent=2, sort_keys=True))
    run.stamp("evaluate", [run.report])
    print(format_report(table, cl))


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train-classifier": cmd_train_classifier,
    "dump-cams": cmd_dump_cams,
    "train-decoder": cmd_train_decoder,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcam", description="Run the localization pipeline one stage at a time.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run config JSON (defaults when omitted)")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="runs", help="parent directory of run directories")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "infer":
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
            p.add_argument("--overlays", type=int, default=0, help="save this many overlay PNGs")
        if name == "evaluate":
            p.add_argument("--split", default="test", choices=("train", "val", "test"))
            p.add_argument("--predictions", help="prediction JSON lines (default: the run's)")
            p.add_argument("--manifest", help="manifest JSON (default: the run's dataset)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        cfg.check_paths()
        run = Run(cfg, Path(args.out)).open()
        COMMANDS[args.command](run, args)
    except MODULE_ERRORS as exc:
        print(f"tcam {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
