"""CorLoc and classification accuracy over annotated frames."""
from __future__ import annotations

from collections import defaultdict

from .core import BoundingBox, iou
from .data import VideoManifest

CORLOC_IOU = 0.5


class MissingPredictionError(KeyError):
    pass


def _index(predictions) -> dict:
    out = {}
    for p in predictions:
        out[(p.video_id, p.frame_index)] = p
    return out


def _annotated(manifest: VideoManifest, predictions):
    preds = _index(predictions)
    for v, s, f in manifest.annotated_frames():
        try:
            yield v, f, preds[(v.video_id, f.frame_index)]
        except KeyError:
            raise MissingPredictionError(
                f"no prediction for annotated frame {v.video_id}/{f.frame_index}"
            ) from None


def localized(pred_box: BoundingBox | None, gt_boxes) -> bool:
    """Strictly more than half overlap with the best-matching ground truth."""
    if pred_box is None:
        return False
    return max(iou(pred_box, g) for g in gt_boxes) > CORLOC_IOU


def corloc_table(predictions, manifest: VideoManifest) -> dict:
    """Per-class CorLoc, their average, and the overall frame-level CorLoc.

    Values are fractions in [0, 1]. ``average`` is the unweighted mean over
    classes with at least one annotated frame.
    """
    hits, counts = defaultdict(int), defaultdict(int)
    for v, f, p in _annotated(manifest, predictions):
        counts[v.class_id] += 1
        hits[v.class_id] += localized(p.box, f.gt_boxes)
    per_class = {manifest.classes[k]: hits[k] / counts[k] for k in sorted(counts)}
    n = sum(counts.values())
    return {
        "per_class": per_class,
        "average": sum(per_class.values()) / len(per_class) if per_class else 0.0,
        "overall": sum(hits.values()) / n if n else 0.0,
        "n_frames": n,
    }


def corloc(predictions, manifest: VideoManifest) -> float:
    """Frame-level CorLoc over every annotated frame."""
    return corloc_table(predictions, manifest)["overall"]


def cl_accuracy(predictions, manifest: VideoManifest) -> float:
    """Fraction of annotated frames whose predicted class is the video label."""
    pairs = [(v.class_id, p.class_id) for v, f, p in _annotated(manifest, predictions)]
    return sum(a == b for a, b in pairs) / len(pairs) if pairs else 0.0


def format_report(table: dict, cl: float | None = None) -> str:
    """Plain-text table: one column per class then the average, in percent."""
    names = list(table["per_class"])
    head = " | ".join(f"{n:>8s}" for n in names + ["avg"])
    row = " | ".join(f"{100 * table['per_class'][n]:8.1f}" for n in names)
    lines = ["CorLoc   | " + head, "         | " + row + f" | {100 * table['average']:8.1f}"]
    if cl is not None:
        lines.append(f"CL accuracy: {100 * cl:.1f}")
    return "\n".join(lines)
