"""Per-frame inference and CAM-to-box conversion."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import BoundingBox, Cam, DomainError, Frame

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)
TAU_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))


def largest_component(binary: np.ndarray) -> np.ndarray:
    """Mask of the largest 8-connected component.

    Ties go to the component met first in row-major scan order, which is the
    one with the smallest label.
    """
    labels, n = ndimage.label(binary, structure=EIGHT_CONNECTED)
    if n == 0:
        raise DomainError("no localizable region")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == int(np.argmax(sizes)) + 1


def mask_to_box(mask: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise DomainError("no localizable region")
    return BoundingBox(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def cam_to_box(cam: Cam | np.ndarray, tau: float = 0.5) -> BoundingBox:
    """Tight box around the largest component of ``cam >= tau * max(cam)``."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    values = cam.values if isinstance(cam, Cam) else np.asarray(cam, dtype=np.float64)
    hi, lo = float(values.max()), float(values.min())
    if hi - lo < 1e-8 or hi <= 0.0:
        raise DomainError("no localizable region: flat map")
    return mask_to_box(largest_component(values >= tau * hi))


def boxes_for_taus(values: np.ndarray, taus=TAU_GRID) -> dict[float, BoundingBox | None]:
    """``cam_to_box`` at each tau; ``None`` where the map is flat."""
    out = {}
    for tau in taus:
        try:
            out[tau] = cam_to_box(values, tau)
        except DomainError:
            out[tau] = None
    return out


@dataclass(frozen=True)
class Localization:
    box: BoundingBox
    class_id: int
    cam: Cam
    score: float


@dataclass(frozen=True)
class Prediction:
    """One line of a prediction dump."""

    video_id: str
    shot_id: str
    frame_index: int
    class_id: int
    score: float
    box: BoundingBox | None

    def to_json(self) -> dict:
        return {"video_id": self.video_id, "shot_id": self.shot_id,
                "frame_index": self.frame_index, "class_id": self.class_id,
                "score": round(float(self.score), 6),
                "box": None if self.box is None else self.box.as_list()}

    @classmethod
    def from_json(cls, d: dict) -> "Prediction":
        box = None if d.get("box") is None else BoundingBox.from_list(d["box"])
        return cls(d["video_id"], d.get("shot_id", ""), int(d["frame_index"]),
                   int(d["class_id"]), float(d.get("score", 0.0)), box)


def infer_frame(model, classifier, frame: Frame, tau: float = 0.5) -> Localization:
    """Localize one frame with no access to any other frame."""
    proba = classifier.predict_proba(frame.pixels[None])[0]
    k = int(np.argmax(proba))
    fg = model.predict_maps(frame.pixels[None])[0]
    cam = Cam(fg.astype(np.float32), frame_index=frame.frame_index, class_id=k)
    return Localization(cam_to_box(cam, tau), k, cam, float(proba[k]))


def write_predictions(path, predictions) -> None:
    with open(path, "w") as fh:
        for p in predictions:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def read_predictions(path) -> list[Prediction]:
    with open(path) as fh:
        return [Prediction.from_json(json.loads(line)) for line in fh if line.strip()]


def overlay(frame: np.ndarray, cam: np.ndarray, gt: BoundingBox | None,
            pred: BoundingBox | None, alpha: float = 0.45) -> np.ndarray:
    """Frame blended with a CAM heat map; ground truth green, prediction red."""
    heat = np.stack([cam, np.clip(1.5 - np.abs(4 * cam - 2), 0, 1), 1.0 - cam], -1)
    img = (1 - alpha) * frame + alpha * heat

    def draw(box, color):
        if box is None:
            return
        x0, y0 = box.x_min, box.y_min
        x1, y1 = min(box.x_max, img.shape[1]) - 1, min(box.y_max, img.shape[0]) - 1
        img[y0, x0:x1 + 1] = img[y1, x0:x1 + 1] = color
        img[y0:y1 + 1, x0] = img[y0:y1 + 1, x1] = color

    draw(gt, (0.0, 1.0, 0.0))
    draw(pred, (1.0, 0.0, 0.0))
    return np.clip(img, 0.0, 1.0)


def save_overlay(path, frame, cam, gt, pred) -> None:
    from .data import save_image

    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_image(path, overlay(frame, cam, gt, pred))
