"""Video manifests, the synthetic moving-shapes generator and a folder ingester.

Manifest JSON schema (paths relative to the manifest file)::

    {
      "version": 1,
      "classes": ["disk", "square"],
      "videos": [
        {"video_id": "v000", "class_id": 0, "split": "train",
         "shots": [
           {"shot_id": "v000_s0", "meta": {...},
            "frames": [{"path": "frames/v000/s0/0000.png", "frame_index": 0,
                        "gt_boxes": [[x_min, y_min, x_max, y_max]] | null}]}
         ]}
      ]
    }

Boxes are half-open pixel boxes. ``gt_boxes`` is ``null`` on unannotated
frames.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import BoundingBox, DomainError, ImageDomain

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond")
TEXTURES = ("stripes", "vstripes", "checker", "dots", "diagonal", "plain")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


@dataclass
class FrameRecord:
    path: str
    frame_index: int
    gt_boxes: list[BoundingBox] | None = None

    @property
    def annotated(self) -> bool:
        return bool(self.gt_boxes)


@dataclass
class Shot:
    shot_id: str
    frames: list[FrameRecord]
    meta: dict = field(default_factory=dict)

    @property
    def start(self) -> int:
        return self.frames[0].frame_index

    @property
    def end(self) -> int:
        return self.frames[-1].frame_index

    def frame(self, t: int) -> FrameRecord:
        return self.frames[t - self.start]


@dataclass
class Video:
    video_id: str
    class_id: int
    shots: list[Shot]
    split: str = "train"


@dataclass
class VideoManifest:
    classes: list[str]
    videos: list[Video]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.classes) < 2:
            raise DomainError("manifest needs at least two classes")
        seen = set()
        for v in self.videos:
            if v.video_id in seen:
                raise DomainError(f"duplicate video_id {v.video_id}")
            seen.add(v.video_id)
            if not 0 <= v.class_id < len(self.classes):
                raise DomainError(f"video {v.video_id}: class_id out of range")
            if v.split not in SPLITS:
                raise DomainError(f"video {v.video_id}: unknown split {v.split!r}")
            if not v.shots:
                raise DomainError(f"video {v.video_id} has no shots")
            for s in v.shots:
                if not s.frames:
                    raise DomainError(f"shot {s.shot_id} has no frames")
                idx = [f.frame_index for f in s.frames]
                if idx != list(range(idx[0], idx[0] + len(idx))):
                    raise DomainError(f"shot {s.shot_id}: frame indices must be contiguous")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def subset(self, split: str) -> "VideoManifest":
        return VideoManifest(self.classes, [v for v in self.videos if v.split == split], self.root)

    def iter_frames(self):
        """Yield ``(video, shot, frame_record)`` in manifest order."""
        for v in self.videos:
            for s in v.shots:
                for f in s.frames:
                    yield v, s, f

    def iter_shots(self):
        for v in self.videos:
            for s in v.shots:
                yield v, s

    def annotated_frames(self):
        return [(v, s, f) for v, s, f in self.iter_frames() if f.annotated]

    def frame_path(self, rec: FrameRecord) -> Path:
        return self.root / rec.path

    def to_dict(self) -> dict:
        def frame(f):
            boxes = None if f.gt_boxes is None else [b.as_list() for b in f.gt_boxes]
            return {"path": f.path, "frame_index": f.frame_index, "gt_boxes": boxes}

        return {
            "version": 1,
            "classes": list(self.classes),
            "videos": [
                {"video_id": v.video_id, "class_id": v.class_id, "split": v.split,
                 "shots": [{"shot_id": s.shot_id, "meta": s.meta,
                            "frames": [frame(f) for f in s.frames]} for s in v.shots]}
                for v in self.videos
            ],
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def from_dict(cls, d: dict, root=Path()) -> "VideoManifest":
        videos = []
        for v in d["videos"]:
            shots = []
            for s in v["shots"]:
                frames = [
                    FrameRecord(
                        f["path"], int(f["frame_index"]),
                        None if f.get("gt_boxes") is None
                        else [BoundingBox.from_list(b) for b in f["gt_boxes"]],
                    )
                    for f in s["frames"]
                ]
                shots.append(Shot(s["shot_id"], frames, s.get("meta", {})))
            videos.append(Video(v["video_id"], int(v["class_id"]), shots, v.get("split", "train")))
        return cls(list(d["classes"]), videos, Path(root))

    @classmethod
    def load(cls, path) -> "VideoManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), root=path.parent)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(path, pixels: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


class FrameStore:
    """Loads every frame of a manifest once and keeps them as uint8 arrays."""

    def __init__(self, manifest: VideoManifest):
        self.manifest = manifest
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def get(self, video_id: str, rec: FrameRecord) -> np.ndarray:
        key = (video_id, rec.frame_index)
        if key not in self._cache:
            px = load_image(self.manifest.frame_path(rec))
            self._cache[key] = np.round(px * 255).astype(np.uint8)
        return self._cache[key].astype(np.float32) / 255.0

    def preload(self, workers: int = 1) -> "FrameStore":
        """Decode every manifest frame up front, optionally on a thread pool."""
        todo = [(v.video_id, f) for v, _, f in self.manifest.iter_frames()]
        if workers <= 1:
            for vid, f in todo:
                self.get(vid, f)
            return self
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            decoded = list(pool.map(lambda item: load_image(self.manifest.frame_path(item[1])), todo))
        for (vid, f), px in zip(todo, decoded):
            self._cache[(vid, f.frame_index)] = np.round(px * 255).astype(np.uint8)
        return self


# -- synthetic generator -----------------------------------------------------

@dataclass
class SynthConfig:
    n_classes: int = 2
    n_videos: int = 40
    shots_per_video: int = 8
    frames_per_shot: int = 12
    image_size: int = 96
    object_size: tuple[int, int] = (26, 32)
    speed: int = 4
    light_jitter: float = 1.2
    light_floor: float = 0.15
    pattern_contrast: float = 0.5
    distractors: int = 2
    texture_spot: float = 0.0
    annotate_every: int = 1
    val_per_class: int = 4
    test_per_class: int = 4

    def __post_init__(self):
        if self.n_classes < 2 or self.n_classes > len(SHAPES):
            raise ValueError(f"n_classes must lie in [2, {len(SHAPES)}]")
        if self.speed < 0:
            raise ValueError("speed must be >= 0")
        ImageDomain(self.image_size, self.image_size)
        lo, hi = self.object_size
        travel = self.speed * (self.frames_per_shot - 1)
        if not 4 <= lo <= hi or hi + travel > self.image_size:
            raise ValueError("objects plus their travel must fit inside the frame")
        if not 0.0 <= self.texture_spot <= 1.0:
            raise ValueError("texture_spot must lie in [0, 1]")
        if self.n_videos < self.n_classes * (self.val_per_class + self.test_per_class + 1):
            raise ValueError("too few videos for the requested val/test split")


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` mask whose tight box is the full square."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = (xx - c) / (size / 2.0), (yy - c) / (size / 2.0)
    if kind == "disk":
        m = dx**2 + dy**2 <= 1.0
    elif kind == "square":
        m = np.ones((size, size), dtype=bool)
    elif kind == "triangle":
        m = np.abs(dx) <= (dy + 1.0) / 2.0 + 1.0 / size
    elif kind == "cross":
        m = (np.abs(dx) <= 0.34) | (np.abs(dy) <= 0.34)
    elif kind == "ring":
        r2 = dx**2 + dy**2
        m = (r2 <= 1.0) & (r2 >= 0.3)
    elif kind == "diamond":
        m = np.abs(dx) + np.abs(dy) <= 1.0 + 1e-9
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def surface_pattern(kind: str, size: int, period: int = 6) -> np.ndarray:
    """Class-specific surface modulation in [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size]
    half = period // 2
    if kind == "stripes":
        return ((yy // half) % 2).astype(np.float64)
    if kind == "vstripes":
        return ((xx // half) % 2).astype(np.float64)
    if kind == "checker":
        return (((yy // half) + (xx // half)) % 2).astype(np.float64)
    if kind == "dots":
        return (((yy % period) - half) ** 2 + ((xx % period) - half) ** 2 <= 2).astype(np.float64)
    if kind == "diagonal":
        return (((xx + yy) // half) % 2).astype(np.float64)
    if kind == "plain":
        return np.ones((size, size))
    raise ValueError(f"unknown texture {kind!r}")


def noise_texture(rng: np.random.Generator, size: int, cells: int = 6) -> np.ndarray:
    """Low-frequency colour noise in roughly [0.25, 0.75]."""
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells, 3)).astype(np.float32)
    img = Image.fromarray(np.uint8(coarse * 255)).resize((size, size), Image.BICUBIC)
    tex = np.asarray(img, dtype=np.float32) / 255.0
    tex = 0.25 + 0.5 * tex + rng.normal(0.0, 0.02, size=tex.shape).astype(np.float32)
    return np.clip(tex, 0.0, 1.0)


DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))


def random_color(rng: np.random.Generator) -> np.ndarray:
    hue = rng.uniform(0, 1)
    color = np.array([0.5 + 0.5 * np.cos(2 * np.pi * (hue + k / 3)) for k in range(3)])
    return 0.1 + 0.9 * color


def add_distractor(background: np.ndarray, cfg: "SynthConfig", rng: np.random.Generator) -> np.ndarray:
    """Static untextured shape of any kind, sized and coloured like the objects."""
    size = int(rng.integers(cfg.object_size[0] * 2 // 3, cfg.object_size[1] + 1))
    mask = shape_mask(SHAPES[int(rng.integers(len(SHAPES)))], size)
    x, y = (int(v) for v in rng.integers(0, cfg.image_size - size + 1, size=2))
    return render_frame(background, mask, x, y, random_color(rng),
                        float(rng.uniform(0, 2 * np.pi)), cfg.light_floor)


def plan_shot(cfg: SynthConfig, rng: np.random.Generator) -> dict:
    """Sample object size, colour, start position and axis-aligned direction."""
    size = int(rng.integers(cfg.object_size[0], cfg.object_size[1] + 1))
    dx, dy = DIRECTIONS[int(rng.integers(len(DIRECTIONS)))]
    travel = cfg.speed * (cfg.frames_per_shot - 1)
    span = cfg.image_size - size

    def start(d):
        if d > 0:
            return int(rng.integers(0, span - travel + 1))
        if d < 0:
            return int(rng.integers(travel, span + 1))
        return int(rng.integers(0, span + 1))

    color = random_color(rng)
    return {"size": size, "direction": [dx, dy], "x0": start(dx), "y0": start(dy),
            "color": color.round(4).tolist(), "light": float(rng.uniform(0, 2 * np.pi))}


def spot_mask(mask: np.ndarray, radius: float, rng: np.random.Generator) -> np.ndarray:
    """Disk of ``radius`` pixels centred on a random pixel of ``mask``."""
    ys, xs = np.nonzero(mask)
    i = int(rng.integers(len(ys)))
    yy, xx = np.mgrid[0:mask.shape[0], 0:mask.shape[1]]
    return (yy - ys[i]) ** 2 + (xx - xs[i]) ** 2 <= radius**2


def render_frame(background: np.ndarray, mask: np.ndarray, x: int, y: int, color,
                 light_angle: float, light_floor: float, pattern: np.ndarray | None = None,
                 contrast: float = 0.5, pattern_region: np.ndarray | None = None) -> np.ndarray:
    """Paste a directionally lit, optionally patterned object onto ``background``.

    With ``pattern_region`` the pattern only shows inside that region; the
    rest of the object gets the pattern's mean shade, so brightness alone
    does not reveal the region.
    """
    img = background.copy()
    s = mask.shape[0]
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    c = (s - 1) / 2.0
    proj = ((xx - c) * np.cos(light_angle) + (yy - c) * np.sin(light_angle)) / s
    shade = light_floor + (1.0 - light_floor) * np.clip(0.5 + 1.2 * proj, 0.0, 1.0)
    if pattern is not None:
        mod = 1.0 - contrast + contrast * pattern
        if pattern_region is not None:
            mod = np.where(pattern_region, mod, 1.0 - contrast + contrast * pattern.mean())
        shade = shade * mod
    obj = np.asarray(color)[None, None, :] * shade[..., None]
    patch = img[y:y + s, x:x + s]
    patch[mask] = obj[mask]
    return img


def generate_synthetic(cfg: SynthConfig, seed: int, out_dir) -> VideoManifest:
    """Write PNG frames and ``manifest.json`` under ``out_dir``.

    Each video holds one moving object of its class. Within a shot the object
    keeps its size and colour and moves ``speed`` pixels per frame along one
    axis; the light direction drifts by ``light_jitter`` radians (std) per
    frame so that different parts of the object are salient in different
    frames. With ``texture_spot > 0`` the class texture only covers a disk of
    radius ``texture_spot * size`` that jumps to a random point of the object
    every frame.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / ".probe").write_text("")
        (out / ".probe").unlink()
    except OSError as exc:
        raise OSError(f"unwritable output dir {out}: {exc}") from None
    rng = np.random.default_rng(seed)
    classes = list(SHAPES[: cfg.n_classes])
    per_class = [cfg.n_videos // cfg.n_classes + (k < cfg.n_videos % cfg.n_classes)
                 for k in range(cfg.n_classes)]
    videos = []
    vid = 0
    for k, count in enumerate(per_class):
        splits = (["test"] * cfg.test_per_class + ["val"] * cfg.val_per_class
                  + ["train"] * (count - cfg.test_per_class - cfg.val_per_class))
        for split in splits:
            video_id = f"v{vid:03d}"
            vid += 1
            shots, t = [], 0
            for si in range(cfg.shots_per_video):
                plan = plan_shot(cfg, rng)
                bg = noise_texture(rng, cfg.image_size)
                for _ in range(cfg.distractors):
                    bg = add_distractor(bg, cfg, rng)
                mask = shape_mask(classes[k], plan["size"])
                pattern = surface_pattern(TEXTURES[k], plan["size"])
                shot_id = f"{video_id}_s{si}"
                fdir = out / "frames" / video_id / f"s{si}"
                fdir.mkdir(parents=True, exist_ok=True)
                light = plan["light"]
                frames = []
                for j in range(cfg.frames_per_shot):
                    x = plan["x0"] + plan["direction"][0] * cfg.speed * j
                    y = plan["y0"] + plan["direction"][1] * cfg.speed * j
                    if j:
                        light += float(rng.normal(0.0, cfg.light_jitter))
                    region = None
                    if cfg.texture_spot > 0:
                        region = spot_mask(mask, cfg.texture_spot * plan["size"], rng)
                    img = render_frame(bg, mask, x, y, plan["color"], light, cfg.light_floor,
                                       pattern, cfg.pattern_contrast, region)
                    rel = f"frames/{video_id}/s{si}/{j:04d}.png"
                    save_image(out / rel, img)
                    box = BoundingBox(x, y, x + plan["size"], y + plan["size"])
                    annotated = j % cfg.annotate_every == 0
                    frames.append(FrameRecord(rel, t, [box] if annotated else None))
                    t += 1
                shots.append(Shot(shot_id, frames, plan))
            videos.append(Video(video_id, k, shots, split))
    manifest = VideoManifest(classes, videos, out)
    manifest.save(out / "manifest.json")
    (out / "synth_config.json").write_text(json.dumps({"seed": seed, **asdict(cfg)}, indent=1))
    log.info("wrote %d videos to %s", len(videos), out)
    return manifest


# -- folder ingest -----------------------------------------------------------

def parse_box_file(path) -> list[BoundingBox]:
    """One whitespace-separated ``x_min y_min x_max y_max`` box per line."""
    boxes = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DomainError(f"{path}: expected 4 numbers per line, got {line!r}")
        boxes.append(BoundingBox.from_list([float(p) for p in parts]))
    return boxes


def ingest_yto(root_path, split_spec: dict | None = None) -> VideoManifest:
    """Build a manifest from ``root/<class>/<video>/<shot>/<frame>.{png,jpg}``.

    A frame is annotated when a ``<frame>.txt`` box file sits next to it.

    ``split_spec`` keys:

    * ``test``: list of video ids forming the test split (default none);
    * ``val_per_class``: videos per class drawn from the rest for validation
      (default 5, the YTO v1.0 protocol; use 3 for v2.2);
    * ``seed``: seed of the validation draw (default 0);
    * ``classes``: optional allowed class names; other directories are errors.
    """
    spec = dict(split_spec or {})
    root = Path(root_path)
    if not root.is_dir():
        raise DomainError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DomainError(f"no class directories under {root}")
    allowed = spec.get("classes")
    if allowed is not None:
        unknown = [p.name for p in class_dirs if p.name not in allowed]
        if unknown:
            raise DomainError(f"unknown class directories: {unknown}")
        classes = list(allowed)
    else:
        classes = [p.name for p in class_dirs]
    test_ids = set(spec.get("test", []))
    val_per_class = int(spec.get("val_per_class", 5))
    rng = np.random.default_rng(int(spec.get("seed", 0)))

    videos = []
    for cdir in class_dirs:
        k = classes.index(cdir.name)
        class_videos = []
        for vdir in sorted(p for p in cdir.iterdir() if p.is_dir()):
            shots, t = [], 0
            for sdir in sorted(p for p in vdir.iterdir() if p.is_dir()):
                frames = []
                for img in sorted(p for p in sdir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
                    box_file = img.with_suffix(".txt")
                    boxes = parse_box_file(box_file) if box_file.exists() else None
                    frames.append(FrameRecord(str(img.relative_to(root)), t, boxes or None))
                    t += 1
                if frames:
                    shots.append(Shot(f"{vdir.name}_{sdir.name}", frames))
            if shots:
                class_videos.append(Video(vdir.name, k, shots, "test" if vdir.name in test_ids else "train"))
        pool = [v for v in class_videos if v.split == "train"]
        if val_per_class > len(pool):
            raise DomainError(f"class {cdir.name}: only {len(pool)} videos for {val_per_class} val")
        for i in rng.choice(len(pool), size=val_per_class, replace=False):
            pool[int(i)].split = "val"
        videos.extend(class_videos)
    if not videos:
        raise DomainError(f"no frames found under {root}")
    for v in videos:
        if v.split != "train" and not any(f.annotated for s in v.shots for f in s.frames):
            raise DomainError(f"missing annotation files for {v.split} video {v.video_id}")
    return VideoManifest(classes, videos, root)
