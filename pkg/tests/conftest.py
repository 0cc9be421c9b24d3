import json

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def enumerate_iou(a, b):
    """Pixel-enumeration IoU: count integer cells covered by each box."""
    cells_a = {(x, y) for x in range(a.x_min, a.x_max) for y in range(a.y_min, a.y_max)}
    cells_b = {(x, y) for x in range(b.x_min, b.x_max) for y in range(b.y_min, b.y_max)}
    return len(cells_a & cells_b) / len(cells_a | cells_b)


def flood_fill_box(values, tau):
    """Threshold, flood-fill 8-connected components with an explicit stack,
    keep the largest (first found on ties) and return its min/max coordinates."""
    h, w = values.shape
    on = values >= tau * values.max()
    seen = np.zeros_like(on)
    best = None
    for y in range(h):
        for x in range(w):
            if not on[y, x] or seen[y, x]:
                continue
            stack, comp = [(y, x)], []
            seen[y, x] = True
            while stack:
                cy, cx = stack.pop()
                comp.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and on[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            if best is None or len(comp) > len(best):
                best = comp
    ys = [p[0] for p in best]
    xs = [p[1] for p in best]
    return (min(xs), min(ys), max(xs) + 1, max(ys) + 1)


def exhaustive_otsu(values):
    """Try every one of the 256 bin edges as a split directly on the pixels,
    scoring between-class variance with bin-centre quantised values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    edges = [k / 256 for k in range(257)]
    # quantise each pixel: bin k holds (k/256, (k+1)/256], bin 0 also holds 0
    q = []
    for x in v:
        k = 0
        while k < 255 and x > edges[k + 1]:
            k += 1
        q.append((edges[k] + edges[k + 1]) / 2)
    q = np.array(q)
    best, best_thr = -1.0, None
    for k in range(255):
        thr = edges[k + 1]
        hi = v > thr
        n1, n0 = hi.sum(), (~hi).sum()
        if n0 == 0 or n1 == 0:
            continue
        w0, w1 = n0 / v.size, n1 / v.size
        var = w0 * w1 * (q[~hi].mean() - q[hi].mean()) ** 2
        if var > best + 1e-15:
            best, best_thr = var, thr
    return best_thr


def dense_crf_loop(fg, image, sigma_rgb, sigma_xy):
    """O(N^2) double loop over pixel pairs of the relaxed dense-CRF energy."""
    h, w = fg.shape
    maps = [1.0 - fg, fg]
    total = 0.0
    pix = [(y, x) for y in range(h) for x in range(w)]
    for i, (yi, xi) in enumerate(pix):
        for j, (yj, xj) in enumerate(pix):
            if i == j:
                continue
            d_rgb = np.sum((image[yi, xi] - image[yj, xj]) ** 2) / sigma_rgb**2
            d_xy = ((xi - xj) ** 2 + (yi - yj) ** 2) / sigma_xy**2
            k = np.exp(-0.5 * (d_rgb + d_xy))
            for s in maps:
                total += s[yi, xi] * k * (1.0 - s[yj, xj])
    return total


# -- shared tiny synthetic world -------------------------------------------------

TINY_SYNTH = dict(n_videos=14, shots_per_video=2, frames_per_shot=10, image_size=48,
                  object_size=(14, 18), speed=2, distractors=1, val_per_class=1,
                  test_per_class=1)


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    from tcam.data import SynthConfig, generate_synthetic

    return generate_synthetic(SynthConfig(**TINY_SYNTH), seed=11,
                              out_dir=tmp_path_factory.mktemp("tiny_synth"))


@pytest.fixture(scope="session")
def tiny_frames(tiny_manifest):
    from tcam.data import FrameStore
    from tcam.pipeline import manifest_frames

    train = tiny_manifest.subset("train")
    return manifest_frames(train, FrameStore(train))


@pytest.fixture(scope="session")
def tiny_classifier(tiny_frames):
    from tcam.cams import FrameClassifier

    X, y = tiny_frames[0], tiny_frames[1]
    return FrameClassifier(width=8, input_size=48, epochs=10, lr=0.05, batch_size=16,
                           seed=0).fit(X, y)


@pytest.fixture(scope="session")
def tiny_shots(tiny_manifest, tiny_classifier, tmp_path_factory):
    from tcam.data import FrameStore
    from tcam.decoder import load_shots
    from tcam.pipeline import dump_cams

    cam_dir = tmp_path_factory.mktemp("cams")
    store = FrameStore(tiny_manifest)
    dump_cams(tiny_classifier, tiny_manifest, store, cam_dir)
    return {split: load_shots(tiny_manifest.subset(split), store, cam_dir)
            for split in ("train", "val", "test")}


# -- shared tiny command-line run ------------------------------------------------

TINY_RUN = {
    "synth": {"n_videos": 10, "shots_per_video": 2, "frames_per_shot": 6, "image_size": 48,
              "object_size": [14, 18], "speed": 2, "distractors": 1,
              "val_per_class": 1, "test_per_class": 1, "annotate_every": 2},
    "classifier": {"width": 8, "input_size": 48, "epochs": 3, "batch_size": 16},
    "train": {"n": 1, "epochs": 2, "batch_size": 8, "lr": 0.1, "resize": 52, "crop": 48},
    "decoder": {"width": 8},
}
RUN_STAGES = ["gen-synth", "train-classifier", "dump-cams", "train-decoder", "infer", "evaluate"]


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """Every CLI stage once on a tiny config; returns (root, config path, run dir)."""
    from tcam.cli import main
    from tcam.config import RunConfig

    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(TINY_RUN))
    for stage in RUN_STAGES:
        extra = ["--overlays", "3"] if stage == "infer" else []
        assert main([stage, "--config", str(cfg), "--seed", "1", "--out", str(root / "runs")] + extra) == 0
    run_dir = root / "runs" / RunConfig.from_dict(TINY_RUN).with_seed(1).run_name()
    return root, cfg, run_dir


# -- acceptance report -------------------------------------------------------------

CRITERIA: dict[int, tuple[str, str, float, str]] = {}


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None and (report.when == "call" or report.failed or report.skipped):
        number, title = marker.args
        detail = dict(item.user_properties).get("detail", "")
        status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
        CRITERIA[number] = (title, status, report.duration, detail)
    return report


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, status, seconds, detail = CRITERIA[number]
        line = f"criterion {number} {status}: {title} ({seconds:.1f}s)"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
