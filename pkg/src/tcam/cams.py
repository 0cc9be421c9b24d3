"""Frame classifier and class activation map extraction.

The classifier is a convolutional encoder followed by global average pooling
and a linear layer. It is wrapped as a scikit-learn style estimator
(:class:`FrameClassifier`) so it can be fitted, scored and cloned like any
other classifier; the encoder is later shared, frozen, with the decoder.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .arrays import load_arrays, save_arrays
from .core import Cam, DomainError, Frame, minmax_normalize

log = logging.getLogger(__name__)

CAM_KINDS = ("cam", "gradcam", "layercam")


# -- encoders ----------------------------------------------------------------

class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + skip)


class Encoder(nn.Module):
    """Feature extractor exposing named stages.

    ``forward`` returns a dict ``{stage_name: feature_map}`` for every stage;
    ``stage_names``, ``strides`` and ``channels`` describe them in order.
    """

    stage_names: tuple[str, ...]
    strides: tuple[int, ...]
    channels: tuple[int, ...]

    def forward(self, x):  # pragma: no cover - abstract
        raise NotImplementedError


class SmallResNet(Encoder):
    """Six residual blocks in three stages at strides 4, 8 and 16."""

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.stem = nn.Sequential(
            nn.Conv2d(3, w, 3, 2, 1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)
        )
        self.stage1 = nn.Sequential(BasicBlock(w, 2 * w, 2), BasicBlock(2 * w, 2 * w))
        self.stage2 = nn.Sequential(BasicBlock(2 * w, 4 * w, 2), BasicBlock(4 * w, 4 * w))
        self.stage3 = nn.Sequential(BasicBlock(4 * w, 8 * w, 2), BasicBlock(8 * w, 8 * w))
        self.stage_names = ("stage1", "stage2", "stage3")
        self.strides = (4, 8, 16)
        self.channels = (2 * w, 4 * w, 8 * w)

    def forward(self, x):
        feats = {}
        x = self.stem(x)
        for name in self.stage_names:
            x = getattr(self, name)(x)
            feats[name] = x
        return feats


class ResNet50Encoder(Encoder):
    """torchvision ResNet-50 trunk; pretrained weights are loaded by the caller."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1, self.layer2 = net.layer1, net.layer2
        self.layer3, self.layer4 = net.layer3, net.layer4
        self.stage_names = ("layer1", "layer2", "layer3", "layer4")
        self.strides = (4, 8, 16, 32)
        self.channels = (256, 512, 1024, 2048)

    def forward(self, x):
        feats = {}
        x = self.stem(x)
        for name in self.stage_names:
            x = getattr(self, name)(x)
            feats[name] = x
        return feats


def build_encoder(arch: str, width: int = 16) -> Encoder:
    if arch == "small_resnet":
        return SmallResNet(width)
    if arch == "resnet50":
        return ResNet50Encoder()
    raise ValueError(f"unknown encoder arch {arch!r}")


class ClassifierNet(nn.Module):
    def __init__(self, encoder: Encoder, n_classes: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.channels[-1], n_classes)

    def forward(self, x):
        feats = self.encoder(normalize_input(x))
        last = feats[self.encoder.stage_names[-1]]
        return self.head(last.mean(dim=(2, 3))), feats


def normalize_input(x: torch.Tensor) -> torch.Tensor:
    return (x - 0.5) / 0.25


# -- array helpers -----------------------------------------------------------

def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) float array in [0, 1] -> (N, 3, H, W) float32 tensor."""
    a = np.asarray(images, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise DomainError(f"expected (N, H, W, 3) images, got {a.shape}")
    return torch.from_numpy(np.ascontiguousarray(a)).permute(0, 3, 1, 2)


def resize(x: torch.Tensor, size: int | tuple[int, int]) -> torch.Tensor:
    size = (size, size) if isinstance(size, int) else tuple(size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


# -- estimator ---------------------------------------------------------------

class FrameClassifier(ClassifierMixin, BaseEstimator):
    """Frame classifier trained with cross-entropy on independent frames.

    Parameters
    ----------
    arch : {"small_resnet", "resnet50"}
    width : base channel count of ``small_resnet``.
    input_size : frames are resized to ``input_size x input_size``.
    epochs, lr, batch_size, momentum, weight_decay : SGD settings.
    seed : controls initialisation and shuffling.
    backbone_weights : optional ``.arrs`` file with encoder weights to start from.
    """

    def __init__(self, arch="small_resnet", width=16, input_size=96, epochs=10, lr=0.05,
                 batch_size=32, momentum=0.9, weight_decay=1e-4, seed=0,
                 backbone_weights=None):
        self.arch = arch
        self.width = width
        self.input_size = input_size
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.seed = seed
        self.backbone_weights = backbone_weights

    def _build(self, n_classes: int) -> ClassifierNet:
        net = ClassifierNet(build_encoder(self.arch, self.width), n_classes)
        if self.backbone_weights:
            state = {k: torch.from_numpy(v) for k, v in load_arrays(self.backbone_weights).items()}
            net.encoder.load_state_dict(state)
        return net

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 4 or X.shape[-1] != 3 or len(X) != len(y):
            raise ValueError("X must be (N, H, W, 3) with one label per frame")
        if len(y) == 0:
            raise ValueError("empty training set")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("degenerate label set: need at least two classes")
        if not np.array_equal(self.classes_, np.arange(self.classes_.max() + 1)):
            raise ValueError("empty class: labels must cover 0..K-1")
        K = len(self.classes_)
        gen = seed_everything(self.seed)
        self.net_ = self._build(K)
        opt = torch.optim.SGD(self.net_.parameters(), lr=self.lr, momentum=self.momentum,
                              weight_decay=self.weight_decay)
        xt = resize(to_tensor(X), self.input_size)
        yt = torch.from_numpy(y)
        self.loss_history_ = []
        n = len(y)
        for epoch in range(self.epochs):
            self.net_.train()
            order = torch.randperm(n, generator=gen)
            total = 0.0
            for i in range(0, n, self.batch_size):
                idx = order[i:i + self.batch_size]
                xb = xt[idx]
                flip = torch.rand(len(idx), generator=gen) < 0.5
                xb = torch.where(flip[:, None, None, None], xb.flip(-1), xb)
                logits, _ = self.net_(xb)
                loss = F.cross_entropy(logits, yt[idx])
                if not torch.isfinite(loss):
                    raise FloatingPointError(f"non-finite classifier loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            self.loss_history_.append(total / n)
            log.info("classifier epoch %d loss %.4f", epoch, self.loss_history_[-1])
        self.net_.eval()
        self.n_classes_ = K
        return self

    @property
    def encoder_(self) -> Encoder:
        check_is_fitted(self, "net_")
        return self.net_.encoder

    def _logits(self, X, batch_size=64) -> torch.Tensor:
        check_is_fitted(self, "net_")
        xt = to_tensor(X)
        self.net_.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(xt), batch_size):
                out.append(self.net_(resize(xt[i:i + batch_size], self.input_size))[0])
        return torch.cat(out).double()

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(self._logits(X), dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        return self.classes_[self._logits(X).argmax(1).numpy()]

    def training_loss(self, X, y) -> float:
        """Mean cross-entropy of the current weights on (X, y)."""
        logits = self._logits(X)
        return float(F.cross_entropy(logits, torch.as_tensor(np.asarray(y), dtype=torch.long)))

    # -- CAMs --

    def cam_maps(self, X, class_ids, kind="layercam", target_layer=None, batch_size=32) -> np.ndarray:
        """Normalised CAMs, one per image, upsampled to each image's size.

        Returns a float32 (N, H, W) array with values in [0, 1].
        """
        check_is_fitted(self, "net_")
        if kind not in CAM_KINDS:
            raise ValueError(f"unknown CAM kind {kind!r}; choose from {CAM_KINDS}")
        enc = self.net_.encoder
        layer = target_layer or enc.stage_names[-1]
        if layer not in enc.stage_names:
            raise ValueError(f"unknown target_layer {layer!r}; choose from {enc.stage_names}")
        if kind == "cam" and layer != enc.stage_names[-1]:
            raise ValueError("kind='cam' is only defined on the last stage")
        xt = to_tensor(X)
        class_ids = np.broadcast_to(np.asarray(class_ids, dtype=np.int64), (len(xt),))
        if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= self.n_classes_):
            raise ValueError("class_id outside [0, K)")
        H, W = xt.shape[-2:]
        self.net_.eval()
        out = np.empty((len(xt), H, W), dtype=np.float32)
        for i in range(0, len(xt), batch_size):
            xb = resize(xt[i:i + batch_size], self.input_size)
            cb = torch.tensor(class_ids[i:i + batch_size])
            raw = self._raw_cam(xb, cb, kind, layer)
            up = F.interpolate(raw[:, None], size=(H, W), mode="bilinear", align_corners=False)[:, 0]
            for j, m in enumerate(up.numpy()):
                out[i + j] = minmax_normalize(np.maximum(m, 0.0))
        return out

    def _raw_cam(self, xb, cb, kind, layer) -> torch.Tensor:
        net = self.net_
        if kind == "cam":
            with torch.no_grad():
                _, feats = net(xb)
                w = net.head.weight[cb]  # (B, C)
                return F.relu(torch.einsum("bc,bchw->bhw", w, feats[layer]))
        with torch.enable_grad():
            # the input carries the graph, so a frozen encoder still yields gradients
            logits, feats = net(xb.detach().requires_grad_(True))
            A = feats[layer]
            score = logits.gather(1, cb[:, None]).sum()
            (grad,) = torch.autograd.grad(score, A)
        A, grad = A.detach(), grad.detach()
        if kind == "gradcam":
            alpha = grad.mean(dim=(2, 3), keepdim=True)
            return F.relu((alpha * A).sum(1))
        return F.relu((F.relu(grad) * A).sum(1))

    # -- persistence --

    def save(self, path) -> None:
        check_is_fitted(self, "net_")
        path = Path(path)
        state = {k: v.detach().cpu().numpy() for k, v in self.net_.state_dict().items()}
        save_arrays(path, state)
        meta = {"arch": self.arch, "K": int(self.n_classes_), "input_size": self.input_size,
                "seed": self.seed, "epochs": self.epochs, "params": self.get_params(),
                "loss_history": self.loss_history_}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, default=str))

    @classmethod
    def load(cls, path) -> "FrameClassifier":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        params = dict(meta["params"])
        params["backbone_weights"] = None
        clf = cls(**params)
        clf.net_ = clf._build(meta["K"])
        state = {k: torch.from_numpy(v) for k, v in load_arrays(path).items()}
        clf.net_.load_state_dict(state)
        clf.net_.eval()
        clf.n_classes_ = meta["K"]
        clf.classes_ = np.arange(meta["K"])
        clf.loss_history_ = meta.get("loss_history", [])
        return clf


@dataclass(frozen=True)
class CamMethod:
    kind: str = "layercam"
    target_layer: str | None = None

    def __post_init__(self):
        if self.kind not in CAM_KINDS:
            raise ValueError(f"unknown CAM kind {self.kind!r}")


def train_classifier(frames, labels, epochs=10, lr=0.05, batch_size=32, seed=0, **kwargs) -> FrameClassifier:
    """Fit a :class:`FrameClassifier` on a stack of frames or ``Frame`` objects."""
    X = np.stack([f.pixels if isinstance(f, Frame) else f for f in frames])
    return FrameClassifier(epochs=epochs, lr=lr, batch_size=batch_size, seed=seed, **kwargs).fit(X, labels)


def classify(c: FrameClassifier, frame: Frame) -> np.ndarray:
    return c.predict_proba(frame.pixels[None])[0]


def extract_cam(c: FrameClassifier, method: CamMethod, frame: Frame, class_id: int) -> Cam:
    values = c.cam_maps(frame.pixels[None], [class_id], method.kind, method.target_layer)[0]
    return Cam(values, frame_index=frame.frame_index, class_id=int(class_id))


def param_checksum(module: nn.Module) -> float:
    """Order-sensitive checksum of parameters and buffers."""
    acc = 0.0
    for i, t in enumerate(module.state_dict().values()):
        acc += math.fsum(t.double().flatten().tolist()) * (i + 1)
    return acc
