"""Identity classifier backbone, local max pooling and embedding files."""

from __future__ import annotations

import copy
import dataclasses
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import Dataset
from .errors import ConfigError, DataError, DivergenceError, ValidationError

logger = logging.getLogger(__name__)

EMB_MAGIC = b"EMB1"


@dataclass
class TrainHyperParams:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-4
    flip: bool = True
    backbone: str = "small"
    channels: int = 32
    pooling: str = "lmp"
    parts: int = 4
    embedding_dim: int = 0      # 0 = use the pooled descriptor directly
    finetune_epochs: int = 10
    finetune_lr: float = 2e-4
    finetune_alpha: float = 0.0
    refresh_every: int = 0

    def __post_init__(self):
        if self.pooling not in ("avg", "lmp"):
            raise ConfigError(f"pooling must be 'avg' or 'lmp', got {self.pooling!r}")
        if self.parts < 1:
            raise ConfigError("parts must be >= 1")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if self.finetune_alpha < 0:
            raise ConfigError("finetune_alpha must be >= 0")


def lmp_pool(feature_map: torch.Tensor, parts: int) -> torch.Tensor:
    """Max-pool P horizontal bands of a (C, h, w) or (N, C, h, w) map.

    Bands are contiguous along the height; when h is not divisible by P the
    leftover rows go to the topmost bands. The result concatenates band
    descriptors top to bottom, giving P * C values per map.
    """
    squeeze = feature_map.dim() == 3
    fm = feature_map.unsqueeze(0) if squeeze else feature_map
    if fm.dim() != 4:
        raise ValidationError(f"expected a (C, h, w) or (N, C, h, w) map, got shape {tuple(feature_map.shape)}")
    h = fm.shape[2]
    if not 1 <= parts <= h:
        raise ValidationError(f"cannot split height {h} into {parts} bands")
    base, extra = divmod(h, parts)
    sizes = [base + (1 if i < extra else 0) for i in range(parts)]
    bands = [b.amax(dim=(2, 3)) for b in torch.split(fm, sizes, dim=2)]
    out = torch.cat(bands, dim=1)
    return out[0] if squeeze else out


class SmallBackbone(nn.Module):
    """Four conv stages; (3, H, W) -> (4c, H/4, W/4)."""

    def __init__(self, channels: int = 32):
        super().__init__()

        def stage(cin, cout):
            return [nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]

        c = channels
        self.body = nn.Sequential(
            *stage(3, c), nn.MaxPool2d(2),
            *stage(c, 2 * c), nn.MaxPool2d(2),
            *stage(2 * c, 4 * c),
            *stage(4 * c, 4 * c),
        )
        self.out_channels = 4 * c

    def forward(self, x):
        return self.body(x)


class ResNet50Backbone(nn.Module):
    """torchvision ResNet-50 up to the last residual stage (no pretrained weights)."""

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet50

        net = resnet50(weights=None)
        self.body = nn.Sequential(*list(net.children())[:-2])
        self.out_channels = 2048

    def forward(self, x):
        return self.body(x)


BACKBONES = {"small": SmallBackbone, "resnet50": ResNet50Backbone}


class ReidModel(nn.Module):
    def __init__(self, num_classes: int, hp: TrainHyperParams):
        super().__init__()
        if hp.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {hp.backbone!r}; choose from {sorted(BACKBONES)}")
        self.hp = hp
        self.num_classes = num_classes
        self.backbone = SmallBackbone(hp.channels) if hp.backbone == "small" else ResNet50Backbone()
        parts = hp.parts if hp.pooling == "lmp" else 1
        self.descriptor_dim = parts * self.backbone.out_channels
        self.classifier = nn.Linear(self.descriptor_dim, num_classes)
        self.train_log: list[dict] = []

    def descriptor(self, x: torch.Tensor) -> torch.Tensor:
        fm = self.backbone(x)
        if self.hp.pooling == "lmp":
            if fm.shape[2] < self.hp.parts:
                raise ValidationError(f"feature map height {fm.shape[2]} < {self.hp.parts} LMP parts")
            return lmp_pool(fm, self.hp.parts)
        return fm.mean(dim=(2, 3))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.descriptor(x))


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    person_ids: np.ndarray
    camera_indices: np.ndarray
    domain_indices: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ValidationError("embedding vectors must be a 2-d array")
        n = self.vectors.shape[0]
        self.person_ids = np.asarray(self.person_ids, dtype=np.int64).reshape(-1)
        self.camera_indices = np.asarray(self.camera_indices, dtype=np.int64).reshape(-1)
        self.domain_indices = np.asarray(self.domain_indices, dtype=np.int64).reshape(-1)
        if not (len(self.person_ids) == len(self.camera_indices) == len(self.domain_indices) == n):
            raise ValidationError("embedding metadata length differs from row count")

    def __len__(self):
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=gen) < 0.5
    return torch.where(flip.view(-1, 1, 1, 1), x.flip(3), x)


def _labels(dataset: Dataset) -> np.ndarray:
    if any(r.person_id is None for r in dataset.records):
        raise DataError("supervised training needs every record labeled")
    return dataset.person_ids()


def _check_finite(loss: torch.Tensor, where: str):
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss during {where}")


def train_baseline(dataset: Dataset, hp: TrainHyperParams, seed: int,
                   num_classes: Optional[int] = None) -> ReidModel:
    """Softmax identity classification on labeled (translated or raw source) images."""
    y = _labels(dataset)
    classes = num_classes or int(y.max()) + 1
    if classes < 2:
        raise DataError("identity classification needs at least 2 classes")
    torch.manual_seed(seed)
    model = ReidModel(classes, hp)
    if hp.epochs == 0:
        return model.eval()
    gen = torch.Generator().manual_seed(seed)
    x_all = torch.from_numpy(dataset.pixel_array())
    y_all = torch.from_numpy(y)
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, hp.epochs)
    for epoch in range(hp.epochs):
        model.train()
        order = torch.randperm(len(y_all), generator=gen)
        correct = total_loss = 0.0
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            if len(idx) < 2:
                continue
            xb = _augment(x_all[idx], gen) if hp.flip else x_all[idx]
            logits = model(xb)
            loss = F.cross_entropy(logits, y_all[idx])
            _check_finite(loss, "baseline training")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += loss.item() * len(idx)
            correct += (logits.argmax(1) == y_all[idx]).sum().item()
        sched.step()
        entry = {"epoch": epoch + 1, "loss": total_loss / len(order), "accuracy": correct / len(order)}
        model.train_log.append(entry)
        logger.info("baseline epoch %d loss %.4f acc %.3f", entry["epoch"], entry["loss"], entry["accuracy"])
    return model.eval()


def training_accuracy(model: ReidModel, dataset: Dataset) -> float:
    logits = predict_logits(model, dataset)
    return float((logits.argmax(1) == _labels(dataset)).mean())


@torch.no_grad()
def predict_logits(model: ReidModel, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    model.eval()
    x = torch.from_numpy(dataset.pixel_array())
    return torch.cat([model(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]).numpy()


@torch.no_grad()
def extract_features(model: ReidModel, data: Dataset, normalize: bool = True, batch_size: int = 256) -> EmbeddingSet:
    if len(data) == 0:
        raise DataError("cannot extract features from an empty dataset")
    model.eval()
    x = torch.from_numpy(data.pixel_array())
    try:
        feats = torch.cat([model.descriptor(x[s:s + batch_size]) for s in range(0, len(x), batch_size)])
    except RuntimeError as exc:
        raise ValidationError(f"input resolution {tuple(x.shape[2:])} incompatible with the backbone: {exc}") from exc
    if normalize:
        feats = feats.double()
        feats = feats / feats.norm(dim=1, keepdim=True).clamp_min(1e-12)
    return EmbeddingSet(
        feats.float().numpy(),
        data.person_ids(),
        data.camera_indices(),
        np.array([r.domain_index for r in data.records]),
        normalized=normalize,
    )


def l2_normalize(emb: EmbeddingSet) -> EmbeddingSet:
    v = emb.vectors.astype(np.float64)
    v = v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)
    return dataclasses.replace(emb, vectors=v.astype(np.float32), normalized=True)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_embeddings(emb: EmbeddingSet, path) -> Path:
    """EMB1: magic, u32 N, u32 d, u32 flags, N*d f32 (little endian), then metadata lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, d = emb.vectors.shape
    meta = "".join(f"{p},{c},{g}\n" for p, c, g in zip(emb.person_ids, emb.camera_indices, emb.domain_indices))
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", n, d, 1 if emb.normalized else 0))
        fh.write(emb.vectors.astype("<f4").tobytes(order="C"))
        fh.write(meta.encode("utf-8"))
    return path


def read_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"embedding file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != EMB_MAGIC:
        raise DataError(f"{path} is not an EMB1 file")
    n, d, flags = struct.unpack_from("<III", blob, 4)
    start = 16
    end = start + 4 * n * d
    if len(blob) < end:
        raise DataError(f"{path} is truncated")
    vectors = np.frombuffer(blob, dtype="<f4", count=n * d, offset=start).reshape(n, d).astype(np.float32)
    lines = blob[end:].decode("utf-8").splitlines()
    if len(lines) != n:
        raise DataError(f"{path}: {len(lines)} metadata lines for {n} rows")
    meta = np.array([[int(v) for v in line.split(",")] for line in lines], dtype=np.int64).reshape(n, 3)
    return EmbeddingSet(vectors, meta[:, 0], meta[:, 1], meta[:, 2], normalized=bool(flags & 1))


def save_model(model: ReidModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "reid-model-v1",
        "num_classes": model.num_classes,
        "hyperparams": dataclasses.asdict(model.hp),
        "state_dict": model.state_dict(),
        "train_log": model.train_log,
    }, path)
    return path


def load_model(path) -> ReidModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    model = ReidModel(blob["num_classes"], TrainHyperParams(**blob["hyperparams"]))
    model.load_state_dict(blob["state_dict"])
    model.train_log = list(blob.get("train_log", []))
    return model.eval()


def clone_model(model: ReidModel) -> ReidModel:
    return copy.deepcopy(model)
