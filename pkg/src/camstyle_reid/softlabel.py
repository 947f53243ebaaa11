"""KNN soft labels for unlabeled target images and soft-target fine-tuning.

For a target embedding q and its K nearest translated-source embeddings with
squared distances d_k and identity labels y_k::

    P_k = exp(-lam * d_k) / sum_k exp(-lam * d_k)
    y_p = sum_{k : y_k = p} P_k

The fine-tuning loss is the mean over target rows of -sum_p y_p log softmax(z)_p.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import Dataset
from .errors import ConfigError, DataError, ValidationError
from .reid import EmbeddingSet, ReidModel, TrainHyperParams, _augment, _check_finite, clone_model, extract_features

logger = logging.getLogger(__name__)

SLM_MAGIC = b"SLM1"


@dataclass(frozen=True)
class SoftLabelParams:
    K: int = 16
    lambda_temp: float = 10.0

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.lambda_temp < 0:
            raise ConfigError(f"lambda_temp must be >= 0, got {self.lambda_temp}")


@dataclass(frozen=True)
class NeighborSet:
    indices: np.ndarray
    squared_distances: np.ndarray
    classes: np.ndarray


@dataclass
class SoftLabelMatrix:
    probs: np.ndarray
    params: SoftLabelParams

    @property
    def shape(self):
        return self.probs.shape


def _squared_distances(query: np.ndarray, reference: np.ndarray) -> np.ndarray:
    diff = reference.astype(np.float64) - query.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def knn_query(query, reference: EmbeddingSet, K: int) -> NeighborSet:
    """Exact K nearest rows by squared Euclidean distance; ties go to the lower index."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != reference.dim:
        raise ValidationError(f"query dimension {q.shape[0]} != reference dimension {reference.dim}")
    if not 1 <= K <= len(reference):
        raise ValidationError(f"K={K} must lie in [1, {len(reference)}]")
    d2 = _squared_distances(q, reference.vectors)
    order = np.argsort(d2, kind="stable")[:K]
    return NeighborSet(order, d2[order], reference.person_ids[order])


def neighbor_selection_probs(neighbors, lambda_temp: float) -> np.ndarray:
    """Softmax of -lambda * squared distance, shifted by the max logit.

    ``neighbors`` is a :class:`NeighborSet` or the squared distances themselves.
    """
    if lambda_temp < 0:
        raise ConfigError(f"lambda_temp must be >= 0, got {lambda_temp}")
    if isinstance(neighbors, NeighborSet):
        neighbors = neighbors.squared_distances
    d2 = np.asarray(neighbors, dtype=np.float64)
    if d2.size == 0:
        raise ValidationError("neighborhood is empty")
    logits = -lambda_temp * d2
    w = np.exp(logits - logits.max())
    return w / w.sum()


def soft_label(selection_probs, classes, num_classes: int) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    if classes.size and (classes.min() < 0 or classes.max() >= num_classes):
        raise ValidationError(f"class index outside [0, {num_classes})")
    out = np.zeros(num_classes, dtype=np.float64)
    np.add.at(out, classes, np.asarray(selection_probs, dtype=np.float64))
    return out


def soft_label_all(target: EmbeddingSet, translated_source: EmbeddingSet, params: SoftLabelParams,
                   num_classes: Optional[int] = None) -> SoftLabelMatrix:
    if target.dim != translated_source.dim and len(target):
        raise ValidationError("target and source embeddings differ in dimension")
    if target.normalized != translated_source.normalized:
        raise ValidationError("target and source embeddings disagree on L2 normalization")
    if np.any(translated_source.person_ids < 0):
        raise DataError("every translated-source embedding needs an identity label")
    m = num_classes if num_classes is not None else int(translated_source.person_ids.max()) + 1
    probs = np.zeros((len(target), m), dtype=np.float64)
    for j, q in enumerate(target.vectors):
        nb = knn_query(q, translated_source, params.K)
        probs[j] = soft_label(neighbor_selection_probs(nb, params.lambda_temp), nb.classes, m)
    return SoftLabelMatrix(probs, params)


def cross_entropy_soft(pred_logits: torch.Tensor, soft) -> torch.Tensor:
    """-(1/N) sum_j sum_p soft[j, p] * log_softmax(pred_logits)[j, p]."""
    target = soft.probs if isinstance(soft, SoftLabelMatrix) else soft
    target = torch.as_tensor(target, dtype=pred_logits.dtype)
    if pred_logits.shape != target.shape:
        raise ValidationError(f"logits {tuple(pred_logits.shape)} and soft labels {tuple(target.shape)} differ")
    return -(target * F.log_softmax(pred_logits, dim=1)).sum(1).mean()


def finetune(model: ReidModel, target: Dataset, soft: SoftLabelMatrix, hp: TrainHyperParams, seed: int,
             source: Optional[Dataset] = None, source_embeddings_from: Optional[Dataset] = None) -> ReidModel:
    """End-to-end fine-tuning of a copy of ``model`` toward fixed soft labels.

    ``source`` enables the optional joint term ``finetune_alpha * CE`` on
    labeled translated-source batches. With ``refresh_every > 0`` and
    ``source_embeddings_from`` given, soft labels are recomputed from the
    current model every that many epochs.
    """
    if soft.probs.shape[0] != len(target):
        raise ValidationError(f"{soft.probs.shape[0]} soft-label rows for {len(target)} target images")
    if soft.probs.shape[1] != model.num_classes:
        raise ValidationError(f"soft labels have {soft.probs.shape[1]} classes, model has {model.num_classes}")
    tuned = clone_model(model)
    tuned.train_log = []
    if hp.finetune_epochs == 0:
        return tuned.eval()
    if hp.finetune_alpha > 0 and source is None:
        raise ConfigError("finetune_alpha > 0 needs the labeled translated source")

    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    x_t = torch.from_numpy(target.pixel_array())
    y_t = torch.from_numpy(soft.probs.astype(np.float32))
    if hp.finetune_alpha > 0:
        x_s = torch.from_numpy(source.pixel_array())
        y_s = torch.from_numpy(source.person_ids())
    opt = torch.optim.Adam(tuned.parameters(), lr=hp.finetune_lr, weight_decay=hp.weight_decay)
    for epoch in range(hp.finetune_epochs):
        if hp.refresh_every and epoch and epoch % hp.refresh_every == 0 and source_embeddings_from is not None:
            ref = extract_features(tuned, source_embeddings_from)
            tgt = extract_features(tuned, target)
            y_t = torch.from_numpy(soft_label_all(tgt, ref, soft.params, model.num_classes).probs.astype(np.float32))
        tuned.train()
        order = torch.randperm(len(x_t), generator=gen)
        total = 0.0
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            if len(idx) < 2:
                continue
            xb = _augment(x_t[idx], gen) if hp.flip else x_t[idx]
            loss = cross_entropy_soft(tuned(xb), y_t[idx])
            if hp.finetune_alpha > 0:
                sidx = torch.randint(len(x_s), (len(idx),), generator=gen)
                xs = _augment(x_s[sidx], gen) if hp.flip else x_s[sidx]
                loss = loss + hp.finetune_alpha * F.cross_entropy(tuned(xs), y_s[sidx])
            _check_finite(loss, "fine-tuning")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        tuned.train_log.append({"epoch": epoch + 1, "loss": total / len(order)})
        logger.info("finetune epoch %d loss %.4f", epoch + 1, total / len(order))
    return tuned.eval()


@torch.no_grad()
def soft_target_loss(model: ReidModel, target: Dataset, soft: SoftLabelMatrix) -> float:
    """Full-pass fine-tuning loss in eval mode."""
    model.eval()
    logits = torch.from_numpy(np.concatenate([
        model(torch.from_numpy(target.pixel_array()[s:s + 256])).numpy() for s in range(0, len(target), 256)
    ]))
    return float(cross_entropy_soft(logits.double(), soft.probs))


def write_soft_labels(soft: SoftLabelMatrix, path) -> Path:
    """SLM1: magic, u32 N_t, u32 M_s, u32 K, f64 lambda, N_t*M_s f32 row-major (little endian)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n, m = soft.probs.shape
    with open(path, "wb") as fh:
        fh.write(SLM_MAGIC)
        fh.write(struct.pack("<IIId", n, m, soft.params.K, soft.params.lambda_temp))
        fh.write(soft.probs.astype("<f4").tobytes(order="C"))
    return path


def read_soft_labels(path) -> SoftLabelMatrix:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"soft-label file not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != SLM_MAGIC:
        raise DataError(f"{path} is not an SLM1 file")
    n, m, k, lam = struct.unpack_from("<IIId", blob, 4)
    start = 4 + struct.calcsize("<IIId")
    if len(blob) != start + 4 * n * m:
        raise DataError(f"{path}: payload size does not match {n}x{m}")
    probs = np.frombuffer(blob, dtype="<f4", count=n * m, offset=start).reshape(n, m).astype(np.float64)
    return SoftLabelMatrix(probs, SoftLabelParams(k, lam))
