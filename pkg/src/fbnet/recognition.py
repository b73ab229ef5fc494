"""Recognition: a high-resolution teacher, a low-resolution extractor trained
by feature matching, an embedding head, and prototypical classification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import Config, DataError

GROUPNORM_GROUPS = 8


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(GROUPNORM_GROUPS, channels), channels)


class ResDownBlock(nn.Module):
    """Residual block that halves the spatial size (stride-2 first conv)."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm1 = _gn(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, stride=1, padding=1)
        self.norm2 = _gn(cout)
        self.skip = nn.Conv2d(cin, cout, 1, stride=2)

    def forward(self, x):
        h = F.leaky_relu(self.norm1(self.conv1(x)), 0.2)
        h = self.norm2(self.conv2(h))
        return F.leaky_relu(h + self.skip(x), 0.2)


class FeatureNet(nn.Module):
    """Residual conv trunk -> global average pool -> feature vector.

    Group-normalized throughout, so features depend only on the single input
    image and never on batch composition.
    """

    def __init__(self, resolution: int, feature_dim: int, base_channels: int,
                 first_kernel: int, stem_stride: int = 1):
        super().__init__()
        self.resolution = resolution
        self.feature_dim = feature_dim
        ch = base_channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, ch, first_kernel, stride=stem_stride,
                      padding=first_kernel // 2),
            _gn(ch), nn.LeakyReLU(0.2))
        size = resolution // stem_stride
        blocks = []
        while size > 4:
            cout = min(ch * 2, base_channels * 8)
            blocks.append(ResDownBlock(ch, cout))
            ch, size = cout, size // 2
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(ch, feature_dim)

    def forward(self, x):
        n, c, h, w = x.shape
        if (h, w) != (self.resolution, self.resolution):
            raise ValueError(
                f"expected {self.resolution}x{self.resolution} input, got {h}x{w}")
        feat = self.blocks(self.stem(x)).mean(dim=(2, 3))
        return self.head(feat)


class Teacher(nn.Module):
    """High-resolution extractor plus the softmax classifier head it was
    pretrained with. Frozen after pretraining; also serves as the desk-scale
    scorer network for the image-quality metrics."""

    def __init__(self, resolution: int, feature_dim: int, base_channels: int,
                 class_ids: list[int]):
        super().__init__()
        self.features = FeatureNet(resolution, feature_dim, base_channels,
                                   first_kernel=7, stem_stride=2)
        self.classifier = nn.Linear(feature_dim, len(class_ids))
        self.register_buffer("class_ids",
                             torch.as_tensor(sorted(class_ids), dtype=torch.int64))

    def forward(self, x):
        return self.classifier(self.features(x))


def build_teacher(cfg: Config, class_ids: list[int]) -> Teacher:
    return Teacher(cfg.teacher_resolution, cfg.feature_dim,
                   cfg.feat_channels(), class_ids)


def build_student(cfg: Config) -> FeatureNet:
    return FeatureNet(cfg.image_resolution, cfg.feature_dim,
                      cfg.feat_channels(), first_kernel=5, stem_stride=1)


class EmbeddingNet(nn.Module):
    """Three fully-connected layers mapping features to the metric space."""

    def __init__(self, feature_dim: int, hidden: int, out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(feature_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out))

    def forward(self, x):
        return self.net(x)


def build_embedding(cfg: Config) -> EmbeddingNet:
    return EmbeddingNet(cfg.feature_dim, cfg.embed_hidden, cfg.embed_out)


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------

def _as_batch(images) -> torch.Tensor:
    t = torch.as_tensor(images, dtype=torch.float32)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    return t


def extract_features(net: FeatureNet | Teacher, images, batch_size: int = 64,
                     grad: bool = False) -> torch.Tensor:
    """Batched feature extraction; `net` may be the student or the teacher."""
    feat_net = net.features if isinstance(net, Teacher) else net
    t = _as_batch(images)
    chunks = []
    ctx = torch.enable_grad() if grad else torch.no_grad()
    with ctx:
        for i in range(0, len(t), batch_size):
            chunks.append(feat_net(t[i:i + batch_size]))
    return torch.cat(chunks) if len(chunks) > 1 else chunks[0]


def extract_high(teacher: Teacher, images, batch_size: int = 64) -> torch.Tensor:
    return extract_features(teacher, images, batch_size)


def extract_low(student: FeatureNet, images, batch_size: int = 64) -> torch.Tensor:
    return extract_features(student, images, batch_size)


def class_probabilities(teacher: Teacher, images, batch_size: int = 64) -> np.ndarray:
    """Teacher classifier posteriors, used by the quality metrics."""
    t = _as_batch(images)
    rows = []
    with torch.no_grad():
        for i in range(0, len(t), batch_size):
            rows.append(torch.softmax(teacher(t[i:i + batch_size]), dim=1))
    return torch.cat(rows).numpy()


# ---------------------------------------------------------------------------
# Teacher pretraining and resolution distillation
# ---------------------------------------------------------------------------

def pretrain_teacher(teacher: Teacher, images: np.ndarray, labels: np.ndarray,
                     *, epochs: int, batch_size: int, lr: float,
                     betas: tuple[float, float],
                     rng: np.random.Generator) -> float:
    """Softmax cross-entropy training on the base categories; returns the
    final training accuracy."""
    class_ids = teacher.class_ids.numpy()
    index_of = {int(c): i for i, c in enumerate(class_ids)}
    targets = torch.as_tensor([index_of[int(c)] for c in labels])
    data = torch.as_tensor(images, dtype=torch.float32)
    opt = torch.optim.Adam(teacher.parameters(), lr=lr, betas=betas)
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss = F.cross_entropy(teacher(data[idx]), targets[idx])
            if not torch.isfinite(loss):
                raise DataError("teacher pretraining loss became non-finite")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    with torch.no_grad():
        correct = 0
        for i in range(0, len(data), batch_size):
            pred = teacher(data[i:i + batch_size]).argmax(dim=1)
            correct += int((pred == targets[i:i + batch_size]).sum())
    return correct / len(data)


@dataclass
class FeatureCache:
    """Teacher features per image id, persisted as one array container."""

    ids: list[str]
    features: np.ndarray
    source_hash: str = ""

    def __post_init__(self):
        self._index = {i: k for k, i in enumerate(self.ids)}

    def lookup(self, ids: list[str]) -> torch.Tensor:
        missing = [i for i in ids if i not in self._index]
        if missing:
            raise DataError(f"feature cache is missing ids: {missing[:5]}"
                            + ("…" if len(missing) > 5 else ""))
        rows = self.features[[self._index[i] for i in ids]]
        return torch.as_tensor(rows, dtype=torch.float32)

    def save(self, path):
        np.savez(Path(path), ids=np.array(self.ids),
                 features=self.features.astype(np.float32),
                 source_hash=np.array(self.source_hash))

    @classmethod
    def load(cls, path) -> "FeatureCache":
        path = Path(path)
        if not path.exists():
            raise DataError(f"feature cache not found: {path}")
        with np.load(path, allow_pickle=False) as npz:
            return cls(ids=[str(s) for s in npz["ids"]],
                       features=npz["features"],
                       source_hash=str(npz["source_hash"]))


def build_feature_cache(teacher: Teacher, images: np.ndarray, ids: list[str],
                        source_hash: str = "", batch_size: int = 64) -> FeatureCache:
    feats = extract_high(teacher, images, batch_size).numpy()
    return FeatureCache(ids=list(ids), features=feats, source_hash=source_hash)


def distillation_loss(student_features: torch.Tensor,
                      teacher_features: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the squared feature-space distance."""
    if student_features.shape != teacher_features.shape:
        raise DataError(
            f"feature shapes differ: {tuple(student_features.shape)} vs "
            f"{tuple(teacher_features.shape)}")
    return ((student_features - teacher_features) ** 2).sum(dim=1).mean()


def distill(student: FeatureNet, cache: FeatureCache, images: np.ndarray,
            ids: list[str], *, iterations: int, batch_size: int, lr: float,
            betas: tuple[float, float], rng: np.random.Generator) -> list[float]:
    """Train the low-resolution extractor to match cached teacher features;
    returns the per-step loss history."""
    targets = cache.lookup(ids)
    data = torch.as_tensor(images, dtype=torch.float32)
    opt = torch.optim.Adam(student.parameters(), lr=lr, betas=betas)
    history = []
    for _ in range(iterations):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        loss = distillation_loss(student(data[idx]), targets[idx])
        if not torch.isfinite(loss):
            raise DataError("distillation loss became non-finite")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(float(loss.detach()))
    return history


# ---------------------------------------------------------------------------
# Prototypical classification
# ---------------------------------------------------------------------------

@dataclass
class PrototypeSet:
    """Per-category mean embeddings, ordered by ascending category id."""

    category_ids: np.ndarray     # (C,) int64, sorted
    means: torch.Tensor          # (C, E)
    counts: np.ndarray           # (C,) contributing member counts

    def index_of(self, category: int) -> int:
        pos = int(np.searchsorted(self.category_ids, category))
        if pos >= len(self.category_ids) or self.category_ids[pos] != category:
            raise DataError(f"category {category} has no prototype")
        return pos

    def detached(self) -> "PrototypeSet":
        return PrototypeSet(self.category_ids, self.means.detach(), self.counts)


def compute_prototypes(embeddings: torch.Tensor, labels,
                       categories=None) -> PrototypeSet:
    """Arithmetic mean embedding per category over all support members
    (real and generated alike)."""
    labels = np.asarray(labels, dtype=np.int64)
    if categories is None:
        categories = sorted(set(labels.tolist()))
    cat_ids = np.asarray(sorted(int(c) for c in categories), dtype=np.int64)
    means, counts = [], []
    for c in cat_ids:
        member = np.flatnonzero(labels == c)
        if len(member) == 0:
            raise DataError(f"category {c} has no support embeddings")
        means.append(embeddings[torch.as_tensor(member)].mean(dim=0))
        counts.append(len(member))
    return PrototypeSet(cat_ids, torch.stack(means),
                        np.asarray(counts, dtype=np.int64))


def _neg_sq_distances(query: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    diff = query.unsqueeze(1) - protos.means.unsqueeze(0)  # (M, C, E)
    return -(diff ** 2).sum(dim=2)


def classify(query: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    """Softmax over negative squared distances to the prototypes.

    query: (E,) or (M, E); returns (M, C) probabilities aligned with
    protos.category_ids.
    """
    if query.ndim == 1:
        query = query.unsqueeze(0)
    return torch.softmax(_neg_sq_distances(query, protos), dim=1)


def _log_probs(query: torch.Tensor, protos: PrototypeSet) -> torch.Tensor:
    return torch.log_softmax(_neg_sq_distances(query, protos), dim=1)


def rec_loss(query_embeddings: torch.Tensor, labels,
             protos: PrototypeSet) -> torch.Tensor:
    """Mean cross-entropy of the true category on (real) query embeddings."""
    idx = torch.as_tensor([protos.index_of(int(c)) for c in np.asarray(labels)])
    logp = _log_probs(query_embeddings, protos)
    return -logp[torch.arange(len(idx)), idx].mean()


def categorical_loss(generated_embeddings: torch.Tensor, categories,
                     protos: PrototypeSet) -> torch.Tensor:
    """Mean negative log-probability of each generated image's conditioning
    category; identical in form to rec_loss but evaluated on synthesized
    inputs so its gradient drives the generator."""
    return rec_loss(generated_embeddings, categories, protos)
