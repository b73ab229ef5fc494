"""Quantitative evaluation: all-way top-1 accuracy, Frechet feature distance,
inception-style diversity score, and qualitative multiview grid export."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import Checkpoint, Config, DataError, seeded_rng
from .data import Dataset, SplitSpec
from .geom3d import PoseRanges, ViewPose, sample_pose
from .recognition import (PrototypeSet, Teacher, build_embedding,
                          build_student, build_teacher, class_probabilities,
                          classify, compute_prototypes, extract_features)
from .synthesis import Generator, build_generator, draw_noise, make_latent
from .training import arrays_to_module

DEFAULT_IS_SPLITS = 4


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def top1_accuracy(query_embeddings: torch.Tensor, labels,
                  protos: PrototypeSet) -> float:
    """Fraction of queries whose highest-probability prototype matches the
    true category. Ties break to the lowest category id (prototype order is
    ascending and argmax takes the first maximum)."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise DataError("empty test set")
    probs = classify(query_embeddings, protos).detach().numpy()
    pred = protos.category_ids[np.argmax(probs, axis=1)]
    return float((pred == labels).mean())


def _sqrt_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(real_features: np.ndarray, fake_features: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of the two feature sets:
    |mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    Covariances use the unbiased (n-1) estimator; the cross term is computed
    via the symmetric form sqrt(sqrt(S1) S2 sqrt(S1)) with negative
    eigenvalues clipped at zero.
    """
    real = np.asarray(real_features, dtype=np.float64)
    fake = np.asarray(fake_features, dtype=np.float64)
    if real.ndim != 2 or fake.ndim != 2 or real.shape[1] != fake.shape[1]:
        raise DataError(f"feature dims differ: {real.shape} vs {fake.shape}")
    if len(real) < 2 or len(fake) < 2:
        raise DataError("need at least 2 samples per side")
    mu1, mu2 = real.mean(axis=0), fake.mean(axis=0)
    s1 = np.cov(real, rowvar=False)
    s2 = np.cov(fake, rowvar=False)
    s1, s2 = np.atleast_2d(s1), np.atleast_2d(s2)
    root1 = _sqrt_psd(s1)
    cross = np.linalg.eigvalsh(root1 @ s2 @ root1)
    tr_cross = np.sqrt(np.clip(cross, 0.0, None)).sum()
    d2 = float(((mu1 - mu2) ** 2).sum() + np.trace(s1) + np.trace(s2)
               - 2.0 * tr_cross)
    return max(d2, 0.0)


def inception_score(probs: np.ndarray, n_splits: int = DEFAULT_IS_SPLITS
                    ) -> tuple[float, float]:
    """exp(E KL(p(y|x) || p(y))) per split; returns (mean, std) over splits.

    Rows must be probability vectors. With n_splits=1 the score is invariant
    to row order; with more splits it depends on the contiguous partition.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DataError("expected an (N, C) array of class probabilities")
    if (probs < 0).any() or np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise DataError("rows must be probability distributions")
    if not 1 <= n_splits <= len(probs):
        raise DataError(f"n_splits must lie in [1, {len(probs)}]")
    scores = []
    for chunk in np.array_split(probs, n_splits):
        marginal = chunk.mean(axis=0)
        ratio = np.zeros_like(chunk)
        nz = chunk > 0
        ratio[nz] = chunk[nz] * (np.log(chunk[nz])
                                 - np.log(marginal)[np.nonzero(nz)[1]])
        scores.append(math.exp(ratio.sum(axis=1).mean()))
    return float(np.mean(scores)), float(np.std(scores))


# ---------------------------------------------------------------------------
# Grid export
# ---------------------------------------------------------------------------

def to_uint8(images: torch.Tensor | np.ndarray) -> np.ndarray:
    """Map [-1, 1] CHW image batches to HWC uint8."""
    arr = images.detach().numpy() if torch.is_tensor(images) else np.asarray(images)
    arr = np.clip((arr + 1.0) * 127.5, 0.0, 255.0)
    return np.round(np.moveaxis(arr, -3, -1)).astype(np.uint8)


def export_view_grid(generator: Generator, cond_images, poses: list[ViewPose],
                     path, *, student, noise_rng: np.random.Generator,
                     noise_dim: int) -> Path:
    """Rows = poses, columns = conditioning objects; lossless PNG output.

    Noise is drawn once per object and shared across rows, so a column keeps
    one identity across viewpoints.
    """
    cond = torch.as_tensor(np.asarray(cond_images), dtype=torch.float32)
    feats = extract_features(student, cond)
    noise = draw_noise(noise_rng, len(cond), noise_dim)
    z = make_latent(feats, noise)
    rows = []
    with torch.no_grad():
        for pose in poses:
            theta = pose.as_tensor().unsqueeze(0).expand(len(z), 3)
            rows.append(to_uint8(generator(z, theta)))
    tiles = np.stack(rows)  # (P, K, R, R, 3)
    p, k, r = tiles.shape[0], tiles.shape[1], tiles.shape[2]
    grid = tiles.transpose(0, 2, 1, 3, 4).reshape(p * r, k * r, 3)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path)
    return path


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class PhaseMetrics:
    accuracy: float | None = None
    fid: float | None = None
    is_mean: float | None = None
    is_std: float | None = None
    n_test: int = 0
    n_generated: int = 0

    def validate(self):
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise DataError(f"accuracy out of range: {self.accuracy}")
        if self.fid is not None and self.fid < 0:
            raise DataError(f"negative distribution distance: {self.fid}")
        if self.is_mean is not None and self.is_mean < 1.0 - 1e-9:
            raise DataError(f"diversity score below 1: {self.is_mean}")


@dataclass
class MetricReport:
    phases: dict[str, PhaseMetrics] = field(default_factory=dict)
    mode: str = "full"
    config: dict = field(default_factory=dict)

    def flat(self) -> dict:
        out = {"mode": self.mode}
        for phase, m in sorted(self.phases.items()):
            for key in ("accuracy", "fid", "is_mean", "is_std",
                        "n_test", "n_generated"):
                out[f"{phase}.{key}"] = getattr(m, key)
        return out

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        txt = out_dir / "metrics.txt"
        txt.write_text("".join(f"{k} = {v}\n" for k, v in self.flat().items()))
        js = out_dir / "metrics.json"
        js.write_text(json.dumps({"metrics": self.flat(), "config": self.config},
                                 indent=2, sort_keys=True))
        return txt, js


# ---------------------------------------------------------------------------
# Checkpoint evaluation pipeline
# ---------------------------------------------------------------------------

def teacher_from_arrays(cfg: Config, arrays) -> Teacher:
    class_ids = [int(c) for c in np.asarray(arrays["class_ids"])]
    teacher = build_teacher(cfg, class_ids)
    arrays_to_module(teacher, arrays)
    return teacher


def _phase_latents(student, images, m_views, noise_rng, noise_dim):
    feats = extract_features(student, images)
    rep = feats.repeat_interleave(m_views, dim=0)
    return make_latent(rep, draw_noise(noise_rng, len(rep), noise_dim))


def _generate_batch(generator, z, thetas, batch):
    parts = []
    with torch.no_grad():
        for lo in range(0, len(z), batch):
            parts.append(generator(z[lo:lo + batch], thetas[lo:lo + batch]))
    return torch.cat(parts)


def evaluate_checkpoint(ckpt: Checkpoint, dataset: Dataset,
                        teacher_dataset: Dataset, split: SplitSpec,
                        out_dir=None, n_is_splits: int = DEFAULT_IS_SPLITS,
                        grid_poses: list[ViewPose] | None = None) -> MetricReport:
    """Accuracy / FID / IS per phase for a trained checkpoint, plus one view
    grid per phase. The scorer network is the pretrained high-resolution
    teacher carried inside the checkpoint."""
    cfg = ckpt.config
    mode = cfg.ablation_mode
    student = build_student(cfg)
    arrays_to_module(student, ckpt.networks["extractor_low"])
    embedding = build_embedding(cfg)
    arrays_to_module(embedding, ckpt.networks["embedding"])
    generator = None
    if mode != "rec_only":
        gen_key = "augmenter" if (mode == "aug_only"
                                  and "augmenter" in ckpt.networks) else "generator"
        generator = build_generator(cfg)
        arrays_to_module(generator, ckpt.networks[gen_key])
    teacher = None
    if "extractor_high" in ckpt.networks:
        teacher = teacher_from_arrays(cfg, ckpt.networks["extractor_high"])

    report = MetricReport(mode=mode, config=cfg.to_dict())
    phases = ["base"] if ckpt.phase == "base" else ["base", "novel"]
    ranges = PoseRanges.from_config(cfg)
    for phase in phases:
        noise_rng = seeded_rng(cfg.seed, f"eval.{phase}.noise")
        view_rng = seeded_rng(cfg.seed, f"eval.{phase}.views")
        cats = split.categories(phase)
        train_idx = np.concatenate([split.train[c] for c in cats])
        train_images = dataset.images[train_idx]
        train_labels = dataset.labels[train_idx]

        with torch.no_grad():
            sup_embs = embedding(extract_features(student, train_images))
        all_embs, all_labels = [sup_embs], [train_labels]

        fakes = None
        if generator is not None:
            z = _phase_latents(student, train_images, cfg.m_views,
                               noise_rng, cfg.noise_dim)
            thetas = torch.stack([sample_pose(ranges, view_rng).as_tensor()
                                  for _ in range(len(z))])
            fakes = _generate_batch(generator, z, thetas, cfg.gan_batch)
            if mode in ("full", "aug_only"):
                with torch.no_grad():
                    gen_embs = embedding(extract_features(student, fakes))
                all_embs.append(gen_embs)
                all_labels.append(np.repeat(train_labels, cfg.m_views))

        protos = compute_prototypes(torch.cat(all_embs),
                                    np.concatenate(all_labels), categories=cats)
        test_idx = np.concatenate([split.test[c] for c in cats])
        with torch.no_grad():
            q_embs = embedding(extract_features(student, dataset.images[test_idx]))
        metrics = PhaseMetrics(
            accuracy=top1_accuracy(q_embs, dataset.labels[test_idx], protos),
            n_test=len(test_idx))

        if fakes is not None and teacher is not None:
            t_res = cfg.teacher_resolution
            fakes_hi = F.interpolate(fakes, size=(t_res, t_res), mode="bilinear",
                                     align_corners=False)
            real_hi = torch.as_tensor(teacher_dataset.images[train_idx])
            real_feats = extract_features(teacher, real_hi).numpy()
            fake_feats = extract_features(teacher, fakes_hi).numpy()
            metrics.fid = fid(real_feats, fake_feats)
            probs = class_probabilities(teacher, fakes_hi)
            splits = min(n_is_splits, len(probs))
            metrics.is_mean, metrics.is_std = inception_score(probs, splits)
            metrics.n_generated = len(fakes)
        metrics.validate()
        report.phases[phase] = metrics

        if generator is not None and out_dir is not None:
            poses = grid_poses or [ViewPose(0.0, a, 0.0) for a in
                                   np.linspace(cfg.azimuth_range[0],
                                               cfg.azimuth_range[1], 5)]
            first_per_cat = [int(split.train[c][0]) for c in cats[:6]]
            export_view_grid(generator, dataset.images[first_per_cat], poses,
                             Path(out_dir) / "grids" / f"{phase}_views.png",
                             student=student, noise_rng=noise_rng,
                             noise_dim=cfg.noise_dim)
    if out_dir is not None:
        report.write(out_dir)
    return report
