"""Shared configuration, labeled RNG streams, and checkpoint persistence."""

from __future__ import annotations

import ast
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

log = logging.getLogger("fbnet")

PHASES = ("pretrain", "distill", "base", "novel")
ABLATION_MODES = ("full", "rec_only", "view_only", "aug_only")

SEED_ENV_VAR = "FBNET_SEED"


class FBNetError(Exception):
    """Base class for package errors."""


class ConfigError(FBNetError):
    """Invalid configuration value or file."""


class DataError(FBNetError):
    """Dataset / manifest problem."""


class NumericError(FBNetError):
    """Non-finite value encountered during training."""


class CheckpointError(FBNetError):
    """Missing or corrupt checkpoint artifact."""


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------

AngleRange = tuple[float, float]


@dataclass(frozen=True)
class Config:
    """Run configuration. Immutable; share freely across threads."""

    image_resolution: int = 64
    noise_dim: int = 128
    feature_dim: int = 1000
    embed_hidden: int = 128
    embed_out: int = 128
    lambda_id: float = 10.0
    lambda_cat: float = 1.0
    lr: float = 5e-5
    n_support_base: int = 5
    n_support_novel: int = 1
    n_query: int = 1
    m_views: int = 1
    iters_base: int = 1400
    iters_novel: int = 100
    gan_batch: int = 64
    azimuth_range: AngleRange = (-math.pi, math.pi)
    elevation_range: AngleRange = (-math.pi / 4, math.pi / 4)
    roll_range: AngleRange = (0.0, 0.0)
    seed: int = 0
    ablation_mode: str = "full"
    joint_feature_update: bool = False
    # plumbing knobs (not part of the published recipe)
    base_categories_count: int = 0  # 0 = auto (two thirds of the categories)
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    identity_updates_d_only: bool = False
    deterministic_order: bool = True
    checkpoint_interval: int = 0
    gen_base_channels: int = 0
    disc_base_channels: int = 0
    feat_base_channels: int = 0
    teacher_scale: int = 4
    pretrain_epochs: int = 40
    distill_iters: int = 500

    def __post_init__(self):
        validate_config(self)

    # -- derived sizes ------------------------------------------------------

    @property
    def z_dim(self) -> int:
        return self.feature_dim + self.noise_dim

    @property
    def teacher_resolution(self) -> int:
        return self.image_resolution * self.teacher_scale

    def gen_channels(self) -> int:
        return self.gen_base_channels or 8 * self.image_resolution

    def disc_channels(self) -> int:
        return self.disc_base_channels or self.image_resolution

    def feat_channels(self) -> int:
        return self.feat_base_channels or max(16, self.image_resolution // 2)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, mapping: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        kwargs = {}
        for k, v in mapping.items():
            if k.endswith("_range"):
                v = _as_angle_range(k, v)
            kwargs[k] = v
        return cls(**kwargs)

    def with_overrides(self, **overrides) -> "Config":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        return replace(self, **overrides)


def _as_angle_range(name, value) -> AngleRange:
    try:
        lo, hi = value
        return (float(lo), float(hi))
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: expected a (low, high) pair, got {value!r}")


def _check(cond: bool, name: str, msg: str):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def validate_config(cfg: Config):
    r = cfg.image_resolution
    _check(r >= 16 and (r & (r - 1)) == 0, "image_resolution",
           f"must be a power of two >= 16, got {r}")
    for name in ("noise_dim", "feature_dim", "embed_hidden", "embed_out",
                 "n_support_base", "n_support_novel", "n_query", "m_views",
                 "gan_batch", "teacher_scale", "pretrain_epochs"):
        _check(int(getattr(cfg, name)) >= 1, name,
               f"must be >= 1, got {getattr(cfg, name)}")
    for name in ("iters_base", "iters_novel", "checkpoint_interval",
                 "distill_iters", "gen_base_channels", "disc_base_channels",
                 "feat_base_channels", "base_categories_count"):
        _check(int(getattr(cfg, name)) >= 0, name,
               f"must be >= 0, got {getattr(cfg, name)}")
    for name in ("lambda_id", "lambda_cat"):
        v = float(getattr(cfg, name))
        _check(math.isfinite(v) and v >= 0, name, f"must be >= 0, got {v}")
    _check(cfg.lr > 0 and math.isfinite(cfg.lr), "lr",
           f"must be positive, got {cfg.lr}")
    for name in ("adam_beta1", "adam_beta2"):
        v = float(getattr(cfg, name))
        _check(0.0 <= v < 1.0, name, f"must lie in [0, 1), got {v}")
    for name in ("azimuth_range", "elevation_range", "roll_range"):
        rng = getattr(cfg, name)
        _check(isinstance(rng, tuple) and len(rng) == 2, name,
               f"must be a (low, high) pair, got {rng!r}")
        lo, hi = rng
        _check(all(math.isfinite(x) for x in (lo, hi)), name,
               "bounds must be finite")
        _check(-math.pi <= lo <= hi <= math.pi, name,
               f"must satisfy -pi <= low <= high <= pi, got ({lo}, {hi})")
    _check(cfg.ablation_mode in ABLATION_MODES, "ablation_mode",
           f"must be one of {ABLATION_MODES}, got {cfg.ablation_mode!r}")
    for name in ("joint_feature_update", "identity_updates_d_only",
                 "deterministic_order"):
        _check(isinstance(getattr(cfg, name), bool), name, "must be a boolean")
    _check(isinstance(cfg.seed, int), "seed", "must be an integer")


# -- config file (plain text, one `key = value` per line) -------------------

def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text  # bare string, e.g. ablation_mode = full


def read_config_file(path) -> dict:
    """Parse `key = value` lines into a raw mapping (no validation)."""
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`, got {line!r}")
        key, _, value = line.partition("=")
        raw[key.strip()] = _parse_value(value)
    return raw


def write_config_file(cfg: Config, path):
    lines = []
    for k, v in cfg.to_dict().items():
        if isinstance(v, list):
            v = tuple(v)
        lines.append(f"{k} = {v!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path=None, overrides: dict | None = None) -> Config:
    """File values < CLI overrides < FBNET_SEED environment variable."""
    raw = read_config_file(path) if path else {}
    if overrides:
        raw.update(overrides)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            raw["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"seed: {SEED_ENV_VAR}={env_seed!r} is not an integer")
    return Config.from_dict(raw)


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def _label_key(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def seeded_rng(seed: int, stream_label: str) -> np.random.Generator:
    """Independent deterministic stream per (seed, label).

    Draws on one stream never perturb another, so toggling a consumer
    (say, view sampling) leaves the rest of a run reproducible.
    """
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF,
                                                _label_key(stream_label)])))


def derive_int_seed(seed: int, stream_label: str) -> int:
    """A single int in [0, 2^63) for APIs that take a scalar seed."""
    return int(seeded_rng(seed, stream_label).integers(0, 2 ** 63))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

ArrayDict = dict[str, np.ndarray]

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Full training snapshot: parameters, optimizer state, counters, RNG."""

    networks: dict[str, ArrayDict]
    optimizers: dict[str, ArrayDict] = field(default_factory=dict)
    iteration: int = 0
    phase: str = "pretrain"
    config: Config = field(default_factory=Config)
    rng_states: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise CheckpointError(f"unknown phase tag {self.phase!r}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _save_arrays(path: Path, arrays: ArrayDict):
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def _load_arrays(path: Path) -> ArrayDict:
    with np.load(path, allow_pickle=False) as npz:
        return {k: npz[k] for k in npz.files}


def save_checkpoint(state: Checkpoint, path) -> None:
    """Write one array container per network plus a manifest.

    The manifest (with per-file checksums) is written last, so a partially
    written checkpoint is detectable by its absence.
    """
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, arrays in sorted(state.networks.items()):
            fname = f"{name}.npz"
            _save_arrays(path / fname, arrays)
            files[fname] = _sha256(path / fname)
        for name, arrays in sorted(state.optimizers.items()):
            fname = f"opt_{name}.npz"
            _save_arrays(path / fname, arrays)
            files[fname] = _sha256(path / fname)
        manifest = {
            "format": FORMAT_VERSION,
            "phase": state.phase,
            "iteration": state.iteration,
            "config": state.config.to_dict(),
            "rng": state.rng_states,
            "networks": sorted(state.networks),
            "optimizers": sorted(state.optimizers),
            "files": files,
        }
        tmp = path / (MANIFEST_NAME + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        tmp.rename(path / MANIFEST_NAME)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint at {path}: {exc}") from exc


def load_checkpoint(path, expected_config: Config | None = None) -> Checkpoint:
    """Load and verify a checkpoint directory written by save_checkpoint."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise CheckpointError(
            f"no manifest at {manifest_path} (missing or incomplete checkpoint)")
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest {manifest_path}: {exc}") from exc

    for fname, digest in manifest["files"].items():
        blob = path / fname
        if not blob.exists():
            raise CheckpointError(f"checkpoint blob missing: {blob}")
        actual = _sha256(blob)
        if actual != digest:
            raise CheckpointError(
                f"checksum mismatch for {blob}: manifest {digest[:12]}…, "
                f"file {actual[:12]}…")

    config = Config.from_dict(manifest["config"])
    if expected_config is not None and config != expected_config:
        log.warning("checkpoint config snapshot differs from requested config; "
                    "snapshot wins")

    networks = {n: _load_arrays(path / f"{n}.npz") for n in manifest["networks"]}
    optimizers = {n: _load_arrays(path / f"opt_{n}.npz")
                  for n in manifest["optimizers"]}
    return Checkpoint(
        networks=networks,
        optimizers=optimizers,
        iteration=int(manifest["iteration"]),
        phase=manifest["phase"],
        config=config,
        rng_states=manifest.get("rng", {}),
    )
