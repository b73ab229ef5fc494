"""Episodic joint training with bidirectional feedback between the synthesis
and recognition modules, plus the ablation modes used for comparison runs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import (Checkpoint, CheckpointError, Config, ConfigError,
                   NumericError, rng_state, restore_rng, derive_int_seed,
                   save_checkpoint, seeded_rng)
from .data import Dataset, Episode, SplitSpec, sample_episode
from .geom3d import PoseRanges, sample_pose
from .recognition import (EmbeddingNet, FeatureCache, FeatureNet,
                          build_embedding, build_student, categorical_loss,
                          compute_prototypes, distillation_loss, rec_loss)
from .synthesis import (Discriminator, Generator, build_discriminator,
                        build_generator, draw_noise, gan_loss_terms,
                        identity_loss, make_latent)

LOSS_TERMS = ("gan", "rec", "feature", "identity", "cat")
TRACE_HEADER = "iteration\tgan\trec\tfeature\tidentity\tcat\ttotal"

RNG_STREAMS = ("episode", "noise", "views")


@dataclass
class LossRecord:
    iteration: int
    gan: float
    rec: float
    feature: float
    identity: float
    cat: float
    total: float

    def row(self) -> str:
        return "\t".join([str(self.iteration)] +
                         [repr(v) for v in (self.gan, self.rec, self.feature,
                                            self.identity, self.cat, self.total)])

    @classmethod
    def from_row(cls, line: str) -> "LossRecord":
        parts = line.split("\t")
        return cls(int(parts[0]), *(float(v) for v in parts[1:7]))


# ---------------------------------------------------------------------------
# Module / optimizer <-> array-dict conversion (checkpoint currency)
# ---------------------------------------------------------------------------

def module_to_arrays(mod: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy()
            for k, v in mod.state_dict().items()}


def arrays_to_module(mod: torch.nn.Module, arrays: dict[str, np.ndarray]):
    state = {k: torch.as_tensor(np.asarray(v)) for k, v in arrays.items()}
    mod.load_state_dict(state)


def optimizer_to_arrays(opt: torch.optim.Optimizer,
                        mod: torch.nn.Module) -> dict[str, np.ndarray]:
    name_of = {id(p): n for n, p in mod.named_parameters()}
    out = {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            pname = name_of[id(p)]
            for k, v in st.items():
                arr = v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)
                out[f"{pname}::{k}"] = arr.copy()
    return out


def arrays_to_optimizer(opt: torch.optim.Optimizer, mod: torch.nn.Module,
                        arrays: dict[str, np.ndarray]):
    params = dict(mod.named_parameters())
    per_param: dict[str, dict[str, np.ndarray]] = {}
    for key, arr in arrays.items():
        pname, _, field = key.rpartition("::")
        per_param.setdefault(pname, {})[field] = arr
    for pname, fields in per_param.items():
        p = params[pname]
        st = {}
        for k, arr in fields.items():
            t = torch.as_tensor(np.asarray(arr))
            if k == "step":
                t = t.reshape(())
            st[k] = t.to(p.dtype) if t.is_floating_point() else t
        opt.state[p] = st


def _make_adam(mod: torch.nn.Module, cfg: Config) -> torch.optim.Adam:
    return torch.optim.Adam(mod.parameters(), lr=cfg.lr,
                            betas=(cfg.adam_beta1, cfg.adam_beta2))


# ---------------------------------------------------------------------------
# Train state
# ---------------------------------------------------------------------------

class TrainState:
    """Owns every network, optimizer, and RNG stream of one training phase.

    Single training thread owns all parameter writes; the state is not safe
    for concurrent mutation.
    """

    def __init__(self, cfg: Config, phase: str, generator: Generator,
                 discriminator: Discriminator, student: FeatureNet,
                 embedding: EmbeddingNet,
                 teacher_arrays: dict[str, np.ndarray] | None = None,
                 augmenter: Generator | None = None,
                 teacher_cache: FeatureCache | None = None,
                 rngs: dict[str, np.random.Generator] | None = None):
        if phase not in ("base", "novel"):
            raise ConfigError(f"training phase must be base or novel, got {phase!r}")
        if cfg.ablation_mode == "aug_only" and augmenter is None:
            raise ConfigError("aug_only mode requires a frozen augmenter "
                              "(a completed view_only checkpoint)")
        if cfg.joint_feature_update and teacher_cache is None:
            raise ConfigError("joint_feature_update requires the teacher "
                              "feature cache")
        self.cfg = cfg
        self.phase = phase
        self.iteration = 0
        self.generator = generator
        self.discriminator = discriminator
        self.student = student
        self.embedding = embedding
        self.teacher_arrays = teacher_arrays
        self.augmenter = augmenter
        self.teacher_cache = teacher_cache
        self.opt_g = _make_adam(generator, cfg)
        self.opt_d = _make_adam(discriminator, cfg)
        self.opt_p = _make_adam(embedding, cfg)
        self.opt_f = _make_adam(student, cfg) if cfg.joint_feature_update else None
        self.rngs = rngs or {name: seeded_rng(cfg.seed, f"{phase}.{name}")
                             for name in RNG_STREAMS}
        self.pose_ranges = PoseRanges.from_config(cfg)
        self.trace: list[LossRecord] = []
        self.last_info: dict = {}

    # -- persistence --------------------------------------------------------

    def _trainables(self) -> dict[str, torch.nn.Module]:
        return {"generator": self.generator,
                "discriminator": self.discriminator,
                "extractor_low": self.student,
                "embedding": self.embedding}

    def zero_all_grads(self):
        for mod in self._trainables().values():
            mod.zero_grad(set_to_none=True)

    def to_checkpoint(self) -> Checkpoint:
        networks = {name: module_to_arrays(mod)
                    for name, mod in self._trainables().items()}
        if self.teacher_arrays is not None:
            networks["extractor_high"] = dict(self.teacher_arrays)
        if self.augmenter is not None:
            networks["augmenter"] = module_to_arrays(self.augmenter)
        optimizers = {
            "generator": optimizer_to_arrays(self.opt_g, self.generator),
            "discriminator": optimizer_to_arrays(self.opt_d, self.discriminator),
            "embedding": optimizer_to_arrays(self.opt_p, self.embedding),
        }
        if self.opt_f is not None:
            optimizers["extractor_low"] = optimizer_to_arrays(self.opt_f, self.student)
        return Checkpoint(
            networks=networks, optimizers=optimizers,
            iteration=self.iteration, phase=self.phase, config=self.cfg,
            rng_states={name: rng_state(gen) for name, gen in self.rngs.items()})

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint,
                        teacher_cache: FeatureCache | None = None) -> "TrainState":
        cfg = ckpt.config
        generator, discriminator, student, embedding = build_networks(cfg)
        augmenter = None
        if "augmenter" in ckpt.networks:
            augmenter = build_generator(cfg)
            arrays_to_module(augmenter, ckpt.networks["augmenter"])
            augmenter.requires_grad_(False)
        state = cls(cfg, ckpt.phase, generator, discriminator, student,
                    embedding, teacher_arrays=ckpt.networks.get("extractor_high"),
                    augmenter=augmenter, teacher_cache=teacher_cache)
        for name, mod in state._trainables().items():
            arrays_to_module(mod, ckpt.networks[name])
        arrays_to_optimizer(state.opt_g, generator,
                            ckpt.optimizers.get("generator", {}))
        arrays_to_optimizer(state.opt_d, discriminator,
                            ckpt.optimizers.get("discriminator", {}))
        arrays_to_optimizer(state.opt_p, embedding,
                            ckpt.optimizers.get("embedding", {}))
        if state.opt_f is not None:
            arrays_to_optimizer(state.opt_f, student,
                                ckpt.optimizers.get("extractor_low", {}))
        state.iteration = ckpt.iteration
        for name in RNG_STREAMS:
            if name in ckpt.rng_states:
                state.rngs[name] = restore_rng(ckpt.rng_states[name])
        return state


def build_networks(cfg: Config):
    """Construct all trainable networks under a config-derived torch seed so
    initialization is reproducible regardless of call site."""
    torch.manual_seed(derive_int_seed(cfg.seed, "init"))
    generator = build_generator(cfg)
    discriminator = build_discriminator(cfg)
    student = build_student(cfg)
    embedding = build_embedding(cfg)
    return generator, discriminator, student, embedding


def init_train_state(cfg: Config, phase: str,
                     student_arrays: dict[str, np.ndarray] | None = None,
                     teacher_arrays: dict[str, np.ndarray] | None = None,
                     base_checkpoint: Checkpoint | None = None,
                     augmenter: Generator | None = None,
                     teacher_cache: FeatureCache | None = None) -> TrainState:
    """Fresh state for a phase: base starts from the distilled student;
    novel continues from a base-phase checkpoint."""
    if phase == "novel":
        if base_checkpoint is None:
            raise ConfigError("novel phase requires a base-phase checkpoint")
        if base_checkpoint.phase != "base":
            raise CheckpointError(
                f"expected a base-phase checkpoint, got {base_checkpoint.phase!r}")
    generator, discriminator, student, embedding = build_networks(cfg)
    state = TrainState(cfg, phase, generator, discriminator, student, embedding,
                       teacher_arrays=teacher_arrays, augmenter=augmenter,
                       teacher_cache=teacher_cache)
    if base_checkpoint is not None:
        for name, mod in state._trainables().items():
            arrays_to_module(mod, base_checkpoint.networks[name])
        if teacher_arrays is None:
            state.teacher_arrays = base_checkpoint.networks.get("extractor_high")
    elif student_arrays is not None:
        arrays_to_module(student, student_arrays)
    return state


def build_augmenter_for_aug_mode(ckpt: Checkpoint, cfg: Config) -> Generator:
    """Wrap the generator of a completed view_only run with frozen weights."""
    if ckpt.config.ablation_mode != "view_only":
        raise CheckpointError(
            f"augmenter checkpoint must come from a view_only run, got mode "
            f"{ckpt.config.ablation_mode!r}")
    if ckpt.phase not in ("base", "novel"):
        raise CheckpointError(
            f"augmenter checkpoint has phase {ckpt.phase!r}, expected base or novel")
    gen = build_generator(cfg)
    arrays_to_module(gen, ckpt.networks["generator"])
    gen.requires_grad_(False)
    return gen


# ---------------------------------------------------------------------------
# One training iteration
# ---------------------------------------------------------------------------

def _mode_flags(mode: str) -> tuple[bool, bool, bool]:
    """(synthesizes augmented views, trains the GAN, trains recognition)."""
    return (mode in ("full", "view_only", "aug_only"),
            mode in ("full", "view_only"),
            mode in ("full", "rec_only", "aug_only"))


def _chunks(total: int, size: int):
    for lo in range(0, total, size):
        yield lo, min(lo + size, total)


def train_step(state: TrainState, episode: Episode, probe=None) -> LossRecord:
    """One iteration of the episodic loop.

    Order: (1) condition + synthesize views per support image, (2) adversarial
    and identity updates, (3) prototypes over real + generated support,
    (4) recognition update on real queries, (5) categorical feedback into the
    generator, (6) optional distillation update of the extractor.
    `probe(stage)` fires after each sub-update for instrumentation.
    """
    cfg = state.cfg
    synthesizes, trains_gan, trains_rec = _mode_flags(cfg.ablation_mode)
    probe = probe or (lambda stage: None)
    losses = dict.fromkeys(LOSS_TERMS, 0.0)

    support = torch.from_numpy(episode.support_images)
    query = torch.from_numpy(episode.query_images)

    fake_images = None
    z = thetas = gen_labels = None
    if synthesizes:
        with torch.no_grad():
            f_support = state.student(support)
        f_rep = f_support.repeat_interleave(cfg.m_views, dim=0)
        gen_labels = np.repeat(episode.support_labels, cfg.m_views)
        noise = draw_noise(state.rngs["noise"], len(f_rep), cfg.noise_dim)
        z = make_latent(f_rep, noise)
        thetas = torch.stack([
            sample_pose(state.pose_ranges, state.rngs["views"]).as_tensor()
            for _ in range(len(z))])

    # (2) adversarial + identity updates, batched up to gan_batch per update
    if trains_gan:
        real_rep = support.repeat_interleave(cfg.m_views, dim=0)
        total = len(z)
        d_sum = g_sum = id_sum = 0.0
        fake_parts = []
        for lo, hi in _chunks(total, cfg.gan_batch):
            w = (hi - lo) / total
            z_c, th_c, real_c = z[lo:hi], thetas[lo:hi], real_rep[lo:hi]
            fake_c = state.generator(z_c, th_c)

            state.zero_all_grads()
            out_fake = state.discriminator(fake_c.detach())
            out_real = state.discriminator(real_c)
            loss_d, _ = gan_loss_terms(out_real.logits, out_fake.logits)
            id_d = identity_loss(z_c, th_c, out_fake.z_prime, out_fake.theta_prime)
            (loss_d + cfg.lambda_id * id_d).backward()
            state.opt_d.step()
            probe("d_step")

            state.zero_all_grads()
            out_fake2 = state.discriminator(fake_c)
            loss_g = torch.nn.functional.softplus(-out_fake2.logits).mean()
            g_loss = loss_g
            if not cfg.identity_updates_d_only:
                id_g = identity_loss(z_c, th_c, out_fake2.z_prime,
                                     out_fake2.theta_prime)
                g_loss = g_loss + cfg.lambda_id * id_g
            g_loss.backward()
            state.opt_g.step()
            probe("g_step")

            d_sum += float(loss_d.detach()) * w
            g_sum += float(loss_g.detach()) * w
            id_sum += float(id_d.detach()) * w
            fake_parts.append(fake_c.detach())
        losses["gan"] = d_sum + g_sum
        losses["identity"] = id_sum
        fake_images = torch.cat(fake_parts)
    elif synthesizes:  # aug_only: frozen augmenter, no adversarial updates
        parts = []
        with torch.no_grad():
            for lo, hi in _chunks(len(z), cfg.gan_batch):
                parts.append(state.augmenter(z[lo:hi], thetas[lo:hi]))
        fake_images = torch.cat(parts)

    # (3) prototypes over S_whole = S_support (+ generated members, detached)
    protos = None
    if trains_rec:
        grad_f = cfg.joint_feature_update
        sup_feats = state.student(support) if grad_f else _frozen_features(
            state.student, support)
        embs = [state.embedding(sup_feats)]
        labels = [episode.support_labels]
        if fake_images is not None:
            gen_feats = (state.student(fake_images) if grad_f
                         else _frozen_features(state.student, fake_images))
            embs.append(state.embedding(gen_feats))
            labels.append(gen_labels)
        all_embs = torch.cat(embs)
        all_labels = np.concatenate(labels)
        protos = compute_prototypes(all_embs, all_labels,
                                    categories=episode.categories)
        state.last_info = {"s_whole": len(all_labels)}

        # (4) recognition update from real queries
        q_feats = state.student(query) if grad_f else _frozen_features(
            state.student, query)
        loss_rec = rec_loss(state.embedding(q_feats), episode.query_labels, protos)
        _assert_finite(loss_rec, "rec", state.iteration)
        state.zero_all_grads()
        loss_rec.backward()
        state.opt_p.step()
        if state.opt_f is not None:
            state.opt_f.step()
        probe("rec_step")
        losses["rec"] = float(loss_rec.detach())
        protos = protos.detached()
    else:
        state.last_info = {"s_whole": 0}

    # (5) categorical feedback: generator chases the recognizer's judgment
    if cfg.ablation_mode == "full":
        update = cfg.lambda_cat > 0
        state.zero_all_grads()
        cat_total = 0.0
        with torch.enable_grad() if update else torch.no_grad():
            for lo, hi in _chunks(len(z), cfg.gan_batch):
                w = (hi - lo) / len(z)
                regen = state.generator(z[lo:hi], thetas[lo:hi])
                emb = state.embedding(state.student(regen))
                loss_cat = categorical_loss(emb, gen_labels[lo:hi], protos)
                if update:
                    (cfg.lambda_cat * loss_cat * w).backward()
                cat_total += float(loss_cat.detach()) * w
        if update:
            state.opt_g.step()
        probe("cat_step")
        losses["cat"] = cat_total

    # (6) optional distillation refresh of the extractor
    if trains_rec and cfg.joint_feature_update:
        ids = episode.support_ids + episode.query_ids
        targets = state.teacher_cache.lookup(ids)
        feats = state.student(torch.cat([support, query]))
        loss_feat = distillation_loss(feats, targets)
        _assert_finite(loss_feat, "feature", state.iteration)
        state.zero_all_grads()
        loss_feat.backward()
        state.opt_f.step()
        probe("feature_step")
        losses["feature"] = float(loss_feat.detach())

    total = (losses["gan"] + losses["rec"] + losses["feature"]
             + cfg.lambda_id * losses["identity"]
             + cfg.lambda_cat * losses["cat"])
    for term, value in losses.items():
        _assert_finite(value, term, state.iteration)
    record = LossRecord(iteration=state.iteration, total=total, **losses)
    state.iteration += 1
    state.trace.append(record)
    return record


def _frozen_features(student, images):
    with torch.no_grad():
        return student(images)


def _assert_finite(value, term: str, iteration: int):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise NumericError(f"loss term {term!r} non-finite at iteration {iteration}")


# ---------------------------------------------------------------------------
# Phase runner
# ---------------------------------------------------------------------------

def _trim_trace(path: Path, iteration: int):
    """Keep only rows below `iteration` (resume may rewind past crashed rows)."""
    if not path.exists():
        path.write_text(TRACE_HEADER + "\n")
        return
    lines = path.read_text().splitlines()
    kept = [lines[0]] + [ln for ln in lines[1:]
                         if ln and int(ln.split("\t", 1)[0]) < iteration]
    path.write_text("\n".join(kept) + "\n")


def run_phase(state: TrainState, dataset: Dataset, split: SplitSpec,
              iterations: int, run_dir=None) -> TrainState:
    """Run train_step with fresh episodes until `iterations` are done.

    Writes an append-only losses.tsv and periodic checkpoints when run_dir
    is given; honors state.iteration so a resumed state continues in place.
    """
    cfg = state.cfg
    n = cfg.n_support_base if state.phase == "base" else cfg.n_support_novel
    trace_path = ckpt_root = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        trace_path = run_dir / "losses.tsv"
        _trim_trace(trace_path, state.iteration)
        ckpt_root = run_dir / "checkpoints"

    trace_file = open(trace_path, "a") if trace_path else None
    try:
        while state.iteration < iterations:
            episode = sample_episode(dataset, split, state.phase, n,
                                     cfg.n_query, state.rngs["episode"])
            record = train_step(state, episode)
            if trace_file:
                trace_file.write(record.row() + "\n")
                trace_file.flush()
            if (ckpt_root and cfg.checkpoint_interval
                    and state.iteration % cfg.checkpoint_interval == 0
                    and state.iteration < iterations):
                save_checkpoint(state.to_checkpoint(),
                                ckpt_root / f"iter_{state.iteration:06d}")
    finally:
        if trace_file:
            trace_file.close()
    if ckpt_root:
        save_checkpoint(state.to_checkpoint(), ckpt_root / "final")
    return state


def read_trace(path) -> list[LossRecord]:
    lines = Path(path).read_text().splitlines()
    return [LossRecord.from_row(ln) for ln in lines[1:] if ln]
