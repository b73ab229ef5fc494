import math

import numpy as np
import pytest

from fbnet.core import (CheckpointError, Checkpoint, Config, ConfigError,
                        load_checkpoint, load_config, read_config_file,
                        restore_rng, rng_state, save_checkpoint, seeded_rng,
                        write_config_file)

from conftest import tiny_config


# ---------------------------------------------------------------------------
# Config validation
# ---------------------------------------------------------------------------

def test_default_config_is_valid():
    cfg = Config()
    assert cfg.image_resolution == 64
    assert cfg.lr == pytest.approx(5e-5)
    assert cfg.lambda_id == 10.0 and cfg.lambda_cat == 1.0
    assert cfg.feature_dim == 1000
    assert cfg.iters_base == 1400 and cfg.iters_novel == 100
    assert cfg.n_support_base == 5 and cfg.n_support_novel == 1
    assert cfg.gan_batch == 64


@pytest.mark.parametrize("field,value", [
    ("image_resolution", 15),
    ("image_resolution", 48),  # not a power of two
    ("image_resolution", 8),   # below the upsample chain floor
    ("noise_dim", 0),
    ("feature_dim", -1),
    ("lambda_id", -0.5),
    ("lambda_cat", float("nan")),
    ("lr", 0.0),
    ("lr", -1e-5),
    ("n_support_base", 0),
    ("m_views", 0),
    ("gan_batch", 0),
    ("azimuth_range", (2.0, -2.0)),
    ("azimuth_range", (-4.0, 1.0)),
    ("elevation_range", (0.0, 9.9)),
    ("ablation_mode", "everything"),
    ("adam_beta1", 1.0),
    ("seed", "seven"),
    ("joint_feature_update", 1),
])
def test_out_of_domain_fields_rejected_by_name(field, value):
    with pytest.raises(ConfigError, match=field):
        tiny_config(**{field: value})


def test_unknown_config_key_rejected():
    with pytest.raises(ConfigError, match="not_a_field"):
        Config.from_dict({"not_a_field": 3})


def test_config_file_roundtrip(tmp_path):
    cfg = tiny_config(ablation_mode="view_only", lambda_cat=0.25,
                      azimuth_range=(-1.5, 1.5))
    path = tmp_path / "run.cfg"
    write_config_file(cfg, path)
    assert load_config(path) == cfg


def test_config_file_bare_strings_and_bools(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("ablation_mode = rec_only\njoint_feature_update = true\n"
                    "# comment line\nseed = 9\n")
    cfg = load_config(path)
    assert cfg.ablation_mode == "rec_only"
    assert cfg.joint_feature_update is True
    assert cfg.seed == 9


def test_cli_overrides_beat_file_and_env_beats_both(tmp_path, monkeypatch):
    path = tmp_path / "c.cfg"
    path.write_text("seed = 1\nlambda_cat = 0.5\n")
    cfg = load_config(path, overrides={"seed": 2})
    assert cfg.seed == 2 and cfg.lambda_cat == 0.5
    monkeypatch.setenv("FBNET_SEED", "33")
    cfg = load_config(path, overrides={"seed": 2})
    assert cfg.seed == 33
    monkeypatch.setenv("FBNET_SEED", "nope")
    with pytest.raises(ConfigError, match="seed"):
        load_config(path)


def test_read_config_file_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("just some words\n")
    with pytest.raises(ConfigError):
        read_config_file(path)


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

def test_same_seed_and_label_reproduces():
    a = seeded_rng(7, "noise").standard_normal(16)
    b = seeded_rng(7, "noise").standard_normal(16)
    assert np.array_equal(a, b)


def test_labels_give_distinct_streams():
    a = seeded_rng(7, "noise").standard_normal(16)
    b = seeded_rng(7, "views").standard_normal(16)
    assert not np.array_equal(a, b)


def test_streams_are_independent():
    noise = seeded_rng(7, "noise")
    views = seeded_rng(7, "views")
    views.standard_normal(1000)  # extra draws on one stream
    with_draws = noise.standard_normal(8)
    fresh = seeded_rng(7, "noise").standard_normal(8)
    assert np.array_equal(with_draws, fresh)


def test_rng_state_roundtrip():
    rng = seeded_rng(3, "x")
    rng.standard_normal(5)
    st = rng_state(rng)
    again = restore_rng(st)
    assert np.array_equal(rng.standard_normal(9), again.standard_normal(9))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def _sample_checkpoint() -> Checkpoint:
    rng = np.random.default_rng(0)
    nets = {
        "generator": {"conv.weight": rng.standard_normal((4, 3, 3)).astype(np.float32),
                      "conv.bias": rng.standard_normal(4).astype(np.float32)},
        "embedding": {"net.0.weight": rng.standard_normal((2, 8)).astype(np.float32),
                      "ids": np.arange(5, dtype=np.int64)},
    }
    opts = {"generator": {"conv.weight::step": np.asarray(3.0, dtype=np.float32),
                          "conv.weight::exp_avg":
                              rng.standard_normal((4, 3, 3)).astype(np.float32)}}
    return Checkpoint(networks=nets, optimizers=opts, iteration=7, phase="base",
                      config=tiny_config(), rng_states={"noise": rng_state(seeded_rng(1, "n"))})


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    ck = _sample_checkpoint()
    save_checkpoint(ck, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.iteration == 7 and back.phase == "base"
    assert back.config == ck.config
    for net, arrays in ck.networks.items():
        for key, arr in arrays.items():
            assert np.array_equal(back.networks[net][key], arr)
            assert back.networks[net][key].dtype == arr.dtype
    for net, arrays in ck.optimizers.items():
        for key, arr in arrays.items():
            assert np.array_equal(back.optimizers[net][key], arr)
    assert back.rng_states["noise"] == ck.rng_states["noise"]


def test_checkpoint_corruption_detected_and_named(tmp_path):
    ck = _sample_checkpoint()
    save_checkpoint(ck, tmp_path / "ck")
    blob = tmp_path / "ck" / "generator.npz"
    raw = bytearray(blob.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="generator.npz"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_empty_dir_errors(tmp_path):
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path)


def test_checkpoint_missing_blob_errors(tmp_path):
    ck = _sample_checkpoint()
    save_checkpoint(ck, tmp_path / "ck")
    (tmp_path / "ck" / "embedding.npz").unlink()
    with pytest.raises(CheckpointError, match="embedding.npz"):
        load_checkpoint(tmp_path / "ck")


def test_checkpoint_config_mismatch_warns_and_snapshot_wins(tmp_path, caplog):
    ck = _sample_checkpoint()
    save_checkpoint(ck, tmp_path / "ck")
    other = tiny_config(seed=99)
    with caplog.at_level("WARNING", logger="fbnet"):
        back = load_checkpoint(tmp_path / "ck", expected_config=other)
    assert "snapshot wins" in caplog.text
    assert back.config == ck.config


def test_checkpoint_rejects_unknown_phase():
    with pytest.raises(CheckpointError, match="phase"):
        Checkpoint(networks={}, phase="warmup")


def test_manifest_written_last(tmp_path):
    # a crash before the manifest leaves a detectably incomplete checkpoint
    ck = _sample_checkpoint()
    save_checkpoint(ck, tmp_path / "ck")
    (tmp_path / "ck" / "manifest.json").unlink()
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(tmp_path / "ck")
