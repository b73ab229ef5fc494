import numpy as np
import pytest
import torch

from fbnet.core import Config, seeded_rng
from fbnet.data import ToySpec, generate_toy_dataset, ingest, parse_manifest

torch.set_num_threads(2)


def tiny_config(**overrides) -> Config:
    """16x16 working resolution and small widths: fast enough for unit tests."""
    base = dict(image_resolution=16, teacher_scale=4, feature_dim=32,
                noise_dim=8, embed_hidden=16, embed_out=16,
                gen_base_channels=16, disc_base_channels=8,
                feat_base_channels=8, pretrain_epochs=2, distill_iters=5,
                iters_base=3, iters_novel=2, n_support_base=2, n_query=1,
                gan_batch=16, seed=5, lr=1e-3)
    base.update(overrides)
    return Config(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def micro_toy_dir(tmp_path_factory):
    """4 base + 2 novel categories, 8 images each, 64px native."""
    out = tmp_path_factory.mktemp("micro_toy")
    spec = ToySpec(n_base=4, n_novel=2, images_per_category=8, resolution=64)
    generate_toy_dataset(spec, seeded_rng(5, "toy"), out_dir=out)
    return out


@pytest.fixture(scope="session")
def micro_dataset(micro_toy_dir):
    return ingest(parse_manifest(micro_toy_dir), 16)


def rand_embeddings(rng: np.random.Generator, n: int, dim: int) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal((n, dim)).astype(np.float32))
