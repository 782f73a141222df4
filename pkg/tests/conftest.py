import sys
from pathlib import Path

import pytest
import torch

from rfedit.data import generate_dataset
from rfedit.model import ModelConfig, ToyMMDiT, load_checkpoint, save_checkpoint
from rfedit.train import TrainConfig, train_toy

REPO_ROOT = Path(__file__).resolve().parents[1]
SHIPPED_CHECKPOINT = REPO_ROOT / "checkpoints" / "toy-default.ckpt"

# Small-but-real architecture for mechanical tests: same block structure as
# the default, cheap enough for gradient checks and per-test forward passes.
TINY_CONFIG = ModelConfig(
    image_size=16, patch_size=4, channels=3, hidden_dim=32, num_heads=2,
    num_double_blocks=2, num_single_blocks=2, vocab_size=64, max_text_tokens=6,
    time_embed_dim=32)

# Matches the 32x32 dataset geometry; used by training smoke tests.
SMALL32_CONFIG = ModelConfig(
    image_size=32, patch_size=4, channels=3, hidden_dim=48, num_heads=2,
    num_double_blocks=2, num_single_blocks=2, vocab_size=64, max_text_tokens=8,
    time_embed_dim=48)


@pytest.fixture(scope="session")
def tiny_model():
    model = ToyMMDiT.create(TINY_CONFIG, seed=0)
    model.eval()
    return model


@pytest.fixture(scope="session")
def shipped_model():
    """The trained default-scale checkpoint; trained on the spot if absent."""
    if not SHIPPED_CHECKPOINT.exists():
        SHIPPED_CHECKPOINT.parent.mkdir(parents=True, exist_ok=True)
        dataset = generate_dataset(2048, seed=7)
        model, _, manifest = train_toy(ModelConfig(), dataset, TrainConfig(),
                                       log=lambda msg: print(msg, file=sys.stderr))
        manifest["data_seed"] = 7
        save_checkpoint(model, SHIPPED_CHECKPOINT, manifest)
    model, _ = load_checkpoint(SHIPPED_CHECKPOINT)
    model.eval()
    return model


@pytest.fixture()
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "tiny.ckpt"
    save_checkpoint(tiny_model, path, {"seed": 0, "training_steps": 0, "dataset_hash": "-"})
    return path


@pytest.fixture(scope="session")
def small32_checkpoint(tmp_path_factory):
    """Briefly-trained 32x32 model for CLI/experiment mechanics."""
    from rfedit.train import TrainConfig, train_toy
    dataset = generate_dataset(32, seed=7)
    model, _, manifest = train_toy(SMALL32_CONFIG, dataset,
                                   TrainConfig(steps=40, batch_size=16, lr=3e-3))
    path = tmp_path_factory.mktemp("ckpt32") / "small32.ckpt"
    save_checkpoint(model, path, manifest)
    return path
