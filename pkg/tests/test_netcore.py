import pytest
import torch

from streetcompat.netcore import (CheckpointError, ModelConfig, embed_patches, forward_discriminator,
                                  forward_embedding, forward_generator, init_model, load_checkpoint,
                                  parameter_count, save_checkpoint)
from gradcheck import fd_relative_error


def test_generator_shape():
    state = init_model(ModelConfig(feature_dim=128), seed=0)
    x = torch.rand(32, 3, 32, 32)
    assert forward_generator(state, x).shape == (32, 128)


def test_generator_identical_rows():
    state = init_model(ModelConfig(), seed=0).eval()
    x = torch.rand(1, 3, 32, 32).repeat(4, 1, 1, 1)
    f = forward_generator(state, x)
    assert torch.equal(f[0], f[3])
    assert torch.equal(forward_generator(state, x), f)


def test_generator_rejects_bad_shape():
    state = init_model(ModelConfig(), seed=0)
    with pytest.raises(ValueError):
        forward_generator(state, torch.rand(2, 3, 16, 16))
    with pytest.raises(ValueError):
        forward_generator(state, torch.rand(0, 3, 32, 32))
    with pytest.raises(ValueError):
        forward_embedding(state, torch.rand(2, 7))
    with pytest.raises(ValueError):
        forward_discriminator(state, torch.rand(2, 7))


def test_embedding_shape_and_zero_input():
    state = init_model(ModelConfig(feature_dim=48), seed=1)
    assert forward_embedding(state, torch.rand(5, 48)).shape == (5, 64)
    # zero features and zero biases give exactly zero embeddings
    assert torch.equal(forward_embedding(state, torch.zeros(3, 48)), torch.zeros(3, 64))


def test_discriminator_codomain():
    state = init_model(ModelConfig(), seed=2)
    out = forward_discriminator(state, 3 * torch.randn(256, 64))
    assert out.shape == (256, 1)
    assert torch.all(out > 0) and torch.all(out < 1)


def test_discriminator_zero_weights():
    state = init_model(ModelConfig(), seed=2)
    with torch.no_grad():
        for p in state.discriminator.parameters():
            p.zero_()
    assert torch.equal(forward_discriminator(state, torch.randn(7, 64)), torch.full((7, 1), 0.5))


def test_discriminator_row_wise():
    state = init_model(ModelConfig(), seed=4)
    f = torch.randn(10, 64)
    perm = torch.randperm(10)
    assert torch.allclose(forward_discriminator(state, f)[perm], forward_discriminator(state, f[perm]))


def test_init_deterministic():
    a, b, c = (init_model(ModelConfig(), seed=s) for s in (5, 5, 6))
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != c.fingerprint()


def test_tiny_cnn_parameter_count():
    cfg = ModelConfig(feature_dim=128)
    state = init_model(cfg, seed=0)
    conv = (3 * 9 + 1) * 16 + (16 * 9 + 1) * 32 + (32 * 9 + 1) * 128
    assert parameter_count(state.generator) == conv
    assert conv < 5e5


def test_embed_patches_is_composition():
    state = init_model(ModelConfig(), seed=0)
    x = torch.rand(4, 3, 32, 32)
    assert torch.equal(embed_patches(state, x), forward_embedding(state, forward_generator(state, x)))


@pytest.mark.parametrize("which", ["generator", "embedder", "discriminator"])
def test_forward_gradients(tiny_state, which):
    state = tiny_state.to(torch.float64)
    r = state.config.input_resolution
    x = torch.rand(6, 3, r, r, dtype=torch.float64)
    feats = forward_generator(state, x).detach()
    fn = {
        "generator": lambda: forward_generator(state, x).mean(),
        "embedder": lambda: forward_embedding(state, feats).mean(),
        "discriminator": lambda: forward_discriminator(state, feats).mean(),
    }[which]
    params = list(getattr(state, which).parameters())
    assert fd_relative_error(fn, params) < 1e-4


def test_checkpoint_round_trip(tmp_path):
    state = init_model(ModelConfig(feature_dim=32), seed=9)
    state.step = 17
    save_checkpoint(tmp_path / "c.pt", state, rng_state={"seed": 1, "step": 17})
    loaded, opts, rng = load_checkpoint(tmp_path / "c.pt")
    assert loaded.step == 17 and rng == {"seed": 1, "step": 17}
    assert loaded.config == state.config
    assert loaded.fingerprint() == state.fingerprint()


def test_checkpoint_version_mismatch(tmp_path):
    state = init_model(ModelConfig(), seed=0)
    save_checkpoint(tmp_path / "c.pt", state)
    payload = torch.load(tmp_path / "c.pt", weights_only=True)
    payload["format_version"] = 99
    torch.save(payload, tmp_path / "c.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.pt")


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(feature_dim=0)
    with pytest.raises(ValueError):
        ModelConfig(backbone="vgg")
