import pytest
import torch

from rfedit.errors import ControllerShapeError, ShapeMismatchError
from rfedit.flow import fm_loss
from rfedit.model import (AttentionController, ModelConfig, ToyMMDiT,
                          VisualOverride, attention_probabilities, load_checkpoint,
                          patchify, save_checkpoint, unpatchify)
from rfedit.text import DEFAULT_VOCAB, tokenize

from conftest import TINY_CONFIG


class ProbeAll(AttentionController):
    """Records every site and (optionally) attention probabilities."""

    def __init__(self, keep_probs=False):
        self.sites = []
        self.probs = []
        self.accessors = []
        self.keep_probs = keep_probs

    def on_attention(self, site, q_text, k_text, v_text, q_vis, k_vis, v_vis, attn_probs):
        self.sites.append(site)
        self.accessors.append(attn_probs)
        if self.keep_probs:
            self.probs.append(attn_probs())
        return None


# --- tokenize ----------------------------------------------------------------

def test_tokenize_pads_to_length():
    toks = tokenize("a red circle", max_tokens=8)
    assert len(toks) == 8
    assert toks.pad_mask.tolist() == [True] * 3 + [False] * 5
    assert toks.ids[3:].eq(DEFAULT_VOCAB.pad_id).all()


def test_tokenize_rejects_empty():
    with pytest.raises(ValueError):
        tokenize("   ")


def test_tokenize_case_folds():
    assert tokenize("a RED circle") == tokenize("a red circle")


def test_tokenize_unknown_maps_to_unk():
    toks = tokenize("a zebra circle")
    assert toks.ids[1].item() == DEFAULT_VOCAB.unk_id


# --- patchify ----------------------------------------------------------------

def test_patchify_token_count():
    x = torch.randn(3, 32, 32)
    assert patchify(x, 4).shape == (64, 48)


def test_patchify_round_trip_exact():
    x = torch.randn(3, 32, 32)
    tokens = patchify(x, 4)
    assert torch.equal(unpatchify(tokens, 4, 3, 32, 32), x)


def test_patchify_rejects_indivisible():
    with pytest.raises(ShapeMismatchError):
        patchify(torch.randn(3, 30, 30), 4)


# --- forward -----------------------------------------------------------------

def test_forward_output_shape(tiny_model):
    z = torch.randn(3, 16, 16)
    ids = tokenize("a red circle", max_tokens=6)
    assert tiny_model(z, 0.5, ids).shape == z.shape


def test_forward_deterministic(tiny_model):
    z = torch.randn(3, 16, 16)
    ids = tokenize("a blue square", max_tokens=6)
    out1 = tiny_model(z, 0.3, ids)
    out2 = tiny_model(z, 0.3, ids)
    assert torch.equal(out1, out2)


def test_hook_transparency_bitwise(tiny_model):
    z = torch.randn(3, 16, 16)
    ids = tokenize("a green triangle", max_tokens=6)
    plain = tiny_model(z, 0.7, ids)
    probed = tiny_model(z, 0.7, ids, controller=ProbeAll(keep_probs=True))
    assert torch.equal(plain, probed)


def test_controller_sees_every_site_in_order(tiny_model):
    probe = ProbeAll()
    tiny_model(torch.randn(3, 16, 16), 0.2, tokenize("a red circle", max_tokens=6),
               controller=probe)
    kinds = [(s.block_kind, s.layer_index) for s in probe.sites]
    assert kinds == [("double", 0), ("double", 1), ("single", 0), ("single", 1)]


def test_controller_shape_error_names_site(tiny_model):
    class Bad(AttentionController):
        def on_attention(self, site, *args):
            return VisualOverride(v=torch.zeros(1, 2, 3))

    with pytest.raises(ControllerShapeError, match="double block 0"):
        tiny_model(torch.randn(3, 16, 16), 0.2, tokenize("a red circle", max_tokens=6),
                   controller=Bad())


def test_parameter_count_default_below_10m():
    model = ToyMMDiT.create(ModelConfig(), seed=0)
    assert model.parameter_count() < 10_000_000


# --- attention probabilities --------------------------------------------------

def test_attention_rows_sum_to_one(tiny_model):
    probe = ProbeAll(keep_probs=True)
    tiny_model(torch.randn(3, 16, 16), 0.4, tokenize("a red circle", max_tokens=6),
               controller=probe)
    n_tokens = 6 + 16  # text + visual
    for site, probs in zip(probe.sites, probe.probs):
        assert probs.shape == (site.num_heads, n_tokens, n_tokens)
        assert torch.allclose(probs.sum(dim=-1), torch.ones(site.num_heads, n_tokens),
                              atol=1e-5)
        assert (probs >= 0).all()


def test_attention_accessor_dies_after_pass(tiny_model):
    probe = ProbeAll()
    tiny_model(torch.randn(3, 16, 16), 0.4, tokenize("a red circle", max_tokens=6),
               controller=probe)
    with pytest.raises(RuntimeError, match="outside a live forward pass"):
        probe.accessors[0]()


def test_single_key_degenerate_softmax():
    q = torch.randn(2, 5, 8)
    k = torch.randn(2, 1, 8)
    probs = attention_probabilities(q, k)
    assert torch.allclose(probs, torch.ones(2, 5, 1))


# --- gradient check -----------------------------------------------------------

def test_gradient_check_finite_differences():
    torch.manual_seed(3)
    model = ToyMMDiT.create(TINY_CONFIG, seed=3).double()
    model.train()
    z0 = torch.randn(3, 16, 16, dtype=torch.float64)
    z1 = torch.randn(3, 16, 16, dtype=torch.float64)
    ids = tokenize("a red circle on the left", max_tokens=6)
    t = 0.37

    loss = fm_loss(model, z0, z1, t, ids)
    model.zero_grad()
    loss.backward()

    params = [p for p in model.parameters() if p.grad is not None]
    total = sum(p.numel() for p in params)
    n_samples = max(1, total // 100)  # 1% of parameters
    gen = torch.Generator().manual_seed(7)
    flat_idx = torch.randperm(total, generator=gen)[:n_samples]

    h = 1e-4
    analytic, numeric = [], []
    offsets = torch.cumsum(torch.tensor([0] + [p.numel() for p in params]), 0)
    with torch.no_grad():
        for gidx in flat_idx.tolist():
            pi = int(torch.searchsorted(offsets, gidx, right=True)) - 1
            local = gidx - int(offsets[pi])
            p = params[pi]
            orig = p.reshape(-1)[local].item()
            p.reshape(-1)[local] = orig + h
            up = fm_loss(model, z0, z1, t, ids).item()
            p.reshape(-1)[local] = orig - h
            down = fm_loss(model, z0, z1, t, ids).item()
            p.reshape(-1)[local] = orig
            numeric.append((up - down) / (2 * h))
            analytic.append(p.grad.reshape(-1)[local].item())

    an = torch.tensor(analytic)
    nu = torch.tensor(numeric)
    rel = (an - nu).norm() / nu.norm()
    assert rel < 1e-3, f"gradient relative error {rel:.2e} over {n_samples} parameters"


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, tiny_model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model, path, {"seed": 0, "training_steps": 0, "dataset_hash": "-"})
    loaded, manifest = load_checkpoint(path)
    assert manifest["seed"] == "0"
    z = torch.randn(3, 16, 16)
    ids = tokenize("a red circle", max_tokens=6)
    assert torch.equal(tiny_model(z, 0.5, ids), loaded(z, 0.5, ids))


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint")
    from rfedit.errors import CheckpointError
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
