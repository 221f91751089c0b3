import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from _oracles import grad_check
from tivdiff.errors import NumericalError, RejectedInput
from tivdiff.slots import (
    SlotAttention, SlotAutoencoder, SlotConfig, parameter_hash, pretrain_slot_autoencoder, reconstruction_mse,
)

TINY = SlotConfig(num_slots=3, slot_dim=16, mlp_hidden=32, cnn_channels=8, cnn_layers=2, cnn_kernel=3,
                  feature_stride=2, dec_channels=8)


def tiny_sa(k=3, seed=0):
    torch.manual_seed(seed)
    return SlotAttention(k, 16, 8, iters=3, mlp_hidden=32)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), k=st.integers(1, 6))
def test_attention_normalised_over_slots(seed, k):
    sa = tiny_sa(k, seed)
    inputs = torch.randn(2, 20, 8)
    slots, attn = sa(inputs, generator=torch.Generator().manual_seed(seed))
    assert slots.shape == (2, k, 16) and torch.isfinite(slots).all()
    assert attn.shape == (2, 20, k)
    assert torch.allclose(attn.sum(-1), torch.ones(2, 20), atol=1e-6)


def test_single_slot_takes_all_attention():
    sa = tiny_sa(1)
    _, attn = sa(torch.randn(3, 10, 8))
    assert torch.equal(attn, torch.ones_like(attn))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_step_permutation_equivariant(seed):
    sa = tiny_sa(4, seed).double()
    g = torch.Generator().manual_seed(seed)
    inputs = torch.randn(2, 12, 8, generator=g, dtype=torch.float64)
    slots = torch.randn(2, 4, 16, generator=g, dtype=torch.float64)
    perm = torch.randperm(4, generator=g)
    a = sa.step(slots, inputs)[:, perm]
    b = sa.step(slots[:, perm], inputs)
    assert torch.allclose(a, b, atol=1e-5)
    full_a, _ = sa(inputs, slots=slots)
    full_b, _ = sa(inputs, slots=slots[:, perm])
    assert torch.allclose(full_a[:, perm], full_b, atol=1e-5)


def test_nonfinite_slots_raise_with_iteration():
    sa = tiny_sa()
    with torch.no_grad():
        sa.mlp[2].bias.fill_(float("inf"))
    with pytest.raises(NumericalError, match="iteration 0"):
        sa(torch.randn(1, 5, 8))


def test_sigma_positive_and_init_shape():
    sa = tiny_sa()
    assert torch.all(sa.log_sigma.exp() > 0)
    s = sa.init_slots(4, torch.Generator().manual_seed(1))
    assert s.shape == (4, 3, 16)


def test_extraction_determinism():
    ae = SlotAutoencoder(TINY).eval()
    x = torch.rand(2, 1, 64, 64)
    assert torch.equal(ae.encoder(x), ae.encoder(x))
    a = ae.encoder(x, generator=torch.Generator().manual_seed(5), deterministic=False)
    b = ae.encoder(x, generator=torch.Generator().manual_seed(5), deterministic=False)
    assert torch.equal(a, b)
    # deterministic initial slots still differ from one another
    init = ae.encoder.slot_attention.init_slots(1, deterministic=True)
    assert not torch.allclose(init[0, 0], init[0, 1])
    with pytest.raises(RejectedInput):
        ae.encoder(torch.rand(1, 1, 32, 32))


def test_decoder_masks_partition_unity():
    ae = SlotAutoencoder(TINY).eval()
    slots = torch.randn(3, 3, 16)
    recon, masks, contents = ae.decoder(slots)
    assert recon.shape == (3, 1, 64, 64)
    assert masks.shape == (3, 3, 1, 64, 64)
    assert torch.allclose(masks.sum(1), torch.ones(3, 1, 64, 64), atol=1e-6)
    assert recon.min() >= 0 and recon.max() <= 1


def test_default_config_decoder_layers():
    cfg = SlotConfig()
    ae = SlotAutoencoder(cfg)
    convt = [m for m in ae.decoder.net if isinstance(m, torch.nn.ConvTranspose2d)]
    assert len(convt) == 4
    feats = ae.encoder.features(torch.rand(1, 1, 64, 64))
    assert feats.shape == (1, 64 * 64, 64)


def frames(n=32, seed=0):
    from tivdiff.data import synth_dataset
    s = synth_dataset("single", n, seed)
    return torch.from_numpy(np.stack([v.frames[0] for v in s])).permute(0, 3, 1, 2).contiguous()


def test_pretraining_reduces_loss_and_is_reproducible():
    x = frames()
    m1, l1 = pretrain_slot_autoencoder(x, 80, lr=3e-3, cfg=TINY, batch_size=8, seed=3)
    m2, l2 = pretrain_slot_autoencoder(x, 80, lr=3e-3, cfg=TINY, batch_size=8, seed=3)
    assert l1 == l2
    assert parameter_hash(m1) == parameter_hash(m2)
    # reconstruction quality itself is the acceptance suite's job; here only the direction
    untrained, _ = pretrain_slot_autoencoder(x, 0, cfg=TINY, seed=3)
    assert np.mean(l1[-10:]) < 0.95 * np.mean(l1[:10])
    assert reconstruction_mse(m1, x) < 0.95 * reconstruction_mse(untrained, x)


def test_frozen_checkpoint(tmp_path):
    from tivdiff.checkpoints import load_slots, save_slots
    x = frames(8)
    m, losses = pretrain_slot_autoencoder(x, 3, cfg=TINY, batch_size=4)
    save_slots(tmp_path / "s.pt", m, losses=losses)
    back, meta = load_slots(tmp_path / "s.pt")
    assert meta["frozen"] is True
    assert meta["encoder_hash"] == parameter_hash(back.encoder) == parameter_hash(m.encoder)
    assert not any(p.requires_grad for p in back.encoder.parameters())
    assert meta["loss_curve"] == pytest.approx(losses)


def test_kqv_gradients_match_fd():
    sa = tiny_sa(3).double()
    g = torch.Generator().manual_seed(0)
    inputs = torch.randn(1, 10, 8, generator=g, dtype=torch.float64)
    slots = torch.randn(1, 3, 16, generator=g, dtype=torch.float64)
    probe = torch.randn(1, 3, 16, generator=g, dtype=torch.float64)

    def loss():
        return (sa(inputs, slots=slots)[0] * probe).sum()

    rep = grad_check(loss, [("k", sa.k.weight), ("q", sa.q.weight), ("v", sa.v.weight)])
    assert all(ok for _, ok in rep.values()), rep
