import io

import numpy as np
import pytest
import torch

from helpers import directional_check, random_roll, rel_err
from pianodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from pianodiff.denoiser import (
    Denoiser,
    DenoiserConfig,
    PitchwiseBiLSTM,
    denoise,
    embed_states,
    encode_lead_sheet,
    param_groups,
)
from pianodiff.diffusion import DiffusionConfig, ScheduleTensors, vlb_loss
from pianodiff.roll import OFF, ONSET, PianoRoll, transpose

SMALL = DenoiserConfig(n_layers=2, dilations=(1, 2), hidden_dim=8, timestep_embed_dim=8, n_heads=2, steps=10)


def small_model(seed=0, dtype=torch.float64, live_ada=True):
    torch.manual_seed(seed)
    model = Denoiser(SMALL).to(dtype)
    if live_ada:
        # zero-initialized adaptive norms would hide the timestep path
        with torch.no_grad():
            for blk in model.decoder.blocks:
                blk.ada[-1].weight.normal_(0, 0.3)
                blk.ada[-1].bias.normal_(0, 0.1)
    return model


def hand_param_count(cfg: DenoiserConfig) -> int:
    e, h, td, m = cfg.state_embed_dim, cfg.hidden_dim, cfg.timestep_embed_dim, cfg.ffn_mult
    half = h // 2

    def lstm(inp):
        return 2 * (4 * half * (inp + half) + 2 * 4 * half)

    def block(adaptive):
        attn = (h * 3 * h + 3 * h) + cfg.n_heads * (2 * cfg.window - 1) ** 2 + (h * h + h)
        ffn = (h * m * h + m * h) + (m * h * h + h)
        norms = (td * td + td + td * 4 * h + 4 * h) if adaptive else 4 * h
        return attn + ffn + norms

    enc = lstm(e) + 88 * h + cfg.enc_layers * block(False) + h * h + h
    dec = (e + h) * h + h + 88 * h + lstm(h) + cfg.n_layers * block(True) + 2 * h + 3 * h + 3
    return 4 * e + enc + dec


@pytest.mark.parametrize("cfg", [SMALL, DenoiserConfig(), DenoiserConfig.full_scale()], ids=["small", "desk", "full"])
def test_param_count_formula(cfg):
    assert Denoiser(cfg).param_count() == hand_param_count(cfg)
    assert Denoiser(cfg).param_count() == Denoiser(cfg).param_count()


@pytest.mark.parametrize(
    "kwargs",
    [dict(window=4), dict(dilations=(1, 2, 4)), dict(hidden_dim=0), dict(dilations=(0, 1, 2, 4)), dict(hidden_dim=30, n_heads=4)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DenoiserConfig(**kwargs)


def test_embedding_all_off_rows_identical():
    model = small_model()
    emb = embed_states(PianoRoll.empty(5), model)
    assert emb.shape == (5, 88, SMALL.state_embed_dim)
    assert (emb == model.embedding.weight[OFF].detach().numpy()).all()


def test_embedding_permutes_with_cells():
    model = small_model()
    cells = np.full((2, 88), OFF, dtype=np.uint8)
    cells[0, 3] = ONSET
    swapped = cells.copy()
    swapped[0, 3], swapped[1, 7] = OFF, ONSET
    a = embed_states(PianoRoll(cells), model)
    b = embed_states(PianoRoll(swapped), model)
    assert (a[0, 3] == b[1, 7]).all() and (a[1, 7] == b[0, 3]).all()


def test_embedding_gradient():
    model = small_model()
    states = torch.as_tensor(np.random.default_rng(0).integers(0, 4, (1, 3, 88)))
    w = torch.randn(1, 3, 88, SMALL.state_embed_dim, dtype=torch.float64)
    a, n = directional_check(lambda: (model.embed(states) ** 2 * w).sum(), [model.embedding.weight])
    assert rel_err(a, n) < 1e-4


def test_bilstm_shares_weights_across_pitches():
    torch.manual_seed(0)
    rnn = PitchwiseBiLSTM(3, 6).double()
    x = torch.randn(1, 6, 3, 3, dtype=torch.float64)
    x[:, :, 2] = x[:, :, 0]
    with torch.no_grad():
        out = rnn(x)
    assert torch.equal(out[:, :, 0], out[:, :, 2])


def test_bilstm_time_reversal_symmetry():
    # a copy with the direction weights exchanged, run on reversed time, mirrors the original
    torch.manual_seed(1)
    rnn = PitchwiseBiLSTM(3, 6).double()
    mirrored = PitchwiseBiLSTM(3, 6).double()
    with torch.no_grad():
        params = dict(rnn.lstm.named_parameters())
        for name, p in mirrored.lstm.named_parameters():
            other = name[: -len("_reverse")] if name.endswith("_reverse") else name + "_reverse"
            p.copy_(params[other])
        x = torch.randn(1, 6, 3, 3, dtype=torch.float64)
        out = rnn(x)
        rev = mirrored(x.flip(1)).flip(1)
    assert torch.allclose(out, torch.cat([rev[..., 3:], rev[..., :3]], -1), atol=1e-12)


def test_bilstm_gradient():
    torch.manual_seed(0)
    rnn = PitchwiseBiLSTM(3, 6).double()
    x = torch.randn(1, 6, 3, 3, dtype=torch.float64)
    w = torch.randn(1, 6, 3, 6, dtype=torch.float64)
    a, n = directional_check(lambda: (rnn(x) * w).sum(), list(rnn.parameters()))
    assert rel_err(a, n) < 1e-4


def test_encoder_contract():
    model = small_model()
    rng = np.random.default_rng(0)
    x = random_roll(rng, 16, 0.05)
    a, b = encode_lead_sheet(x, model), encode_lead_sheet(PianoRoll(x.cells.copy()), model)
    assert torch.equal(a, b)
    for n in (1, 5, 16):
        assert encode_lead_sheet(PianoRoll.empty(n), model).shape == (1, n, 88, SMALL.hidden_dim)
    up, _ = transpose(x, 3)
    assert not torch.equal(encode_lead_sheet(up, model), a)


def test_denoise_is_a_distribution_and_uses_tau():
    model = small_model()
    rng = np.random.default_rng(1)
    x = random_roll(rng, 8, 0.05)
    y = PianoRoll(rng.integers(0, 4, (8, 88)).astype(np.uint8), validate=False)
    enc = encode_lead_sheet(x, model)
    p3 = denoise(y, enc, 3, model)
    assert p3.shape == (8, 88, 3)
    assert np.abs(p3.sum(-1) - 1).max() < 1e-6
    assert not np.array_equal(p3, denoise(y, enc, 7, model))


def test_shared_embedding_feeds_both_halves():
    model = small_model()
    x, y = PianoRoll.empty(4), PianoRoll.empty(4)
    enc0 = encode_lead_sheet(x, model)
    d0 = denoise(y, enc0, 2, model)
    with torch.no_grad():
        model.embedding.weight[OFF] += 0.5
    enc1 = encode_lead_sheet(x, model)
    assert not torch.equal(enc0, enc1)
    # hold the encoding fixed so only the decoder's use of the table can move the output
    assert not np.array_equal(d0, denoise(y, enc0, 2, model))


def test_checkpoint_round_trip_is_byte_identical():
    model = small_model(dtype=torch.float32)
    first = save_checkpoint(io.BytesIO(), model, {"note": "x"})
    loaded, meta, extra = load_checkpoint(first)
    assert meta == {"note": "x"} and extra == {}
    assert save_checkpoint(io.BytesIO(), loaded, {"note": "x"}) == first
    rng = np.random.default_rng(2)
    x = random_roll(rng, 8, 0.05)
    y = PianoRoll(rng.integers(0, 4, (8, 88)).astype(np.uint8), validate=False)
    assert np.array_equal(
        denoise(y, encode_lead_sheet(x, model), 4, model), denoise(y, encode_lead_sheet(x, loaded), 4, loaded)
    )


def test_checkpoint_rejects_mismatched_config():
    data = save_checkpoint(io.BytesIO(), small_model(dtype=torch.float32))
    with pytest.raises(CheckpointError):
        load_checkpoint(data, DenoiserConfig())
    with pytest.raises(CheckpointError):
        load_checkpoint(b"garbage" + data)


def test_end_to_end_gradient_double():
    model = small_model()
    rng = np.random.default_rng(3)
    x = random_roll(rng, 8, 0.05).cells[None]
    y0 = random_roll(rng, 8, 0.05).cells[None]
    sched = DiffusionConfig(steps=SMALL.steps).schedule()
    mats = ScheduleTensors(sched, torch.float64)

    def loss():
        vlb, aux = vlb_loss(y0, x, 6, model, 11, sched, mats)
        return vlb + 0.1 * aux

    for group, named in param_groups(model).items():
        a, n = directional_check(loss, [p for _, p in named], eps=1e-6)
        assert rel_err(a, n) < 1e-5, group
