import math

import numpy as np
import pytest
import torch

from hique.errors import DataValidationError
from hique.features import SyntheticConfig, generate_synthetic_corpus
from hique.model import HiQuE, ModelConfig, MultiHeadAttention, batch_from_interviews, bce_loss, fuse

from oracles import attention_hand as oracle

# Values produced by tests/oracles/attention_hand.py (pure Python) and frozen.
FROZEN = {
    1: {
        "fused": [0.9997072228446462, -0.9997072228446453, 0.9999848113125877, -0.9999848113125875],
        "logits": [-0.15006559994513205, -0.34985740859417613],
        "probs": [0.5497824659683691, 0.4502175340316309],
        "qa_audio": [[2.5741023575206787, 1.2088584462972605], [0.5237762792462524, -1.3673023081241373],
                     [3.831697100491892, 1.903723161909453]],
        "self_map_audio_row0": [0.26951217755316315, 0.07819273246307898, 0.6522950899837578],
        "cross_text_audio": [[3.3770134557917664, 3.800168739312301], [4.172154754650561, 0.363428758830991],
                             [1.6659634347366663, 1.5180119454341143]],
    },
    2: {
        "fused": [1.002264701308642, -1.002264701308647, 1.0001009647919787, -1.0001009647919787],
        "logits": [-0.14948430706883006, -0.3511071094563264],
        "probs": [0.5502356352287258, 0.4497643647712741],
        "qa_audio": [[2.5752103826044412, 0.9758607913875759], [1.0, -1.5543752624377316],
                     [3.8509370922208683, 1.6705051277609915]],
        "self_map_audio_row0": [0.24472847105479764, 0.09003057317038046, 0.6652409557748218],
        "cross_text_audio": [[3.2050164759188617, 3.258038644917626], [5.490271731913012, 0.9269936982345333],
                             [1.60177968102324, 1.228425569529444]],
    },
}


def _set_block(mha: MultiHeadAttention, block):
    with torch.no_grad():
        for lin, w in zip((mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj), block):
            lin.weight.copy_(torch.tensor(w, dtype=torch.float64).T)
            lin.bias.zero_()


def oracle_model(n_heads: int) -> HiQuE:
    cfg = ModelConfig(d_model=2, n_heads=n_heads, seq_len=3, conv_stack=((1, 2),), hierarchy_embedding=False,
                      input_dims={"audio": 2, "visual": 2, "text": 2}, dropout_rate=0.5)
    model = HiQuE(cfg).double().eval()
    for m in ("audio", "visual", "text"):
        _set_block(model.self_attn[m], oracle.BLOCKS[f"self:{m}"])
    for name, mha in model.cross_attn.items():
        _set_block(mha, oracle.BLOCKS[name])
    with torch.no_grad():
        model.head.weight.copy_(torch.tensor(oracle.HEAD_W, dtype=torch.float64).T)
        model.head.bias.copy_(torch.tensor(oracle.HEAD_B, dtype=torch.float64))
    return model


def run_stages(model: HiQuE):
    u = {m: torch.tensor([v], dtype=torch.float64) for m, v in oracle.U.items()}
    qa, self_maps = {}, {}
    for m in u:
        qa[m], self_maps[m] = model.question_aware(m, u[m])
    pairs, cross, cross_maps = [], {}, {}
    for a, b in oracle.PAIRS:
        uab, uba, mab, mba = model.cross_modal(a, b, qa[a], qa[b])
        cross[f"{a}->{b}"], cross[f"{b}->{a}"] = uab, uba
        cross_maps[f"{a}->{b}"], cross_maps[f"{b}->{a}"] = mab, mba
        pairs.append((uab, uba))
    fused = fuse(pairs, model.norm)
    logits, probs = model.predict(fused)
    return qa, self_maps, cross, cross_maps, fused, logits, probs


@pytest.mark.parametrize("n_heads", [1, 2])
def test_three_slot_oracle(n_heads):
    ref = oracle.compute(n_heads)
    qa, self_maps, cross, cross_maps, fused, logits, probs = run_stages(oracle_model(n_heads))
    for m in oracle.U:
        np.testing.assert_allclose(qa[m][0].detach().numpy(), ref["qa"][m], atol=1e-6)
        np.testing.assert_allclose(self_maps[m][0].detach().numpy(), ref["self_maps"][m], atol=1e-6)
    for k in ref["cross"]:
        np.testing.assert_allclose(cross[k][0].detach().numpy(), ref["cross"][k], atol=1e-6)
        np.testing.assert_allclose(cross_maps[k][0].detach().numpy(), ref["cross_maps"][k], atol=1e-6)
    np.testing.assert_allclose(fused[0].detach().numpy(), ref["fused"], atol=1e-6)
    np.testing.assert_allclose(logits[0].detach().numpy(), ref["logits"], atol=1e-6)
    np.testing.assert_allclose(probs[0].detach().numpy(), ref["probs"], atol=1e-6)


@pytest.mark.parametrize("n_heads", [1, 2])
def test_oracle_matches_frozen_values(n_heads):
    ref, frozen = oracle.compute(n_heads), FROZEN[n_heads]
    np.testing.assert_allclose(ref["fused"], frozen["fused"], atol=1e-12)
    np.testing.assert_allclose(ref["logits"], frozen["logits"], atol=1e-12)
    np.testing.assert_allclose(ref["probs"], frozen["probs"], atol=1e-12)
    np.testing.assert_allclose(ref["qa"]["audio"], frozen["qa_audio"], atol=1e-12)
    np.testing.assert_allclose(ref["self_maps"]["audio"][0][0], frozen["self_map_audio_row0"], atol=1e-12)
    np.testing.assert_allclose(ref["cross"]["text->audio"], frozen["cross_text_audio"], atol=1e-12)


def test_identity_attention_on_constant_rows_is_uniform():
    mha = MultiHeadAttention(1, 1)
    with torch.no_grad():
        for lin in (mha.q_proj, mha.k_proj, mha.v_proj, mha.out_proj):
            lin.weight.fill_(1.0)
    x = torch.full((1, 85, 1), 0.7)
    _, maps = mha(x, x, x)
    np.testing.assert_allclose(maps.detach().numpy(), np.full((1, 1, 85, 85), 1 / 85), atol=1e-7)


def test_non_finite_attention_input_rejected():
    mha = MultiHeadAttention(4, 2)
    x = torch.zeros(1, 5, 4)
    x[0, 2, 1] = float("nan")
    with pytest.raises(DataValidationError):
        mha(x, x, x)


def test_projection_shapes_and_zero_input():
    model = HiQuE(ModelConfig())
    for m, d in (("audio", 88), ("visual", 272), ("text", 768)):
        x = torch.zeros(2, 85, d)
        out = model.project(m, x, torch.ones(2, 85, dtype=torch.bool))
        assert out.shape == (2, 85, 4)
        assert torch.count_nonzero(out) == 0


def test_projection_rezeroes_absent_slots():
    model = HiQuE(ModelConfig())
    x = torch.randn(1, 85, 88)
    mask = torch.zeros(1, 85, dtype=torch.bool)
    assert torch.count_nonzero(model.project("audio", x, mask)) == 0
    mask[0, 5] = True
    out = model.project("audio", x, mask)
    assert torch.count_nonzero(out[0, :5]) == 0 and torch.count_nonzero(out[0, 6:]) == 0


def test_projection_width_mismatch_names_widths():
    model = HiQuE(ModelConfig())
    with pytest.raises(DataValidationError, match="expected feature width 88, got 90"):
        model.project("audio", torch.zeros(1, 85, 90), torch.ones(1, 85, dtype=torch.bool))


def test_zero_value_stream_passes_residual_through():
    model = HiQuE(ModelConfig(hierarchy_embedding=False))
    u1 = torch.randn(1, 85, 4)
    u12, _, _, _ = model.cross_modal("audio", "visual", u1, torch.zeros(1, 85, 4))
    torch.testing.assert_close(u12, u1)
    qa, _ = model.question_aware("text", torch.zeros(1, 85, 4))
    assert torch.count_nonzero(qa) == 0


def test_tied_cross_parameters_swap_outputs():
    model = HiQuE(ModelConfig())
    model.cross_attn["visual->audio"].load_state_dict(model.cross_attn["audio->visual"].state_dict())
    u1, u2 = torch.randn(1, 85, 4), torch.randn(1, 85, 4)
    a12, a21, _, _ = model.cross_modal("audio", "visual", u1, u2)
    b12, b21, _, _ = model.cross_modal("audio", "visual", u2, u1)
    torch.testing.assert_close(a12, b21)
    torch.testing.assert_close(a21, b12)


def test_fuse_constant_rows_gives_three_shifts():
    norm = torch.nn.LayerNorm(4)
    with torch.no_grad():
        norm.bias.copy_(torch.tensor([0.1, -0.2, 0.3, 0.4]))
    c = torch.ones(1, 85, 4) * 2.5
    out = fuse([(c, c)] * 3, norm)
    expected = 3 * torch.cat([norm.bias, norm.bias]).detach()
    torch.testing.assert_close(out[0], expected)


def test_fuse_additivity_and_gap():
    norm = torch.nn.LayerNorm(3)
    x = [torch.randn(1, 2, 3, dtype=torch.float64) for _ in range(4)]
    zero = torch.zeros(1, 2, 3, dtype=torch.float64)
    norm = norm.double()
    with_zero = fuse([(x[0], x[1]), (x[2], x[3]), (zero, zero)], norm)
    without = fuse([(x[0], x[1]), (x[2], x[3])], norm)
    torch.testing.assert_close(with_zero, without)
    # explicit mean over the two slots
    rows = [torch.cat([norm(x[0])[0, k], norm(x[1])[0, k]]) for k in range(2)]
    torch.testing.assert_close(fuse([(x[0], x[1])], norm)[0], (rows[0] + rows[1]) / 2)
    with pytest.raises(DataValidationError):
        fuse([], norm)


def test_predict_closed_forms():
    model = HiQuE(ModelConfig()).eval()
    with torch.no_grad():
        model.head.weight.zero_()
    _, probs = model.predict(torch.randn(3, 8))
    np.testing.assert_allclose(probs.detach().numpy(), 0.5)
    p = torch.softmax(torch.tensor([2.0, 0.0], dtype=torch.float64), dim=-1)
    np.testing.assert_allclose(p.numpy(), [math.e**2 / (math.e**2 + 1), 1 / (math.e**2 + 1)], atol=1e-12)
    np.testing.assert_allclose(p.numpy(), [0.8808, 0.1192], atol=1e-4)


def test_bce_loss_values():
    assert bce_loss(torch.tensor([0.5, 0.5]), torch.tensor([0, 1])).item() == pytest.approx(math.log(2))
    assert bce_loss(torch.tensor([1.0, 0.0]), torch.tensor([1, 0])).item() == pytest.approx(0.0, abs=1e-6)
    loss = bce_loss(torch.tensor([0.8, 0.4], dtype=torch.float64), torch.tensor([1, 0]))
    assert loss.item() == pytest.approx(-(math.log(0.8) + math.log(0.6)) / 2, abs=1e-12)
    assert loss.item() == pytest.approx(0.3670, abs=1e-4)
    with pytest.raises(DataValidationError):
        bce_loss(torch.tensor([]), torch.tensor([]))


def test_forward_shapes_and_row_stochastic_maps(small_corpus):
    model = HiQuE(ModelConfig()).eval()
    out = model(batch_from_interviews(small_corpus[:4], model.config))
    assert out["probs"].shape == (4, 2)
    np.testing.assert_allclose(out["probs"].sum(-1).detach().numpy(), 1.0, atol=1e-6)
    assert out["fused"].shape == (4, 8)
    assert set(out["cross_maps"]) == {"audio->visual", "visual->audio", "visual->text",
                                      "text->visual", "text->audio", "audio->text"}
    for maps in list(out["self_maps"].values()) + list(out["cross_maps"].values()):
        assert maps.shape == (4, 2, 85, 85)
        assert (maps >= 0).all() and (maps <= 1).all()
        np.testing.assert_allclose(maps.sum(-1).detach().numpy(), 1.0, atol=1e-5)


def test_eval_mode_is_deterministic(small_corpus):
    model = HiQuE(ModelConfig()).eval()
    batch = batch_from_interviews(small_corpus[:3], model.config)
    torch.testing.assert_close(model(batch)["probs"], model(batch)["probs"], rtol=0, atol=0)


def test_permuting_slots_permutes_maps_and_keeps_fusion():
    torch.manual_seed(0)
    cfg = ModelConfig(conv_stack=((1, 8), (1, 4)), hierarchy_embedding=False)
    model = HiQuE(cfg).double().eval()
    corpus = generate_synthetic_corpus(SyntheticConfig(n_depressed=1, n_normal=1, seed=0))
    batch = batch_from_interviews(corpus, cfg, dtype=torch.float64)
    perm = torch.randperm(85)
    permuted = {k: (v[:, perm] if v.dim() >= 2 else v) for k, v in batch.items()}
    a, b = model(batch), model(permuted)
    torch.testing.assert_close(a["fused"], b["fused"])
    for name, maps in a["self_maps"].items():
        torch.testing.assert_close(maps[:, :, perm][:, :, :, perm], b["self_maps"][name])
    for name, maps in a["cross_maps"].items():
        torch.testing.assert_close(maps[:, :, perm][:, :, :, perm], b["cross_maps"][name])


def test_masked_slots_contribute_zero_values():
    model = HiQuE(ModelConfig(hierarchy_embedding=False))
    x = torch.randn(1, 85, 88)
    mask = torch.zeros(1, 85, dtype=torch.bool)
    mask[0, :10] = True
    x[~mask] = 0.0
    u = model.project("audio", x, mask)
    v = model.self_attn["audio"].v_proj(u)
    assert torch.count_nonzero(v[0, 10:]) == 0


def test_unimodal_and_ablated_paths(small_corpus):
    for cfg in (ModelConfig(modalities=("text",)), ModelConfig(cm_attention=False), ModelConfig(qa_module=False)):
        model = HiQuE(cfg).eval()
        out = model(batch_from_interviews(small_corpus[:2], cfg))
        assert out["fused"].shape == (2, cfg.fused_width)
        if cfg.modalities == ("text",):
            assert out["cross_maps"] == {}
        if not cfg.qa_module:
            assert out["self_maps"] == {}


def test_key_mask_gives_no_weight_to_absent_slots(small_corpus):
    cfg = ModelConfig(key_mask=True)
    model = HiQuE(cfg).eval()
    iv = small_corpus[0]
    out = model(batch_from_interviews([iv], cfg))
    absent = ~torch.as_tensor(iv["audio"].mask)
    assert out["self_maps"]["audio"][0][..., absent].abs().max() == 0


def test_config_validation_and_round_trip():
    with pytest.raises(DataValidationError):
        ModelConfig(d_model=4, n_heads=3)
    with pytest.raises(DataValidationError):
        ModelConfig.from_dict({"d_modell": 4})
    cfg = ModelConfig(d_model=6, n_heads=3)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def _mini_model():
    cfg = ModelConfig(d_model=2, n_heads=1, seq_len=3, conv_stack=((3, 2),), dropout_rate=0.5,
                      input_dims={"audio": 3, "visual": 4, "text": 5})
    torch.manual_seed(7)
    return HiQuE(cfg).double().eval()


def _mini_batch(cfg):
    g = torch.Generator().manual_seed(11)
    batch = {}
    for m in cfg.modalities:
        batch[m] = torch.randn(2, 3, cfg.input_dims[m], generator=g, dtype=torch.float64)
        batch[f"{m}_mask"] = torch.ones(2, 3, dtype=torch.bool)
    batch["topic"] = torch.tensor([[0, 1, 2], [0, 0, 2]])
    batch["depth"] = torch.tensor([[0, 0, 0], [0, 1, 0]])
    return batch, torch.tensor([1, 0])


def gradient_check(h: float = 1e-4) -> float:
    model = _mini_model()
    batch, labels = _mini_batch(model.config)

    def loss_fn():
        return bce_loss(model(batch)["probs"][:, 1], labels)

    model.zero_grad()
    loss_fn().backward()
    worst = 0.0
    with torch.no_grad():
        for p in model.parameters():
            flat, grad = p.view(-1), p.grad.view(-1)
            for i in range(flat.numel()):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                down = loss_fn().item()
                flat[i] = old
                numeric = (up - down) / (2 * h)
                analytic = grad[i].item()
                denom = max(abs(numeric), abs(analytic), 1e-7)
                worst = max(worst, abs(numeric - analytic) / denom)
    return worst


def test_gradient_check_miniature():
    assert gradient_check() < 1e-3
