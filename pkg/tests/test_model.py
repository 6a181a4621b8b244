import dataclasses

import numpy as np
import pytest
import torch

from rfid.data import EOS_ID, ConfigurationError
from rfid.model import (AttentionTrace, ModelConfig, RFiDModel, count_parameters, load_checkpoint, predict_labels,
                        save_checkpoint)


def _inputs(cfg, B=2, seed=0, pad_from=None):
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(4, cfg.vocab_size, (B, cfg.K, cfg.L), generator=g)
    mask = torch.ones(B, cfg.K, cfg.L, dtype=torch.bool)
    if pad_from is not None:
        mask[..., pad_from:] = False
        ids = ids.masked_fill(~mask, 0)
    dec = torch.randint(4, cfg.vocab_size, (B, cfg.max_target_len), generator=g)
    dec[:, 0] = 1
    return ids, mask, dec


def test_encode_shapes():
    cfg = ModelConfig(K=3, L=6, d=8, n_heads=2, vocab_size=30, n_enc_layers=1, n_dec_layers=1)
    model = RFiDModel(cfg)
    ids, mask, _ = _inputs(cfg, B=1)
    states = model.encode(ids, mask)
    assert states.shape == (1, 3, 6, 8)
    assert torch.isfinite(states).all()


def test_encode_rejects_wrong_k(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    ids = torch.zeros(1, 3, tiny_cfg.L, dtype=torch.long)
    with pytest.raises(ConfigurationError):
        model.encode(ids, ids.bool())


def test_encoders_shared_and_permutation_equivariant(tiny_cfg):
    cfg = dataclasses.replace(tiny_cfg, K=3)
    model = RFiDModel(cfg)
    ids, mask, _ = _inputs(cfg, B=1, pad_from=6)
    states = model.encode(ids, mask)
    perm = torch.tensor([2, 0, 1])
    permuted = model.encode(ids[:, perm], mask[:, perm])
    assert torch.allclose(permuted, states[:, perm], atol=1e-6)
    ids[:, 1] = ids[:, 0]
    dup = model.encode(ids, mask)
    assert torch.equal(dup[:, 0], dup[:, 1])


def test_parameter_count_independent_of_k(tiny_cfg):
    counts = {count_parameters(RFiDModel(dataclasses.replace(tiny_cfg, K=k))) for k in (1, 2, 5, 17)}
    assert len(counts) == 1


def test_classifier_tie_break_and_bias(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    states = torch.randn(1, 2, tiny_cfg.L, tiny_cfg.d)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.zero_()
    logits, preds = model.classify_rationale(states)
    assert torch.equal(logits, torch.zeros(1, 2, 2)) and preds.tolist() == [[0, 0]]
    with torch.no_grad():
        model.classifier.bias.copy_(torch.tensor([0.0, 1.0]))
    assert model.classify_rationale(states)[1].tolist() == [[1, 1]]


def test_classifier_scale_invariance_without_bias(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    with torch.no_grad():
        model.classifier.bias.zero_()
    states = torch.randn(4, 2, tiny_cfg.L, tiny_cfg.d)
    base = model.classify_rationale(states)[1]
    for c in (0.01, 3.0, 250.0):
        assert torch.equal(model.classify_rationale(states * c)[1], base)


def test_predict_labels_monotone_transform():
    logits = torch.randn(50, 2)
    for f in (torch.exp, lambda x: x ** 3, lambda x: 2 * x + 7, torch.sigmoid):
        assert torch.equal(predict_labels(f(logits)), predict_labels(logits))
    assert predict_labels(torch.tensor([[1.5, 1.5]])).item() == 0


@pytest.mark.parametrize("guide, expected_len", [(True, 8), (False, 6)])
def test_memory_length(guide, expected_len):
    cfg = ModelConfig(K=2, L=3, d=8, n_heads=2, vocab_size=20, guide_decoder=guide)
    model = RFiDModel(cfg)
    states = torch.randn(1, 2, 3, 8)
    mask = torch.ones(1, 2, 3, dtype=torch.bool)
    memory, mem_mask = model.assemble_memory(states, mask, torch.tensor([[1, 0]]))
    assert memory.shape == (1, expected_len, 8)
    assert mem_mask.shape == (1, expected_len) and mem_mask.all()
    if guide:
        assert torch.equal(memory[0, 3], model.rationale_embedding.weight[1])
        assert torch.equal(memory[0, 7], model.rationale_embedding.weight[0])
        assert torch.equal(memory[0, 4:7], states[0, 1])


def test_memory_preds_affect_only_guidance_slots():
    cfg = ModelConfig(K=2, L=3, d=8, n_heads=2, vocab_size=20)
    model = RFiDModel(cfg)
    states = torch.randn(1, 2, 3, 8)
    mask = torch.tensor([[[True, True, False], [True, False, False]]])
    a, ma = model.assemble_memory(states, mask, torch.tensor([[1, 0]]))
    b, mb = model.assemble_memory(states, mask, torch.tensor([[0, 1]]))
    differs = (a != b).any(-1)[0]
    assert differs.nonzero().flatten().tolist() == [3, 7]
    assert torch.equal(ma, mb)
    assert ma[0].tolist() == [True, True, False, True, True, False, False, True]


def test_memory_swap_permutes_blocks():
    cfg = ModelConfig(K=3, L=2, d=8, n_heads=2, vocab_size=20)
    model = RFiDModel(cfg)
    states = torch.randn(1, 3, 2, 8)
    mask = torch.ones(1, 3, 2, dtype=torch.bool)
    preds = torch.tensor([[1, 0, 0]])
    mem, _ = model.assemble_memory(states, mask, preds)
    swapped, _ = model.assemble_memory(states[:, [1, 0, 2]], mask, preds[:, [1, 0, 2]])
    blocks = mem.view(1, 3, 3, 8)
    assert torch.equal(swapped.view(1, 3, 3, 8), blocks[:, [1, 0, 2]])


def test_memory_rejects_bad_preds():
    model = RFiDModel(ModelConfig(K=2, L=3, d=8, n_heads=2, vocab_size=20))
    with pytest.raises(ValueError):
        model.assemble_memory(torch.randn(1, 2, 3, 8), torch.ones(1, 2, 3, dtype=torch.bool), torch.tensor([[2, 0]]))


@pytest.mark.parametrize("guide", [True, False])
def test_cross_attention_rows_are_distributions(tiny_cfg, guide):
    cfg = dataclasses.replace(tiny_cfg, guide_decoder=guide, n_dec_layers=2)
    model = RFiDModel(cfg)
    ids, mask, dec = _inputs(cfg, B=3, pad_from=5)
    out = model(ids, mask, dec, trace=True)
    assert len(out.cross_attention) == 2
    for ca in out.cross_attention:
        assert ca.shape == (3, cfg.n_heads, cfg.max_target_len, cfg.K * cfg.block_len)
        assert (ca >= 0).all()
        assert torch.allclose(ca.sum(-1), torch.ones(()), atol=1e-6)
        assert (ca[..., ~out.memory_mask[0]] == 0).all()


def test_all_masked_block_gets_zero_attention(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    ids, mask, dec = _inputs(tiny_cfg, B=1)
    mask[0, 1] = False
    out = model(ids, mask, dec, trace=True)
    block = tiny_cfg.block_len
    for ca in out.cross_attention:
        assert (ca[..., block:block + tiny_cfg.L] == 0).all()
        assert ca[..., block + tiny_cfg.L].gt(0).all()  # guidance slot stays valid


def test_decoder_is_causal(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    ids, mask, dec = _inputs(tiny_cfg, B=1)
    base = model(ids, mask, dec).logits
    changed = dec.clone()
    changed[0, 2:] = 5
    other = model(ids, mask, changed).logits
    assert torch.equal(base[0, :2], other[0, :2])


def test_decode_rejects_long_prefix(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    ids, mask, _ = _inputs(tiny_cfg, B=1)
    dec = torch.ones(1, tiny_cfg.max_target_len + 1, dtype=torch.long)
    with pytest.raises(ValueError):
        model(ids, mask, dec)


def test_forward_k1_shapes():
    cfg = ModelConfig(K=1, L=5, d=8, n_heads=2, vocab_size=13, n_enc_layers=1, n_dec_layers=1, max_target_len=3)
    out = RFiDModel(cfg)(*_inputs(cfg, B=1))
    assert out.rationale_logits.shape == (1, 1, 2)
    assert out.logits.shape == (1, 3, 13)


def test_forward_deterministic(tiny_cfg):
    a = RFiDModel(tiny_cfg)(*_inputs(tiny_cfg))
    b = RFiDModel(tiny_cfg)(*_inputs(tiny_cfg))
    assert torch.equal(a.logits, b.logits) and torch.equal(a.rationale_logits, b.rationale_logits)
    other = RFiDModel(dataclasses.replace(tiny_cfg, seed=1))(*_inputs(tiny_cfg))
    assert not torch.equal(a.logits, other.logits)


def test_guided_and_unguided_share_everything_but_memory(tiny_cfg):
    guided = RFiDModel(tiny_cfg)
    plain = RFiDModel(dataclasses.replace(tiny_cfg, guide_decoder=False))
    for (n1, p1), (n2, p2) in zip(guided.named_parameters(), plain.named_parameters()):
        assert n1 == n2 and torch.equal(p1, p2)
    ids, mask, dec = _inputs(tiny_cfg)
    a, b = guided(ids, mask, dec, trace=True), plain(ids, mask, dec, trace=True)
    assert torch.equal(a.rationale_logits, b.rationale_logits)
    assert a.cross_attention[0].shape[-1] == tiny_cfg.K * (tiny_cfg.L + 1)
    assert b.cross_attention[0].shape[-1] == tiny_cfg.K * tiny_cfg.L


def test_rationale_embedding_rows_distinct(tiny_cfg):
    w = RFiDModel(tiny_cfg).rationale_embedding.weight
    assert w.shape == (2, tiny_cfg.d) and not torch.equal(w[0], w[1])


def test_greedy_stops_on_eos(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    with torch.no_grad():
        model.lm_head.weight.zero_()
        model.lm_head.bias.zero_()
        model.lm_head.bias[EOS_ID] = 10.0
    ids, mask, _ = _inputs(tiny_cfg, B=2)
    generated, _, _, maps, lengths = model.greedy_decode(ids, mask, trace=True)
    assert generated == [[], []] and lengths.tolist() == [1, 1]
    assert maps[0].shape[2] == 1


def test_greedy_ties_pick_lowest_id(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    with torch.no_grad():
        model.lm_head.weight.zero_()
        model.lm_head.bias.zero_()
        model.lm_head.bias[[7, 9, 11]] = 5.0
    generated, *_ = model.greedy_decode(*_inputs(tiny_cfg, B=1)[:2])
    assert generated == [[7] * tiny_cfg.max_target_len]


def test_greedy_matches_argmax_of_teacher_forced_logits(tiny_cfg):
    model = RFiDModel(tiny_cfg)
    ids, mask, _ = _inputs(tiny_cfg, B=3, seed=4)
    generated, _, _, _, lengths = model.greedy_decode(ids, mask)
    for b in range(3):
        prefix = [1]
        for _ in range(int(lengths[b])):
            dec = torch.tensor([prefix])
            logits = model(ids[b:b + 1], mask[b:b + 1], dec).logits
            prefix.append(int(logits[0, -1].argmax()))
        toks = [t for t in prefix[1:] if t != EOS_ID]
        assert toks == generated[b]


def test_checkpoint_roundtrip(tmp_path, tiny_cfg):
    model = RFiDModel(tiny_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model, meta={"step": 3})
    ck = load_checkpoint(path)
    assert ck.model.cfg == tiny_cfg and ck.meta == {"step": 3}
    for (n1, p1), (n2, p2) in zip(model.state_dict().items(), ck.model.state_dict().items()):
        assert n1 == n2 and torch.equal(p1, p2)
    save_checkpoint(tmp_path / "again.ckpt", ck.model, meta={"step": 3})
    assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_rejects_shape_mismatch(tmp_path, tiny_cfg):
    import json
    import struct
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, RFiDModel(tiny_cfg))
    raw = path.read_bytes()
    hlen = struct.unpack("<IQ", raw[8:20])[1]
    header = json.loads(raw[20:20 + hlen])
    header["model_config"]["d"] = 32
    new = json.dumps(header, sort_keys=True).encode()
    (tmp_path / "bad.ckpt").write_bytes(raw[:8] + struct.pack("<IQ", 1, len(new)) + new + raw[20 + hlen:])
    with pytest.raises(ConfigurationError, match="shape"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"nonsense")
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_checkpoint_is_little_endian_float32(tmp_path, tiny_cfg):
    import json
    import struct
    model = RFiDModel(tiny_cfg)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    raw = path.read_bytes()
    hlen = struct.unpack("<IQ", raw[8:20])[1]
    header = json.loads(raw[20:20 + hlen])
    first = header["tensors"][0]
    off = 20 + hlen
    (ndim,) = struct.unpack("<I", raw[off:off + 4])
    dims = struct.unpack(f"<{ndim}Q", raw[off + 4:off + 4 + 8 * ndim])
    assert list(dims) == first["shape"]
    n = int(np.prod(dims))
    data = np.frombuffer(raw[off + 4 + 8 * ndim:off + 4 + 8 * ndim + 4 * n], dtype="<f4")
    assert np.array_equal(data, model.state_dict()[first["name"]].numpy().ravel())


def test_model_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d=10, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(K=0)
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"bogus": 1})


def test_attention_trace_properties():
    tr = AttentionTrace(np.zeros((2, 3, 4, 2 * 6)), K=2, L=5, guided=True)
    assert (tr.block_len, tr.n_layers, tr.steps) == (6, 2, 4)
