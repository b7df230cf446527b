import json
import math

import numpy as np
import pytest

from zosim import (
    Batch,
    ConfigurationError,
    DimensionError,
    ModelConfig,
    NumericError,
    forward,
    forward_block,
    init_model,
    load_checkpoint,
    loss,
    make_batch,
    save_checkpoint,
)
from zosim.model import LN_EPS, ParamBlock, block_tensor_spec


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=8, d_model=10, n_heads=3, n_blocks=1, seq_len=4).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=0, d_model=8, n_heads=2, n_blocks=1, seq_len=4).validate()
    with pytest.raises(ConfigurationError):
        ModelConfig(vocab_size=8, d_model=8, n_heads=2, n_blocks=1, seq_len=4, dtype="f16").validate()


def test_init_deterministic(tiny_config):
    a = init_model(tiny_config, 7)
    b = init_model(tiny_config, 7)
    assert a.equal(b)
    c = init_model(tiny_config, 8)
    assert not a.equal(c)


def test_block_count_and_order():
    cfg = ModelConfig(vocab_size=8, d_model=8, n_heads=2, n_blocks=2, seq_len=4)
    store = init_model(cfg, 1)
    assert store.n_blocks == 4  # embedding + 2 + head
    assert [b.kind for b in store.blocks] == ["embedding", "transformer", "transformer", "head"]
    assert [b.block_id for b in store.blocks] == [0, 1, 2, 3]


def test_elem_count_matches_brute_force_recount(tiny_store):
    # independent recount from declared shapes
    for block in tiny_store.blocks:
        recount = sum(
            int(np.prod(shape)) for _, shape in block_tensor_spec(tiny_store.config, block.kind)
        )
        assert block.elem_count == recount
        assert block.buf.size == recount
    assert tiny_store.total_params == tiny_store.config.param_count()


def test_block_buffer_views_share_memory(tiny_store):
    block = tiny_store.blocks[1]
    t = block.tensor("wq")
    t[0, 0] = 123.0
    assert block.buf[block.offsets["wq"]] == 123.0


def test_forward_purity(tiny_store, tiny_batch):
    a = forward(tiny_store, tiny_batch.token_ids)
    b = forward(tiny_store, tiny_batch.token_ids)
    assert np.array_equal(a, b)


def test_zero_block_zero_input_finite():
    cfg = ModelConfig(vocab_size=8, d_model=8, n_heads=2, n_blocks=1, seq_len=4)
    block = ParamBlock(1, "transformer", block_tensor_spec(cfg, "transformer"),
                       np.float64, n_heads=2)
    out = forward_block(block, np.zeros((2, 4, 8)))
    assert np.isfinite(out).all()


def _reference_forward(store, token_ids):
    """Single-pass whole-model forward, written independently of
    forward_block but with the same op order (the composability oracle)."""
    cfg = store.config
    p = {}
    for b in store.blocks:
        for name in b.names:
            p[(b.block_id, name)] = b.tensor(name)

    def ln(x, g, bias):
        mu = x.mean(axis=-1, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + LN_EPS) * g + bias

    x = p[(0, "tok_emb")][token_ids] + p[(0, "pos_emb")][: token_ids.shape[1]][None, :, :]
    bsz, t, d = x.shape
    hd = d // cfg.n_heads
    for wb in store.transformer_blocks():
        i = wb.block_id
        h = ln(x, p[(i, "ln1_g")], p[(i, "ln1_b")])
        q = (h @ p[(i, "wq")] + p[(i, "bq")]).reshape(bsz, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)
        k = (h @ p[(i, "wk")] + p[(i, "bk")]).reshape(bsz, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)
        v = (h @ p[(i, "wv")] + p[(i, "bv")]).reshape(bsz, t, cfg.n_heads, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(np.asarray(hd, dtype=x.dtype))
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(mask, np.asarray(-np.inf, dtype=x.dtype), scores)
        m = scores.max(axis=-1, keepdims=True)
        e = np.exp(scores - m)
        probs = e / e.sum(axis=-1, keepdims=True)
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, t, d)
        x = x + (ctx @ p[(i, "wo")] + p[(i, "bo")])
        h2 = ln(x, p[(i, "ln2_g")], p[(i, "ln2_b")])
        a = h2 @ p[(i, "w1")] + p[(i, "b1")]
        c = np.sqrt(np.asarray(2.0 / np.pi, dtype=x.dtype))
        gelu = 0.5 * a * (1.0 + np.tanh(c * (a + 0.044715 * a**3)))
        x = x + (gelu @ p[(i, "w2")] + p[(i, "b2")])
    head = store.blocks[-1].block_id
    h = ln(x, p[(head, "lnf_g")], p[(head, "lnf_b")])
    return h @ p[(head, "w_out")] + p[(head, "b_out")]


def test_streaming_forward_equals_monolithic_reference(tiny_store, tiny_batch):
    composed = forward(tiny_store, tiny_batch.token_ids)
    reference = _reference_forward(tiny_store, tiny_batch.token_ids)
    assert np.array_equal(composed, reference)


def test_forward_shape_errors(tiny_store):
    with pytest.raises(DimensionError):
        forward_block(tiny_store.blocks[1], np.zeros((2, 4, 5)))  # wrong width
    with pytest.raises(DimensionError):
        forward_block(tiny_store.blocks[0], np.zeros((2, 4)))  # float ids
    with pytest.raises(DimensionError):
        forward_block(tiny_store.blocks[-1], np.zeros((2, 4)))  # not 3-D


def test_loss_uniform_logits_is_log_vocab():
    batch = Batch(np.zeros((2, 3), dtype=np.int64), np.zeros((2, 3), dtype=np.int64))
    logits = np.zeros((2, 3, 4))
    assert loss(logits, batch) == pytest.approx(math.log(4.0), abs=1e-12)


def test_loss_goes_to_zero_with_margin():
    targets = np.array([[1, 2]])
    batch = Batch(targets, targets)
    prev = None
    for margin in (5.0, 20.0, 100.0):
        logits = np.zeros((1, 2, 4))
        for t_idx in range(2):
            logits[0, t_idx, targets[0, t_idx]] = margin
        val = loss(logits, batch)
        if prev is not None:
            assert val < prev
        prev = val
    assert prev < 1e-10


def test_loss_matches_elementwise_oracle():
    rng = np.random.default_rng(3)
    logits = rng.normal(size=(3, 5, 7))
    targets = rng.integers(0, 7, size=(3, 5))
    batch = Batch(targets, targets)
    # brute-force softmax + NLL, one position at a time
    total = 0.0
    for b in range(3):
        for t in range(5):
            row = logits[b, t]
            probs = np.exp(row) / np.exp(row).sum()
            total += -math.log(probs[targets[b, t]])
    assert loss(logits, batch) == pytest.approx(total / 15.0, abs=1e-12)


def test_loss_rejects_nonfinite():
    batch = Batch(np.zeros((1, 2), dtype=np.int64), np.zeros((1, 2), dtype=np.int64))
    logits = np.zeros((1, 2, 4))
    logits[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        loss(logits, batch)
    logits[0, 0, 0] = np.inf
    with pytest.raises(NumericError):
        loss(logits, batch)


def test_batch_validation(tiny_config):
    with pytest.raises(DimensionError):
        Batch(np.zeros((2, 3), dtype=np.int64), np.zeros((2, 4), dtype=np.int64))
    bad = Batch(np.full((2, 8), 99, dtype=np.int64), np.zeros((2, 8), dtype=np.int64))
    with pytest.raises(ConfigurationError):
        bad.validate(tiny_config)


def test_batch_shard(tiny_config):
    batch = make_batch(tiny_config, 8, 1)
    shards = [batch.shard(4, r) for r in range(4)]
    assert all(s.size == 2 for s in shards)
    assert np.array_equal(np.concatenate([s.token_ids for s in shards]), batch.token_ids)
    with pytest.raises(ConfigurationError):
        batch.shard(3, 0)


def test_checkpoint_round_trip(tiny_store, tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_store, path)
    loaded = load_checkpoint(path)
    assert loaded.config == tiny_store.config
    assert loaded.equal(tiny_store)
    # header is inspectable json after the magic/length prefix
    raw = path.read_bytes()
    hlen = int.from_bytes(raw[4:8], "little")
    header = json.loads(raw[8:8 + hlen])
    assert header["blocks"][0]["kind"] == "embedding"
    assert [b["block_id"] for b in header["blocks"]] == [0, 1, 2, 3]


def test_checkpoint_f32_round_trip(tmp_path):
    cfg = ModelConfig(vocab_size=8, d_model=8, n_heads=2, n_blocks=1, seq_len=4, dtype="f32")
    store = init_model(cfg, 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(store, path)
    assert load_checkpoint(path).equal(store)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ConfigurationError):
        load_checkpoint(path)


def test_config_from_json(tmp_path):
    path = tmp_path / "model.json"
    path.write_text(json.dumps({
        "vocab_size": 8, "d_model": 8, "n_heads": 2, "n_blocks": 1, "seq_len": 4, "dtype": "f32"
    }))
    cfg = ModelConfig.from_json(path)
    assert cfg.d_model == 8 and cfg.dtype == "f32"
