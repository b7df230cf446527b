"""Minimal deterministic decoder-only transformer with block-wise parameters.

Parameters live in one contiguous 1-D buffer per block (embedding, each
transformer block, LM head), with named tensors as views into that buffer.
Contiguity is what lets the transfer layer slice a block without copies and
lets perturbation draw one Gaussian vector per block in a fixed element order.

Forward passes are pure: no dropout, no cached activations, no gradient
state. Pre-LN blocks with exact softmax; GELU (tanh form) in the MLP.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, ProtocolError

DTYPES = {"f32": np.float32, "f64": np.float64}

EMBEDDING = "embedding"
TRANSFORMER = "transformer"
HEAD = "head"

LN_EPS = 1e-5
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"ZOPK"


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_blocks: int
    seq_len: int
    dtype: str = "f64"

    def validate(self) -> "ModelConfig":
        for name in ("vocab_size", "d_model", "n_heads", "n_blocks", "seq_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")
        return self

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def param_count(self) -> int:
        """Total parameters across embedding, transformer blocks, and head."""
        d, v, s = self.d_model, self.vocab_size, self.seq_len
        return (v * d + s * d) + self.n_blocks * (12 * d * d + 13 * d) + (2 * d + d * v + v)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d).validate()
        except TypeError as e:
            raise ConfigurationError(f"bad model config: {e}") from e

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def block_tensor_spec(config: ModelConfig, kind: str) -> list[tuple[str, tuple]]:
    """Ordered (name, shape) list for one block; the order fixes both the
    buffer layout and the Gaussian draw order."""
    d = config.d_model
    v, s = config.vocab_size, config.seq_len
    if kind == EMBEDDING:
        return [("tok_emb", (v, d)), ("pos_emb", (s, d))]
    if kind == TRANSFORMER:
        return [
            ("ln1_g", (d,)), ("ln1_b", (d,)),
            ("wq", (d, d)), ("bq", (d,)),
            ("wk", (d, d)), ("bk", (d,)),
            ("wv", (d, d)), ("bv", (d,)),
            ("wo", (d, d)), ("bo", (d,)),
            ("ln2_g", (d,)), ("ln2_b", (d,)),
            ("w1", (d, 4 * d)), ("b1", (4 * d,)),
            ("w2", (4 * d, d)), ("b2", (d,)),
        ]
    if kind == HEAD:
        return [("lnf_g", (d,)), ("lnf_b", (d,)), ("w_out", (d, v)), ("b_out", (v,))]
    raise ConfigurationError(f"unknown block kind {kind!r}")


class ParamBlock:
    """One schedulable parameter unit: contiguous buffer + named tensor views.

    ``pert_scale`` tracks the cumulative perturbation currently applied; while
    it is nonzero, ``pert_base`` holds the unperturbed values so that closing
    the perturbation cycle restores them bit-exactly (re-adding the opposite
    float perturbation would drift in the last ulp).
    """

    def __init__(self, block_id: int, kind: str, spec, dtype, n_heads: int | None = None):
        self.block_id = block_id
        self.kind = kind
        self.n_heads = n_heads
        self.names = [name for name, _ in spec]
        self.shapes = {name: tuple(shape) for name, shape in spec}
        sizes = [int(np.prod(shape)) for _, shape in spec]
        self.offsets = {}
        off = 0
        for (name, _), size in zip(spec, sizes):
            self.offsets[name] = off
            off += size
        self.elem_count = off
        self.buf = np.zeros(self.elem_count, dtype=dtype)
        self._views = {
            name: self.buf[self.offsets[name]:self.offsets[name] + size].reshape(shape)
            for (name, shape), size in zip(spec, sizes)
        }
        self.pert_scale = 0.0
        self.pert_base = None

    def tensor(self, name: str) -> np.ndarray:
        return self._views[name]

    @property
    def tensors(self):
        return [(name, self.shapes[name], self._views[name]) for name in self.names]

    @property
    def nbytes(self) -> int:
        return self.buf.nbytes

    @property
    def dtype(self):
        return self.buf.dtype

    def spec(self):
        return [(n, self.shapes[n]) for n in self.names]

    def copy(self) -> "ParamBlock":
        if self.pert_scale != 0.0:
            raise ProtocolError(f"block {self.block_id} copied mid-perturbation")
        out = ParamBlock(self.block_id, self.kind, self.spec(), self.buf.dtype, self.n_heads)
        out.buf[:] = self.buf
        return out


class ParamStore:
    """Ordered blocks of one model: embedding, transformer blocks, LM head."""

    def __init__(self, config: ModelConfig, blocks: list[ParamBlock], init_seed: int):
        self.config = config
        self.blocks = blocks
        self.init_seed = init_seed
        self.slice_plan = None  # set by comm.apply_thread_aligned_layout

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def total_params(self) -> int:
        return sum(b.elem_count for b in self.blocks)

    @property
    def total_bytes(self) -> int:
        return sum(b.nbytes for b in self.blocks)

    def block(self, block_id: int) -> ParamBlock:
        return self.blocks[block_id]

    def transformer_blocks(self) -> list[ParamBlock]:
        return [b for b in self.blocks if b.kind == TRANSFORMER]

    def copy(self) -> "ParamStore":
        return ParamStore(self.config, [b.copy() for b in self.blocks], self.init_seed)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for b in self.blocks:
            h.update(b.buf.tobytes())
        return h.hexdigest()

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of all parameter buffers."""
        return all(
            a.buf.tobytes() == b.buf.tobytes() for a, b in zip(self.blocks, other.blocks)
        )


def init_model(config: ModelConfig, init_seed: int) -> ParamStore:
    """Deterministic initialization: same seed + config => bit-identical blocks.

    Each block draws from its own stream (seeded by (init_seed, block_id)),
    kept separate from perturbation streams so optimizer RNG bookkeeping never
    entangles with initialization.  Weights are Gaussian with std 0.02;
    layernorm gains are 1, biases and shifts 0.
    """
    config.validate()
    kinds = [EMBEDDING] + [TRANSFORMER] * config.n_blocks + [HEAD]
    blocks = []
    for block_id, kind in enumerate(kinds):
        spec = block_tensor_spec(config, kind)
        block = ParamBlock(block_id, kind, spec, config.np_dtype, n_heads=config.n_heads)
        gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([int(init_seed), block_id]))
        )
        for name, shape in spec:
            t = block.tensor(name)
            if name.endswith("_g"):
                t[...] = 1.0
            elif name.startswith("b") or name.endswith("_b"):
                t[...] = 0.0
            else:
                t[...] = (INIT_STD * gen.standard_normal(t.size)).astype(config.np_dtype).reshape(shape)
        blocks.append(block)
    return ParamStore(config, blocks, init_seed)


@dataclass
class Batch:
    token_ids: np.ndarray
    targets: np.ndarray

    def __post_init__(self):
        self.token_ids = np.asarray(self.token_ids)
        self.targets = np.asarray(self.targets)
        if self.token_ids.shape != self.targets.shape:
            raise DimensionError(
                f"token_ids shape {self.token_ids.shape} != targets shape {self.targets.shape}"
            )
        if self.token_ids.ndim != 2:
            raise DimensionError(f"batch must be 2-D (batch, seq), got {self.token_ids.ndim}-D")

    def validate(self, config: ModelConfig) -> "Batch":
        if self.token_ids.shape[1] > config.seq_len:
            raise DimensionError(
                f"sequence length {self.token_ids.shape[1]} exceeds model seq_len {config.seq_len}"
            )
        for name, arr in (("token_ids", self.token_ids), ("targets", self.targets)):
            if arr.min() < 0 or arr.max() >= config.vocab_size:
                raise ConfigurationError(f"{name} out of range for vocab_size={config.vocab_size}")
        return self

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]

    def shard(self, k: int, rank: int) -> "Batch":
        """Contiguous shard ``rank`` of ``k``; batch size must divide evenly."""
        if self.size % k != 0:
            raise ConfigurationError(f"batch size {self.size} not divisible by {k} shards")
        step = self.size // k
        sl = slice(rank * step, (rank + 1) * step)
        return Batch(self.token_ids[sl], self.targets[sl])


def make_batch(config: ModelConfig, batch_size: int, seed: int) -> Batch:
    """Synthetic next-token batch, deterministic in (config, batch_size, seed)."""
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0xDA7A])))
    ids = gen.integers(0, config.vocab_size, size=(batch_size, config.seq_len + 1))
    return Batch(ids[:, :-1], ids[:, 1:])


# -- forward pass -------------------------------------------------------------


def _layernorm(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def _gelu(x):
    # tanh form; keeps the dependency surface to numpy
    c = np.sqrt(np.asarray(2.0 / np.pi, dtype=x.dtype))
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x**3)))


def _softmax(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def forward_block(block: ParamBlock, x) -> np.ndarray:
    """Pure forward through one block; no hidden state, no stored activations."""
    if block.kind == EMBEDDING:
        ids = np.asarray(x)
        if ids.ndim != 2 or not np.issubdtype(ids.dtype, np.integer):
            raise DimensionError("embedding block expects integer token ids of shape (batch, seq)")
        tok = block.tensor("tok_emb")
        pos = block.tensor("pos_emb")
        if ids.max() >= tok.shape[0]:
            raise DimensionError("token id out of embedding range")
        if ids.shape[1] > pos.shape[0]:
            raise DimensionError(f"sequence length {ids.shape[1]} exceeds positions {pos.shape[0]}")
        return tok[ids] + pos[: ids.shape[1]][None, :, :]

    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"{block.kind} block expects activations of shape (batch, seq, d)")

    if block.kind == TRANSFORMER:
        d = block.tensor("wq").shape[0]
        if x.shape[2] != d:
            raise DimensionError(f"activation width {x.shape[2]} != d_model {d}")
        n_heads = block.n_heads or 1
        bsz, t, _ = x.shape
        hd = d // n_heads

        h = _layernorm(x, block.tensor("ln1_g"), block.tensor("ln1_b"))
        q = (h @ block.tensor("wq") + block.tensor("bq")).reshape(bsz, t, n_heads, hd).transpose(0, 2, 1, 3)
        k = (h @ block.tensor("wk") + block.tensor("bk")).reshape(bsz, t, n_heads, hd).transpose(0, 2, 1, 3)
        v = (h @ block.tensor("wv") + block.tensor("bv")).reshape(bsz, t, n_heads, hd).transpose(0, 2, 1, 3)
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(np.asarray(hd, dtype=x.dtype))
        mask = np.triu(np.ones((t, t), dtype=bool), k=1)
        scores = np.where(mask, np.asarray(-np.inf, dtype=x.dtype), scores)
        ctx = _softmax(scores) @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(bsz, t, d)
        x = x + (ctx @ block.tensor("wo") + block.tensor("bo"))

        h2 = _layernorm(x, block.tensor("ln2_g"), block.tensor("ln2_b"))
        x = x + (_gelu(h2 @ block.tensor("w1") + block.tensor("b1")) @ block.tensor("w2") + block.tensor("b2"))
        return x

    if block.kind == HEAD:
        d = block.tensor("w_out").shape[0]
        if x.shape[2] != d:
            raise DimensionError(f"activation width {x.shape[2]} != d_model {d}")
        h = _layernorm(x, block.tensor("lnf_g"), block.tensor("lnf_b"))
        return h @ block.tensor("w_out") + block.tensor("b_out")

    raise ConfigurationError(f"unknown block kind {block.kind!r}")


def forward(store: ParamStore, token_ids) -> np.ndarray:
    """Full-model logits by composing forward_block over blocks in order."""
    x = token_ids
    for block in store.blocks:
        x = forward_block(block, x)
    return x


def loss(logits: np.ndarray, batch: Batch) -> float:
    """Mean cross-entropy over all target positions, accumulated in f64."""
    logits = np.asarray(logits)
    if logits.ndim != 3:
        raise DimensionError(f"logits must be (batch, seq, vocab), got shape {logits.shape}")
    if logits.shape[:2] != batch.targets.shape:
        raise DimensionError(
            f"logits shape {logits.shape[:2]} does not match targets {batch.targets.shape}"
        )
    if not np.isfinite(logits).all():
        raise NumericError("non-finite logits")
    l64 = logits.astype(np.float64, copy=False)
    m = l64.max(axis=-1, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(l64 - m).sum(axis=-1))
    picked = np.take_along_axis(l64, batch.targets[..., None], axis=-1)[..., 0]
    return float((lse - picked).mean())


# -- checkpoint serialization --------------------------------------------------


def _wire_dtype(config: ModelConfig) -> np.dtype:
    return np.dtype("<f4" if config.dtype == "f32" else "<f8")


def save_checkpoint(store: ParamStore, path) -> None:
    """Header (config + block index) followed by flat little-endian values."""
    header = {
        "config": store.config.to_dict(),
        "init_seed": store.init_seed,
        "blocks": [
            {
                "block_id": b.block_id,
                "kind": b.kind,
                "elem_count": b.elem_count,
                "tensors": [{"name": n, "shape": list(b.shapes[n])} for n in b.names],
            }
            for b in store.blocks
        ],
    }
    raw = json.dumps(header).encode("utf-8")
    wire = _wire_dtype(store.config)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(len(raw).to_bytes(4, "little"))
        f.write(raw)
        for b in store.blocks:
            f.write(np.ascontiguousarray(b.buf, dtype=wire).tobytes())


def load_checkpoint(path) -> ParamStore:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"not a checkpoint file: bad magic {magic!r}")
        hlen = int.from_bytes(f.read(4), "little")
        header = json.loads(f.read(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        store = init_model(config, header.get("init_seed", 0))
        wire = _wire_dtype(config)
        for b, meta in zip(store.blocks, header["blocks"]):
            if meta["elem_count"] != b.elem_count:
                raise ConfigurationError(
                    f"block {b.block_id}: checkpoint has {meta['elem_count']} elements, "
                    f"model expects {b.elem_count}"
                )
            data = np.frombuffer(f.read(b.elem_count * wire.itemsize), dtype=wire)
            b.buf[:] = data.astype(config.np_dtype)
    return store
