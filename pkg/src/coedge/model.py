"""Toy decoder-only transformer with early-exit heads, splittable at a layer boundary.

The model is deliberately small (desk scale) but structurally faithful: a
pre-norm transformer with sinusoidal positions, per-layer KV caches, and one
LM head per exit point plus a final head. Weights are drawn from a
counter-based pseudo-random stream keyed on (seed, tensor name), so
regeneration is bit-identical.

Every forward pass processes sequence positions strictly one at a time. This
keeps the floating-point operation sequence for "logits at position p given
prefix X" identical no matter which deployment path computes it (monolithic,
edge+cloud composition, or stateless recompute), which is what makes greedy
token sequences comparable across paths without tolerance games.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

MODEL_MAGIC = b"CELM"
MODEL_FORMAT_VERSION = 1
POS_SCHEME_SINUSOIDAL = 0
_EOS_NONE_SENTINEL = 0xFFFFFFFF

_LN_EPS = np.float32(1e-5)
_WEIGHT_RANGE = 0.08


class ConfigError(ValueError):
    """Model configuration violates an invariant."""


class ContiguityError(ValueError):
    """New positions are not contiguous with the cache."""


class SequenceOverflowError(ValueError):
    """Operation would exceed max_seq_len."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    max_seq_len: int
    exit_layers: tuple[int, ...]
    split_layer: int
    pos_scheme: int = POS_SCHEME_SINUSOIDAL
    eos_token_id: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "exit_layers", tuple(int(e) for e in self.exit_layers))
        self.validate()

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if not (0 < self.split_layer <= self.num_layers):
            raise ConfigError(
                f"split_layer must be in (0, num_layers]; got {self.split_layer}"
            )
        if self.hidden_dim < 1 or self.hidden_dim % self.num_heads != 0:
            raise ConfigError("hidden_dim must be a positive multiple of num_heads")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be >= 1")
        if self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be >= 1")
        if list(self.exit_layers) != sorted(set(self.exit_layers)):
            raise ConfigError("exit_layers must be strictly increasing")
        for e in self.exit_layers:
            if not (0 < e <= self.split_layer):
                raise ConfigError(
                    f"exit layer {e} outside (0, split_layer={self.split_layer}]"
                )
        if self.pos_scheme != POS_SCHEME_SINUSOIDAL:
            raise ConfigError(f"unknown positional scheme {self.pos_scheme}")
        if self.eos_token_id is not None and not (0 <= self.eos_token_id < self.vocab_size):
            raise ConfigError("eos_token_id out of vocabulary range")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


def default_config() -> ModelConfig:
    """Desk-scale default: byte-level vocab (256 bytes + BOS/EOS/PAD/UNK)."""
    return ModelConfig(
        num_layers=8,
        hidden_dim=256,
        num_heads=4,
        ffn_dim=1024,
        vocab_size=260,
        max_seq_len=1024,
        exit_layers=(2, 4),
        split_layer=4,
        eos_token_id=257,
    )


def _layer_tensor_names(i: int) -> list[str]:
    return [
        f"layer{i}.attn_norm",
        f"layer{i}.wq",
        f"layer{i}.wk",
        f"layer{i}.wv",
        f"layer{i}.wo",
        f"layer{i}.ffn_norm",
        f"layer{i}.w1",
        f"layer{i}.w2",
    ]


def tensor_manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; the file stores tensors in this order."""
    H, F, V = config.hidden_dim, config.ffn_dim, config.vocab_size
    manifest: list[tuple[str, tuple[int, ...]]] = [("embedding", (V, H))]
    for i in range(config.num_layers):
        shapes = [(H,), (H, H), (H, H), (H, H), (H, H), (H,), (H, F), (F, H)]
        manifest.extend(zip(_layer_tensor_names(i), shapes))
    for e in config.exit_layers:
        manifest.append((f"exit{e}.norm", (H,)))
        manifest.append((f"exit{e}.head", (H, V)))
    manifest.append(("final.norm", (H,)))
    manifest.append(("final.head", (H, V)))
    return manifest


def exit_head_tensor_names(config: ModelConfig) -> set[str]:
    return {f"exit{e}.{part}" for e in config.exit_layers for part in ("norm", "head")}


@dataclass
class Model:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    file_hash: bytes = b""
    _pos_table: np.ndarray | None = field(default=None, repr=False)

    def positional_table(self) -> np.ndarray:
        if self._pos_table is None:
            self._pos_table = sinusoidal_table(self.config.max_seq_len, self.config.hidden_dim)
        return self._pos_table

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


@dataclass
class HiddenStateBlock:
    """Activations entering layer `layer` for positions [first_position, first_position+n)."""

    layer: int
    first_position: int
    activations: np.ndarray  # (n, hidden_dim) float32

    @property
    def num_positions(self) -> int:
        return self.activations.shape[0]


@dataclass
class ExitDecision:
    conf: float
    token: int
    exited: bool
    exit_index: int | None


class KVCache:
    """Per-layer K/V rows for a contiguous layer range, preallocated to max_seq_len."""

    def __init__(self, config: ModelConfig, layer_lo: int, layer_hi: int):
        if not (0 <= layer_lo <= layer_hi <= config.num_layers):
            raise ConfigError(f"bad cache layer range [{layer_lo}, {layer_hi})")
        self.config = config
        self.layer_lo = layer_lo
        self.layer_hi = layer_hi
        self.cached_len = 0
        shape = (config.max_seq_len, config.hidden_dim)
        self._k = {li: np.zeros(shape, dtype=np.float32) for li in range(layer_lo, layer_hi)}
        self._v = {li: np.zeros(shape, dtype=np.float32) for li in range(layer_lo, layer_hi)}

    def keys(self, layer: int, upto: int) -> np.ndarray:
        return self._k[layer][:upto]

    def values(self, layer: int, upto: int) -> np.ndarray:
        return self._v[layer][:upto]

    def put_row(self, layer: int, position: int, k: np.ndarray, v: np.ndarray) -> None:
        self._k[layer][position] = k
        self._v[layer][position] = v


def sinusoidal_table(max_seq_len: int, hidden_dim: int) -> np.ndarray:
    """Fixed sinusoidal position encodings, computed in float64 then cast."""
    pos = np.arange(max_seq_len, dtype=np.float64)[:, None]
    dim = np.arange(0, hidden_dim, 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, dim / hidden_dim)
    table = np.zeros((max_seq_len, hidden_dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(np.float32)


# --- weight generation -------------------------------------------------------


def _tensor_rng(seed: int, name: str) -> np.random.Generator:
    # Philox is counter-based: the key is derived from (seed, tensor name) and
    # element i of the stream is addressed by counter position i.
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    key = np.frombuffer(digest[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def build_model(config: ModelConfig, seed: int) -> Model:
    """Materialize deterministic weights; bit-identical for a given (config, seed)."""
    config.validate()
    tensors = {}
    for name, shape in tensor_manifest(config):
        rng = _tensor_rng(seed, name)
        tensors[name] = rng.uniform(-_WEIGHT_RANGE, _WEIGHT_RANGE, size=shape).astype(np.float32)
    model = Model(config=config, tensors=tensors)
    model.file_hash = hashlib.sha256(serialize_model(model)).digest()
    return model


def generate_model(config: ModelConfig, seed: int, path: str) -> bytes:
    """Write the model file; returns its sha256 digest."""
    model = build_model(config, seed)
    data = serialize_model(model)
    with open(path, "wb") as f:
        f.write(data)
    return hashlib.sha256(data).digest()


# --- model file format (documented in PROTOCOL.md) ---------------------------


def _serialize_config(config: ModelConfig) -> bytes:
    eos = _EOS_NONE_SENTINEL if config.eos_token_id is None else config.eos_token_id
    fields = [
        config.num_layers,
        config.hidden_dim,
        config.num_heads,
        config.ffn_dim,
        config.vocab_size,
        config.max_seq_len,
        config.pos_scheme,
        config.split_layer,
        eos,
        len(config.exit_layers),
        *config.exit_layers,
    ]
    return struct.pack(f"<{len(fields)}I", *fields)


def _deserialize_config(buf: io.BytesIO) -> ModelConfig:
    head = struct.unpack("<10I", buf.read(40))
    n_exits = head[9]
    exits = struct.unpack(f"<{n_exits}I", buf.read(4 * n_exits)) if n_exits else ()
    eos = None if head[8] == _EOS_NONE_SENTINEL else head[8]
    return ModelConfig(
        num_layers=head[0],
        hidden_dim=head[1],
        num_heads=head[2],
        ffn_dim=head[3],
        vocab_size=head[4],
        max_seq_len=head[5],
        pos_scheme=head[6],
        split_layer=head[7],
        eos_token_id=eos,
        exit_layers=exits,
    )


def serialize_model(model: Model) -> bytes:
    out = io.BytesIO()
    out.write(MODEL_MAGIC)
    out.write(struct.pack("<H", MODEL_FORMAT_VERSION))
    out.write(_serialize_config(model.config))
    manifest = tensor_manifest(model.config)
    for name, shape in manifest:
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<B", len(shape)))
        out.write(struct.pack(f"<{len(shape)}I", *shape))
    for name, shape in manifest:
        tensor = model.tensors[name]
        if tuple(tensor.shape) != shape:
            raise ConfigError(f"tensor {name} has shape {tensor.shape}, expected {shape}")
        out.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
    return out.getvalue()


def load_model(path: str) -> Model:
    with open(path, "rb") as f:
        data = f.read()
    return deserialize_model(data)


def deserialize_model(data: bytes) -> Model:
    buf = io.BytesIO(data)
    if buf.read(4) != MODEL_MAGIC:
        raise ConfigError("not a model file (bad magic)")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != MODEL_FORMAT_VERSION:
        raise ConfigError(f"unsupported model format version {version}")
    config = _deserialize_config(buf)
    manifest = []
    for _ in range(len(tensor_manifest(config))):
        (name_len,) = struct.unpack("<H", buf.read(2))
        name = buf.read(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{rank}I", buf.read(4 * rank))
        manifest.append((name, shape))
    tensors = {}
    for name, shape in manifest:
        count = int(np.prod(shape)) if shape else 1
        raw = buf.read(4 * count)
        if len(raw) != 4 * count:
            raise ConfigError(f"model file truncated reading tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if buf.read(1):
        raise ConfigError("trailing bytes after tensor data")
    model = Model(config=config, tensors=tensors)
    model.file_hash = hashlib.sha256(data).digest()
    return model


# --- forward computation ------------------------------------------------------


def _layer_norm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    mean = x.mean(dtype=np.float32)
    centered = x - mean
    var = np.mean(centered * centered, dtype=np.float32)
    return (centered / np.sqrt(var + _LN_EPS)) * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    c = np.float32(0.7978845608028654)  # sqrt(2/pi)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def _attend(q: np.ndarray, keys: np.ndarray, values: np.ndarray, num_heads: int) -> np.ndarray:
    """Single-position attention over the cached context (causality is implicit:
    the cache only holds rows up to and including this position)."""
    H = q.shape[0]
    hd = H // num_heads
    scale = np.float32(1.0 / math.sqrt(hd))
    out = np.empty(H, dtype=np.float32)
    for h in range(num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = (keys[:, sl] @ q[sl]) * scale
        scores -= scores.max()
        weights = np.exp(scores)
        weights /= weights.sum(dtype=np.float32)
        out[sl] = weights @ values[:, sl]
    return out


def _step_layers(
    model: Model,
    layer_lo: int,
    layer_hi: int,
    x: np.ndarray,
    position: int,
    cache: KVCache,
) -> np.ndarray:
    """Advance one position's activation from layer_lo to layer_hi, extending the cache."""
    t = model.tensors
    for li in range(layer_lo, layer_hi):
        xn = _layer_norm(x, t[f"layer{li}.attn_norm"])
        k = xn @ t[f"layer{li}.wk"]
        v = xn @ t[f"layer{li}.wv"]
        q = xn @ t[f"layer{li}.wq"]
        cache.put_row(li, position, k, v)
        ctx = position + 1
        attn = _attend(q, cache.keys(li, ctx), cache.values(li, ctx), model.config.num_heads)
        x = x + attn @ t[f"layer{li}.wo"]
        hn = _layer_norm(x, t[f"layer{li}.ffn_norm"])
        x = x + _gelu(hn @ t[f"layer{li}.w1"]) @ t[f"layer{li}.w2"]
    return x


def step_position(
    model: Model,
    layer_lo: int,
    layer_hi: int,
    x: np.ndarray,
    position: int,
    cache: KVCache,
) -> np.ndarray:
    """One position through layers [lo, hi); caller manages cache.cached_len.

    Used by the edge loop to pause at exit boundaries mid-stack. The per-layer
    arithmetic is identical to forward_layers, so segmented and whole-range
    execution produce bit-identical activations.
    """
    return _step_layers(model, layer_lo, layer_hi, x, position, cache)


def embed(model: Model, tokens: list[int], first_position: int) -> HiddenStateBlock:
    cfg = model.config
    if first_position + len(tokens) > cfg.max_seq_len:
        raise SequenceOverflowError(
            f"positions [{first_position}, {first_position + len(tokens)}) exceed max_seq_len {cfg.max_seq_len}"
        )
    for tok in tokens:
        if not (0 <= tok < cfg.vocab_size):
            raise ConfigError(f"token id {tok} outside vocabulary of size {cfg.vocab_size}")
    table = model.positional_table()
    emb = model.tensors["embedding"]
    acts = np.stack(
        [emb[tok] + table[first_position + i] for i, tok in enumerate(tokens)]
    ).astype(np.float32, copy=False)
    return HiddenStateBlock(layer=0, first_position=first_position, activations=acts)


def forward_layers(
    model: Model,
    layer_range: tuple[int, int],
    block: HiddenStateBlock,
    cache: KVCache,
) -> HiddenStateBlock:
    """Run layers [lo, hi) over the block, position by position, extending the cache.

    Requires cache.cached_len == block.first_position (contiguous append).
    An empty layer range returns the input unchanged.
    """
    lo, hi = layer_range
    cfg = model.config
    if not (0 <= lo <= hi <= cfg.num_layers):
        raise ConfigError(f"layer range [{lo}, {hi}) out of bounds")
    if lo == hi:
        return block
    if not (cache.layer_lo <= lo and hi <= cache.layer_hi):
        raise ConfigError("cache does not cover the requested layer range")
    if cache.cached_len != block.first_position:
        raise ContiguityError(
            f"cache length {cache.cached_len} != block first_position {block.first_position}"
        )
    if block.first_position + block.num_positions > cfg.max_seq_len:
        raise SequenceOverflowError("block exceeds max_seq_len")
    n = block.num_positions
    out = np.empty_like(block.activations)
    for i in range(n):
        pos = block.first_position + i
        out[i] = _step_layers(model, lo, hi, block.activations[i], pos, cache)
    cache.cached_len = block.first_position + n
    return HiddenStateBlock(layer=hi, first_position=block.first_position, activations=out)


def exit_head(model: Model, exit_boundary: int, activation: np.ndarray) -> np.ndarray:
    """Logits from the exit at layer boundary `exit_boundary` for one position."""
    if exit_boundary not in model.config.exit_layers:
        raise ConfigError(f"no exit at layer boundary {exit_boundary}")
    xn = _layer_norm(activation, model.tensors[f"exit{exit_boundary}.norm"])
    return xn @ model.tensors[f"exit{exit_boundary}.head"]


def final_head(model: Model, activation: np.ndarray) -> np.ndarray:
    xn = _layer_norm(activation, model.tensors["final.norm"])
    return xn @ model.tensors["final.head"]


def confidence(logits: np.ndarray) -> tuple[float, int]:
    """Max softmax probability and argmax token (ties broken toward the lowest id).

    Computed with max-subtraction in float64 for stability.
    """
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise ValueError("logits must be a non-empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logit")
    token = int(np.argmax(z))
    shifted = z - z[token]
    conf = 1.0 / np.exp(shifted).sum()
    # the exact value is < 1 for finite logits; keep that true under rounding
    conf = min(float(conf), float(np.nextafter(1.0, 0.0)))
    return conf, token


def make_exit_decision(logits: np.ndarray, theta: float, exit_index: int | None) -> ExitDecision:
    conf, token = confidence(logits)
    exited = conf >= theta
    return ExitDecision(conf=conf, token=token, exited=exited, exit_index=exit_index if exited else None)


# --- partitioning -------------------------------------------------------------


@dataclass
class Partition:
    """A view over a model's tensors restricted to one side of the split."""

    model: Model
    role: str  # "edge" | "cloud"
    layer_lo: int
    layer_hi: int
    tensor_names: frozenset[str]


def split(model: Model, k: int | None = None) -> tuple[Partition, Partition]:
    """Edge partition: embedding, layers [0,k), exit heads. Cloud: layers [k,L), final head."""
    cfg = model.config
    k = cfg.split_layer if k is None else k
    if not (0 < k <= cfg.num_layers):
        raise ConfigError(f"split layer {k} out of range")
    edge_names = {"embedding"}
    for i in range(k):
        edge_names.update(_layer_tensor_names(i))
    edge_names |= exit_head_tensor_names(cfg)
    cloud_names = {"final.norm", "final.head"}
    for i in range(k, cfg.num_layers):
        cloud_names.update(_layer_tensor_names(i))
    edge = Partition(model=model, role="edge", layer_lo=0, layer_hi=k, tensor_names=frozenset(edge_names))
    cloud = Partition(model=model, role="cloud", layer_lo=k, layer_hi=cfg.num_layers, tensor_names=frozenset(cloud_names))
    return edge, cloud


# --- monolithic greedy decoding (the correctness oracle) ----------------------


def greedy_decode_monolithic(model: Model, prompt: list[int], max_new_tokens: int) -> list[int]:
    """Full-model argmax decoding; stops at EOS (if configured) or max_new_tokens."""
    cfg = model.config
    if not prompt:
        raise ValueError("prompt must be non-empty")
    if len(prompt) + max_new_tokens > cfg.max_seq_len:
        raise SequenceOverflowError(
            f"prompt {len(prompt)} + max_new {max_new_tokens} exceeds max_seq_len {cfg.max_seq_len}"
        )
    if max_new_tokens == 0:
        return []
    cache = KVCache(cfg, 0, cfg.num_layers)
    block = embed(model, prompt, 0)
    block = forward_layers(model, (0, cfg.num_layers), block, cache)
    logits = final_head(model, block.activations[-1])
    generated: list[int] = []
    for _ in range(max_new_tokens):
        _, token = confidence(logits)
        generated.append(token)
        if cfg.eos_token_id is not None and token == cfg.eos_token_id:
            break
        if len(generated) == max_new_tokens:
            break
        pos = len(prompt) + len(generated) - 1
        block = embed(model, [token], pos)
        block = forward_layers(model, (0, cfg.num_layers), block, cache)
        logits = final_head(model, block.activations[-1])
    return generated


def tiny_config(**overrides) -> ModelConfig:
    """Small configuration for fast tests; override any field."""
    base = dict(
        num_layers=3,
        hidden_dim=32,
        num_heads=2,
        ffn_dim=64,
        vocab_size=50,
        max_seq_len=64,
        exit_layers=(1, 2),
        split_layer=2,
        eos_token_id=None,
    )
    base.update(overrides)
    return ModelConfig(**base)
