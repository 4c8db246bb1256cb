"""Small trainable-then-frozen transformer encoder.

Plays the role of the pre-trained backbone: whitespace tokenizer, learned
token + position embeddings, post-LN transformer blocks with hookable
attention projections, and [CLS] pooling. After the base-task phase the
weights are frozen and every later stage treats them as constants.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_BIAS = -1e30  # additive attention bias for padded keys; exp() underflows to exactly 0

WEIGHTS_FORMAT_VERSION = "leaf-weights-v1"

CLS_ID = 0
PAD_ID = 1
UNK_ID = 2
_RESERVED = {"[CLS]": CLS_ID, "[PAD]": PAD_ID, "[UNK]": UNK_ID}

PROJECTION_TAGS = ("q", "k", "v", "o")


class TokenizeError(ValueError):
    pass


class WeightsFormatError(ValueError):
    pass


@dataclass
class EncoderConfig:
    num_layers: int = 2
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 24
    vocab_size: int = 0
    layernorm_eps: float = 1e-5

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError("model_dim must be divisible by num_heads")
        if self.max_seq_len < 2:
            raise ValueError("max_seq_len must be at least 2")
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class Vocab:
    """Token-to-id map with fixed reserved ids [CLS]=0, [PAD]=1, [UNK]=2."""

    def __init__(self, tokens=()):
        self.token_to_id = dict(_RESERVED)
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.token_to_id)
        return self.token_to_id[token]

    def get(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def to_list(self) -> list[str]:
        inv = {i: t for t, i in self.token_to_id.items()}
        return [inv[i] for i in range(len(inv))]

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocab":
        v = cls()
        for tok in tokens[3:]:
            v.add(tok)
        return v


@dataclass
class SentenceEncoding:
    token_states: Tensor      # [..., seq, d]
    cls: Tensor               # [..., d] = position 0 of the final layer
    attention_mask: np.ndarray


@dataclass
class EncoderWeights:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)
    frozen: bool = False
    base_train_accuracy: float | None = None

    def params(self) -> list[Tensor]:
        return list(self.tensors.values())

    def freeze(self) -> None:
        self.frozen = True
        for t in self.tensors.values():
            t.requires_grad = False
            t.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()


def init_encoder_weights(config: EncoderConfig, rng: np.random.Generator) -> EncoderWeights:
    d, f = config.model_dim, config.ffn_dim
    # Scale-preserving (Glorot) init for all projections: at desk scale the
    # encoder is trained only lightly before freezing, so the initialization
    # itself must propagate sentence content into [CLS] without vanishing.
    w = {}
    w["tok_emb"] = rng.normal(0.0, 1.0 / np.sqrt(d), (config.vocab_size, d))
    w["pos_emb"] = rng.normal(0.0, 1.0 / np.sqrt(d), (config.max_seq_len, d))
    sd_dd = np.sqrt(2.0 / (d + d))
    sd_df = np.sqrt(2.0 / (d + f))
    for l in range(config.num_layers):
        for tag in PROJECTION_TAGS:
            w[f"layer{l}.{tag}.weight"] = rng.normal(0.0, sd_dd, (d, d))
            w[f"layer{l}.{tag}.bias"] = np.zeros(d)
        w[f"layer{l}.ffn1.weight"] = rng.normal(0.0, sd_df, (f, d))
        w[f"layer{l}.ffn1.bias"] = np.zeros(f)
        w[f"layer{l}.ffn2.weight"] = rng.normal(0.0, sd_df, (d, f))
        w[f"layer{l}.ffn2.bias"] = np.zeros(d)
        w[f"layer{l}.ln1.gain"] = np.ones(d)
        w[f"layer{l}.ln1.bias"] = np.zeros(d)
        w[f"layer{l}.ln2.gain"] = np.ones(d)
        w[f"layer{l}.ln2.bias"] = np.zeros(d)
    tensors = {k: Tensor(v, requires_grad=True) for k, v in w.items()}
    return EncoderWeights(config=config, tensors=tensors)


def tokenize(text: str, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Lowercased whitespace tokens -> ids with [CLS] prepended, padded/truncated.

    Returns (ids, mask) arrays of length max_len; mask is 1 for real
    positions ([CLS] included), 0 for padding.
    """
    words = text.lower().split()
    if not words:
        raise TokenizeError("cannot tokenize empty text")
    ids = [CLS_ID] + [vocab.get(w) for w in words]
    ids = ids[:max_len]
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:len(ids)] = 1
    ids = ids + [PAD_ID] * (max_len - len(ids))
    return np.asarray(ids, dtype=np.int64), mask


def _project(x: Tensor, weights: EncoderWeights, layer: int, tag: str,
             lora_delta=None) -> Tensor:
    w = weights.tensors[f"layer{layer}.{tag}.weight"]
    b = weights.tensors[f"layer{layer}.{tag}.bias"]
    out = T.add(T.matmul(x, T.transpose(w)), b)
    if lora_delta is not None:
        delta = lora_delta(x, layer, tag)
        if delta is not None:
            out = T.add(out, delta)
    return out


def _forward(ids: np.ndarray, mask: np.ndarray, weights: EncoderWeights,
             lora_delta=None, embed_noise: np.ndarray | None = None) -> SentenceEncoding:
    """Shared forward; `lora_delta(x, layer, tag) -> Tensor|None` hooks the
    attention projections. ids/mask may carry leading batch dims."""
    cfg = weights.config
    ids = np.asarray(ids, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.int64)
    if ids.max() >= cfg.vocab_size:
        raise ValueError(f"token id {int(ids.max())} >= vocab_size {cfg.vocab_size}")
    squeeze = ids.ndim == 1
    if squeeze:
        ids, mask = ids[None, :], mask[None, :]
    bsz, seq = ids.shape
    h_dim = cfg.model_dim // cfg.num_heads

    x = T.add(T.embedding(weights.tensors["tok_emb"], ids),
              T.embedding(weights.tensors["pos_emb"], np.arange(seq)))
    if embed_noise is not None:
        x = T.add(x, Tensor(embed_noise))
    key_bias = Tensor(np.where(mask[:, None, None, :] == 1, 0.0, MASK_BIAS))

    for l in range(cfg.num_layers):
        q = _project(x, weights, l, "q", lora_delta)
        k = _project(x, weights, l, "k", lora_delta)
        v = _project(x, weights, l, "v", lora_delta)

        def split_heads(t):
            return T.transpose(T.reshape(t, (bsz, seq, cfg.num_heads, h_dim)), (0, 2, 1, 3))

        qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
        scores = T.mul(T.matmul(qh, T.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(h_dim))
        att = T.softmax(T.add(scores, key_bias), axis=-1)
        ctx = T.reshape(T.transpose(T.matmul(att, vh), (0, 2, 1, 3)), (bsz, seq, cfg.model_dim))
        out = _project(ctx, weights, l, "o", lora_delta)
        x = T.layer_norm(T.add(x, out), weights.tensors[f"layer{l}.ln1.gain"],
                         weights.tensors[f"layer{l}.ln1.bias"], cfg.layernorm_eps)
        ff = T.matmul(T.gelu(T.add(T.matmul(x, T.transpose(weights.tensors[f"layer{l}.ffn1.weight"])),
                                   weights.tensors[f"layer{l}.ffn1.bias"])),
                      T.transpose(weights.tensors[f"layer{l}.ffn2.weight"]))
        ff = T.add(ff, weights.tensors[f"layer{l}.ffn2.bias"])
        x = T.layer_norm(T.add(x, ff), weights.tensors[f"layer{l}.ln2.gain"],
                         weights.tensors[f"layer{l}.ln2.bias"], cfg.layernorm_eps)

    cls = T.select_index(x, 0, axis=-2)
    if squeeze:
        x = T.select_index(x, 0, axis=0)
        cls = T.select_index(cls, 0, axis=0)
        mask = mask[0]
    return SentenceEncoding(token_states=x, cls=cls, attention_mask=mask)


def encode_base(ids, mask, weights: EncoderWeights,
                embed_noise: np.ndarray | None = None) -> SentenceEncoding:
    """Forward through the encoder with no expert deltas."""
    return _forward(ids, mask, weights, lora_delta=None, embed_noise=embed_noise)


def encode_with_experts(ids, mask, weights: EncoderWeights, pools, decisions,
                        embed_noise: np.ndarray | None = None,
                        token_topk: int | None = None,
                        combine_mode: str = "softmax") -> SentenceEncoding:
    """Forward with LoRA expert deltas on the adapted projections.

    `decisions` is one RoutingDecision per batch row (instance-level
    routing). When `token_topk` is given, decisions are ignored and
    routing is recomputed per token inside each block.
    """
    from . import moe  # local import to avoid a cycle

    if token_topk is None:
        if decisions is None:
            raise ValueError("instance-level forward requires routing decisions")
        if not isinstance(decisions, (list, tuple)):
            decisions = [decisions]
        ids_arr = np.asarray(ids)
        bsz = 1 if ids_arr.ndim == 1 else ids_arr.shape[0]
        if len(decisions) != bsz:
            raise ValueError(f"got {len(decisions)} routing decisions for batch of {bsz}")
        for key in pools:
            for dec in decisions:
                if key not in dec.entries:
                    raise ValueError(f"routing decision missing pool {key}")
        mix = moe.instance_mix_weights(pools, decisions)

        def lora_delta(x, layer, tag):
            pool = pools.get((layer, tag))
            if pool is None:
                return None
            return moe.pool_delta(pool, x, mix[(layer, tag)], batched=ids_arr.ndim > 1)

        return _forward(ids, mask, weights, lora_delta=lora_delta, embed_noise=embed_noise)

    token_decisions = []

    def lora_delta(x, layer, tag):
        pool = pools.get((layer, tag))
        if pool is None:
            return None
        mix, dec = moe.token_mix_weights(pool, x, token_topk, combine_mode)
        token_decisions.append(dec)
        return moe.pool_delta(pool, x, mix, batched=True, per_token=True)

    ids_arr = np.asarray(ids)
    squeeze = ids_arr.ndim == 1
    enc = _forward(ids_arr[None] if squeeze else ids_arr,
                   np.asarray(mask)[None] if squeeze else mask,
                   weights, lora_delta=lora_delta, embed_noise=embed_noise)
    if squeeze:
        enc = SentenceEncoding(token_states=T.select_index(enc.token_states, 0, axis=0),
                               cls=T.select_index(enc.cls, 0, axis=0),
                               attention_mask=enc.attention_mask[0])
    enc.token_decisions = token_decisions  # type: ignore[attr-defined]
    return enc


def train_base_task(instances, config: EncoderConfig, vocab: Vocab,
                    rng: np.random.Generator, epochs: int = 12,
                    batch_size: int = 16, lr: float = 1e-4,
                    head_lr: float = 1e-2) -> EncoderWeights:
    """Train the encoder plus a throwaway linear head, then freeze.

    `instances` are (text, class_index) pairs with a dense 0-based class
    index local to the base task. The head is discarded. The encoder
    learning rate is deliberately small relative to the head's: light
    fine-tuning keeps the representation general for labels the encoder
    never sees, which everything downstream depends on.
    """
    if not instances:
        raise ValueError("train_base_task needs a non-empty dataset")
    n_classes = max(c for _, c in instances) + 1
    weights = init_encoder_weights(config, rng)
    head_w = Tensor(rng.normal(0.0, 0.02, (n_classes, config.model_dim)), requires_grad=True)
    head_b = Tensor(np.zeros(n_classes), requires_grad=True)
    opt = T.Adam(weights.params(), lr=lr)
    opt_head = T.Adam([head_w, head_b], lr=head_lr)

    encoded = [tokenize(text, vocab, config.max_seq_len) for text, _ in instances]
    labels = np.asarray([c for _, c in instances], dtype=np.int64)
    n = len(instances)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start:start + batch_size]
            ids = np.stack([encoded[i][0] for i in sel])
            mask = np.stack([encoded[i][1] for i in sel])
            enc = encode_base(ids, mask, weights)
            logits = T.add(T.matmul(enc.cls, T.transpose(head_w)), head_b)
            logp = T.log_softmax(logits, axis=-1)
            onehot = np.zeros((len(sel), n_classes))
            onehot[np.arange(len(sel)), labels[sel]] = 1.0
            loss = T.mul(T.tsum(T.mul(logp, Tensor(onehot))), -1.0 / len(sel))
            loss.backward()
            opt.step()
            opt_head.step()
    correct = 0
    with T.no_grad():
        for start in range(0, n, 64):
            ids = np.stack([e[0] for e in encoded[start:start + 64]])
            mask = np.stack([e[1] for e in encoded[start:start + 64]])
            cls = encode_base(ids, mask, weights).cls.data
            pred = (cls @ head_w.data.T + head_b.data).argmax(axis=1)
            correct += int((pred == labels[start:start + 64]).sum())
    weights.freeze()
    weights.base_train_accuracy = correct / n
    return weights


# ---------------------------------------------------------------------------
# weight container ("leaf-weights-v1"): magic + json header + float64 payload


_MAGIC = b"LEAFWT\x00"


def save_tensors(tensors: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    """Write named float64 arrays in the versioned container format."""
    names = sorted(tensors)
    header = {
        "version": WEIGHTS_FORMAT_VERSION,
        "meta": meta or {},
        "shapes": {name: list(np.asarray(tensors[name]).shape) for name in names},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for name in names:
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
            fh.write(arr.astype("<f8").tobytes())


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise WeightsFormatError("not a leaf weight container (bad magic)")
        raw = fh.read(4)
        if len(raw) != 4:
            raise WeightsFormatError("truncated container header")
        (hlen,) = struct.unpack("<I", raw)
        hbytes = fh.read(hlen)
        if len(hbytes) != hlen:
            raise WeightsFormatError("truncated container header")
        try:
            header = json.loads(hbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WeightsFormatError(f"corrupted shape table: {exc}") from exc
        if header.get("version") != WEIGHTS_FORMAT_VERSION:
            raise WeightsFormatError(
                f"unknown container version {header.get('version')!r}, "
                f"expected {WEIGHTS_FORMAT_VERSION!r}")
        out = {}
        for name in sorted(header["shapes"]):
            shape = tuple(header["shapes"][name])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise WeightsFormatError(f"truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    return out, header.get("meta", {})


def save_weights(weights: EncoderWeights, path, vocab: Vocab | None = None,
                 extra_tensors: dict[str, np.ndarray] | None = None,
                 extra_meta: dict | None = None) -> None:
    cfg = weights.config
    meta = {
        "config": {
            "num_layers": cfg.num_layers, "model_dim": cfg.model_dim,
            "num_heads": cfg.num_heads, "ffn_dim": cfg.ffn_dim,
            "max_seq_len": cfg.max_seq_len, "vocab_size": cfg.vocab_size,
            "layernorm_eps": cfg.layernorm_eps,
        },
        "frozen": weights.frozen,
    }
    if vocab is not None:
        meta["vocab"] = vocab.to_list()
    if extra_meta:
        meta.update(extra_meta)
    tensors = {f"encoder/{k}": v.data for k, v in weights.tensors.items()}
    if extra_tensors:
        tensors.update(extra_tensors)
    save_tensors(tensors, path, meta=meta)


def load_weights(path) -> tuple[EncoderWeights, Vocab | None, dict[str, np.ndarray], dict]:
    """Returns (weights, vocab, non-encoder tensors, meta)."""
    arrays, meta = load_tensors(path)
    cfg = EncoderConfig(**meta["config"])
    tensors = {}
    extra = {}
    for name, arr in arrays.items():
        if name.startswith("encoder/"):
            tensors[name[len("encoder/"):]] = Tensor(arr.copy(), requires_grad=True)
        else:
            extra[name] = arr
    weights = EncoderWeights(config=cfg, tensors=tensors)
    if meta.get("frozen"):
        weights.freeze()
    vocab = Vocab.from_list(meta["vocab"]) if "vocab" in meta else None
    return weights, vocab, extra, meta
