"""Transformer-style encoder with entity and relation heads.

Pipeline per sentence::

    [word emb : pos emb] (+ sinusoid) -> Bi-GRU
        -> T x (multi-head self-attention -> Bi-GRU)
        -> entity decoder (previous-label embedding, left to right)
        -> relation scorer over ordered pairs of decoded entities

All tensors are float64 :class:`~logicfusion.autodiff.Tensor` objects so that
the soft-logic layer can backpropagate into every output.
"""
from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import _gru_kernels as _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .corpus import AnnotatedSentence, Vocab, decode_bio

__all__ = [
    "CheckpointError",
    "EncoderConfig",
    "EncoderParams",
    "EncodingResult",
    "bigru",
    "decode_entities",
    "embed",
    "encode",
    "forward",
    "gru_cell",
    "load_checkpoint",
    "load_embeddings",
    "multi_head_attention",
    "positional_encoding",
    "save_checkpoint",
    "score_relations",
]


class CheckpointError(ValueError):
    """Checkpoint does not fit the configuration (names the tensor)."""


@dataclass
class EncoderConfig:
    word_dim: int = 300
    pos_dim: int = 50
    hidden_dim: int = 200
    label_dim: int = 25
    n_heads: int = 10
    n_layers: int = 1
    dropout: float = 0.1
    use_positional_encoding: bool = True

    def __post_init__(self):
        for name in ("word_dim", "pos_dim", "hidden_dim", "label_dim", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_layers < 0:
            raise ValueError("n_layers must be >= 0")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.hidden_dim % 2:
            raise ValueError("hidden_dim must be even (two GRU directions)")

    @property
    def input_dim(self) -> int:
        return self.word_dim + self.pos_dim

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class EncoderParams:
    """Named learnable tensors.

    The label table has one row per entity tag plus a final row used as the
    previous label of the first token.
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name!r}")
        self.tensors[name] = Tensor(value, requires_grad=True, name=name)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.tensors.items()}

    @classmethod
    def initialize(cls, config: EncoderConfig, vocab: Vocab, rng: np.random.Generator) -> "EncoderParams":
        p = cls()
        n_tags = len(vocab.tags)
        n_rel = len(vocab.relations)
        h = config.hidden_dim
        p.add("emb.word", rng.uniform(-0.05, 0.05, size=(len(vocab.words), config.word_dim)))
        p.add("emb.pos", rng.uniform(-0.05, 0.05, size=(len(vocab.pos), config.pos_dim)))
        p.add("emb.label", rng.uniform(-0.05, 0.05, size=(n_tags + 1, config.label_dim)))
        _add_bigru(p, "gru.0", config.input_dim, h, rng)
        for t in range(1, config.n_layers + 1):
            for proj in ("q", "k", "v", "o"):
                p.add(f"attn.{t}.W{proj}", _glorot(rng, h, h))
            _add_bigru(p, f"gru.{t}", h, h, rng)
        p.add("ent.Wh", _glorot(rng, h + config.label_dim, h))
        p.add("ent.bh", np.zeros(h))
        p.add("ent.Wy", _glorot(rng, h, n_tags))
        p.add("ent.by", np.zeros(n_tags))
        rel_in = 2 * (h + config.label_dim) + 2 * config.n_heads
        p.add("rel.Wh", _glorot(rng, rel_in, h))
        p.add("rel.bh", np.zeros(h))
        p.add("rel.Wy", _glorot(rng, h, n_rel))
        p.add("rel.by", np.zeros(n_rel))
        return p

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.tensors.items()}


def _add_bigru(p: EncoderParams, prefix: str, d_in: int, hidden: int, rng: np.random.Generator) -> None:
    half = hidden // 2
    for direction in ("fwd", "bwd"):
        p.add(f"{prefix}.{direction}.W", _glorot(rng, d_in, 3 * half))
        p.add(f"{prefix}.{direction}.U", np.hstack([_orthogonal(rng, half) for _ in range(3)]))
        p.add(f"{prefix}.{direction}.b", np.zeros(3 * half))


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def load_embeddings(params: EncoderParams, vocab: Vocab, path: str | Path) -> int:
    """Overwrite word rows from a whitespace text file ``word v1 v2 ...``.

    Returns the number of rows replaced.
    """
    table = params["emb.word"].data
    found = 0
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.rstrip().split(" ")
            if len(parts) != table.shape[1] + 1:
                continue
            idx = vocab.words.get(parts[0])
            if idx is not None:
                table[idx] = np.array(parts[1:], dtype=np.float64)
                found += 1
    return found


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def positional_encoding(m: int, dim: int) -> np.ndarray:
    """Fixed sinusoid table of shape (m, dim); cached, so treat as read-only."""
    pos = np.arange(m)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.flags.writeable = False
    return table


def embed(
    sentence: AnnotatedSentence,
    vocab: Vocab,
    params: EncoderParams,
    config: EncoderConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """``x_i = [word_i : pos_i]`` (+ positional encoding), shape (m, word+pos)."""
    words = ad.take_rows(params["emb.word"], vocab.word_ids(sentence.tokens))
    tags = ad.take_rows(params["emb.pos"], vocab.pos_ids(sentence.pos_tags))
    x = ad.concat([words, tags], axis=-1)
    if config.use_positional_encoding:
        x = x + positional_encoding(len(sentence), config.input_dim)
    return ad.dropout(x, config.dropout, rng)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


def gru_cell(x: Tensor, h: Tensor, W: Tensor, U: Tensor, b: Tensor) -> Tensor:
    """One GRU step from primitive ops (reference for the fused sequence op).

    Gates are packed ``[reset, update, candidate]`` along the last axis of
    ``W``/``U``/``b``; ``h' = (1 - z) * n + z * h``.
    """
    k = h.shape[-1]
    xw = ad.matmul(x, W) + b
    hu = ad.matmul(h, U)
    r = ad.sigmoid(xw[..., :k] + hu[..., :k])
    z = ad.sigmoid(xw[..., k:2 * k] + hu[..., k:2 * k])
    n = ad.tanh(xw[..., 2 * k:] + r * hu[..., 2 * k:])
    return (1.0 - z) * n + z * h


def _gru_forward(xw: np.ndarray, U: np.ndarray):
    """Run stacked directions. xw: (D, m, 3k) with input projection + bias."""
    hs, rz, n, hun, prev = _kernels.gru_forward(np.ascontiguousarray(xw), np.ascontiguousarray(U))
    return hs, (rz, n, hun, prev)


def _gru_backward(dhs: np.ndarray, U: np.ndarray, cache):
    rz, n, hun, prev = cache
    dxw, dhu = _kernels.gru_backward(np.ascontiguousarray(dhs), U, rz, n, hun, prev)
    dU = np.matmul(np.swapaxes(prev, 1, 2), dhu)
    return dxw, dU


def bigru(x: Tensor, params: EncoderParams, prefix: str) -> Tensor:
    """Bidirectional GRU over rows of ``x``; output (m, hidden).

    Columns ``[:hidden/2]`` hold forward states (position i sees rows 0..i),
    columns ``[hidden/2:]`` backward states (position i sees rows i..m-1).
    Implemented as one fused op with a hand-written backward pass.
    """
    Wf, Uf, bf = params[f"{prefix}.fwd.W"], params[f"{prefix}.fwd.U"], params[f"{prefix}.fwd.b"]
    Wb, Ub, bb = params[f"{prefix}.bwd.W"], params[f"{prefix}.bwd.U"], params[f"{prefix}.bwd.b"]
    X = x.data
    k = Uf.shape[0]
    xw = np.stack([X @ Wf.data + bf.data, (X @ Wb.data + bb.data)[::-1]])
    U = np.stack([Uf.data, Ub.data])
    hs, cache = _gru_forward(xw, U)
    out = np.concatenate([hs[0], hs[1][::-1]], axis=1)

    def bw(g):
        dhs = np.stack([g[:, :k], g[::-1, k:]])
        dxw, dU = _gru_backward(dhs, U, cache)
        dxw_f, dxw_b = dxw[0], dxw[1][::-1]
        dx = dxw_f @ Wf.data.T + dxw_b @ Wb.data.T
        return (
            dx,
            X.T @ dxw_f, dU[0], dxw_f.sum(axis=0),
            X.T @ dxw_b, dU[1], dxw_b.sum(axis=0),
        )

    return Tensor.from_op(out, (x, Wf, Uf, bf, Wb, Ub, bb), bw, "bigru")


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def multi_head_attention(H: Tensor, params: EncoderParams, layer: int, n_heads: int) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention, ``n_heads`` heads mixed by ``Wo``.

    Scores are divided by sqrt of the full hidden size.  Returns the mixed
    states (m, hidden) and the weights (heads, m, m) where
    ``alpha[c, i, j]`` is how much position i attends to j in head c.
    """
    m, hidden = H.shape
    dh = hidden // n_heads

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (m, n_heads, dh)), (1, 0, 2))

    q = heads(H @ params[f"attn.{layer}.Wq"])
    k = heads(H @ params[f"attn.{layer}.Wk"])
    v = heads(H @ params[f"attn.{layer}.Wv"])
    scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(hidden))
    alpha = ad.softmax(scores)
    mixed = ad.matmul(alpha, v)
    merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (m, hidden))
    return merged @ params[f"attn.{layer}.Wo"], alpha


# ---------------------------------------------------------------------------
# full encoder
# ---------------------------------------------------------------------------


def encode(
    sentence: AnnotatedSentence,
    vocab: Vocab,
    params: EncoderParams,
    config: EncoderConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Final hidden states h^T (m, hidden) and the attention stack per layer."""
    x = embed(sentence, vocab, params, config, rng)
    h = ad.dropout(bigru(x, params, "gru.0"), config.dropout, rng)
    alphas = []
    for t in range(1, config.n_layers + 1):
        mixed, alpha = multi_head_attention(h, params, t, config.n_heads)
        mixed = ad.dropout(mixed, config.dropout, rng)
        h = ad.dropout(bigru(mixed, params, f"gru.{t}"), config.dropout, rng)
        alphas.append(alpha)
    return h, alphas


@dataclass
class EncodingResult:
    hidden: Tensor
    attention: list[Tensor]
    entity_logits: Tensor
    entity_probs: Tensor
    pred_tags: np.ndarray
    label_ids: np.ndarray  # tag fed as x^l for each position
    entities: list[tuple[tuple[int, int], str]]
    pairs: list[tuple[tuple[int, int], tuple[int, int]]] = field(default_factory=list)
    relation_logits: Tensor | None = None
    relation_probs: Tensor | None = None

    @property
    def anchors(self) -> list[tuple[int, int]]:
        """Token anchors (last token of each span) for every candidate pair."""
        return [(h[1] - 1, t[1] - 1) for h, t in self.pairs]

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)


def _label_mode(mode) -> float:
    """Probability of feeding the gold previous label."""
    if mode == "gold":
        return 1.0
    if mode == "predicted":
        return 0.0
    if isinstance(mode, tuple) and mode[0] == "scheduled":
        return float(mode[1])
    if isinstance(mode, (int, float)) and not isinstance(mode, bool):
        return float(mode)
    raise ValueError(f"unknown decoding mode {mode!r}")


def decode_entities(
    hidden: Tensor,
    params: EncoderParams,
    n_tags: int,
    mode="predicted",
    gold: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor, np.ndarray, np.ndarray]:
    """Left-to-right entity tagging conditioned on the previous label.

    ``mode`` is ``"gold"``, ``"predicted"`` or ``("scheduled", p)``; with the
    scheduled mode each position's label is the gold one with probability p.
    Returns (logits, probabilities, predicted tag ids, fed label ids).
    """
    p_gold = _label_mode(mode)
    m = hidden.shape[0]
    if p_gold > 0.0 and gold is None:
        raise ValueError("gold labels are required unless mode is 'predicted'")
    if p_gold >= 1.0:
        use_gold = np.ones(m, dtype=bool)
    elif p_gold <= 0.0:
        use_gold = np.zeros(m, dtype=bool)
    else:
        if rng is None:
            raise ValueError("scheduled sampling needs a random generator")
        use_gold = rng.random(m) < p_gold

    Wh, bh, Wy, by = params["ent.Wh"], params["ent.bh"], params["ent.Wy"], params["ent.by"]
    table = params["emb.label"]
    start = n_tags  # last row of the label table
    hdim = hidden.shape[1]

    if use_gold.all():
        fed = np.asarray(gold, dtype=np.intp)
    else:
        # cheap sequential pass to decide which labels get fed forward
        base = hidden.data @ Wh.data[:hdim] + bh.data
        lab = table.data @ Wh.data[hdim:]
        fed = np.empty(m, dtype=np.intp)
        prev = start
        for i in range(m):
            s = np.tanh(base[i] + lab[prev])
            pred = int(np.argmax(s @ Wy.data + by.data))
            fed[i] = gold[i] if use_gold[i] else pred
            prev = fed[i]
    prev_ids = np.concatenate([[start], fed[:-1]]).astype(np.intp)
    features = ad.concat([hidden, ad.take_rows(table, prev_ids)], axis=-1)
    s = ad.tanh(features @ Wh + bh)
    logits = s @ Wy + by
    probs = ad.softmax(logits)
    pred_tags = np.argmax(probs.data, axis=-1)
    return logits, probs, pred_tags, fed


def score_relations(
    hidden: Tensor,
    attention: Sequence[Tensor],
    entities: Sequence[tuple[tuple[int, int], str]],
    label_ids: np.ndarray,
    params: EncoderParams,
    n_heads: int,
) -> tuple[list, Tensor | None, Tensor | None]:
    """Relation distributions for every ordered pair of distinct entities.

    Each entity is anchored at the last token of its span.  Features are
    ``[v_i : v_j : alpha_ij : alpha_ji]`` with ``v_i = [h_i : label_i]`` and
    per-head weights from the last attention layer (zeros when there is no
    attention layer).
    """
    spans = [span for span, _ in entities]
    pairs = [(a, b) for a in spans for b in spans if a != b]
    if not pairs:
        return [], None, None
    I = np.array([a[1] - 1 for a, _ in pairs], dtype=np.intp)
    J = np.array([b[1] - 1 for _, b in pairs], dtype=np.intp)
    v = ad.concat([hidden, ad.take_rows(params["emb.label"], label_ids)], axis=-1)
    parts = [ad.take_rows(v, I), ad.take_rows(v, J)]
    if attention:
        alpha = attention[-1]
        parts.append(ad.transpose(ad.getitem(alpha, (slice(None), I, J)), (1, 0)))
        parts.append(ad.transpose(ad.getitem(alpha, (slice(None), J, I)), (1, 0)))
    else:
        parts.append(Tensor(np.zeros((len(pairs), 2 * n_heads))))
    feats = ad.concat(parts, axis=-1)
    s = ad.tanh(feats @ params["rel.Wh"] + params["rel.bh"])
    logits = s @ params["rel.Wy"] + params["rel.by"]
    return pairs, logits, ad.softmax(logits)


def forward(
    sentence: AnnotatedSentence,
    vocab: Vocab,
    params: EncoderParams,
    config: EncoderConfig,
    mode="predicted",
    rng: np.random.Generator | None = None,
    dropout_rng: np.random.Generator | None = None,
    entities: Sequence[tuple[tuple[int, int], str]] | None = None,
) -> EncodingResult:
    """Full forward pass.  ``dropout_rng=None`` disables dropout.

    Candidate entities are decoded from the predicted tags unless
    ``entities`` is given.
    """
    hidden, alphas = encode(sentence, vocab, params, config, dropout_rng)
    gold = vocab.tag_ids(sentence.entity_labels) if mode != "predicted" else None
    logits, probs, pred, fed = decode_entities(hidden, params, len(vocab.tags), mode, gold, rng)
    tag_names = vocab.tag_list
    if entities is None:
        entities = decode_bio([tag_names[t] for t in pred])
    pairs, rlogits, rprobs = score_relations(hidden, alphas, entities, fed, params, config.n_heads)
    return EncodingResult(hidden, alphas, logits, probs, pred, fed, list(entities), pairs, rlogits, rprobs)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_META = "__meta__"


def save_checkpoint(
    path: str | Path,
    params: EncoderParams,
    config: EncoderConfig,
    vocab: Vocab,
    rule_weights: Sequence[Tensor] = (),
    extra: Mapping | None = None,
) -> None:
    """Named float64 tensors plus a JSON echo of config and vocabulary."""
    arrays = {name: np.ascontiguousarray(t.data, dtype="<f8") for name, t in params.items()}
    for k, w in enumerate(rule_weights):
        arrays[f"rule.{k}.weight_raw"] = np.asarray(w.data, dtype="<f8").reshape(())
    meta = {"config": config.to_dict(), "vocab": vocab.to_dict(), "n_rules": len(rule_weights)}
    if extra:
        meta.update(extra)
    arrays[_META] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(
    path: str | Path, config: EncoderConfig | None = None
) -> tuple[EncoderParams, EncoderConfig, Vocab, list[float], dict]:
    """Load and shape-check a checkpoint.

    Returns (params, config, vocab, raw rule weights, metadata).  When
    ``config`` is given the stored tensors must match the shapes it implies,
    otherwise :class:`CheckpointError` names the first mismatch.
    """
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data[_META]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != _META}
    stored = EncoderConfig(**meta["config"])
    vocab = Vocab.from_dict(meta["vocab"])
    config = config or stored
    expected = EncoderParams.initialize(config, vocab, np.random.default_rng(0)).expected_shapes()
    params = EncoderParams()
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if arrays[name].shape != shape:
            raise CheckpointError(f"tensor {name!r} has shape {arrays[name].shape}, expected {shape}")
        params.add(name, arrays[name])
    n_rules = int(meta.get("n_rules", 0))
    weights = [float(arrays[f"rule.{k}.weight_raw"]) for k in range(n_rules)]
    return params, config, vocab, weights, meta
