"""Encoder architectures (transformer, BiLSTM, CNN) with task heads.

Edge-sized models back the source and target task models; the pivot is a
larger shared-vocabulary transformer with a masked-token head, pretrained
in-repo to stand in for an off-the-shelf multilingual encoder. Sentence
pooling follows the family convention: transformer reads position 0 (the
prepended sentence-start token), BiLSTM reads the last word, CNN concatenates
max-pooled kernel outputs. Word-level outputs are emitted at each word's
first subword position.
"""
from __future__ import annotations

import base64
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import bpe
from . import numeric as nm
from .numeric import Tensor

FAMILIES = ("transformer", "bilstm", "cnn")
NEG_INF = -1e9


class ModelError(ValueError):
    pass


class SequenceTooLongError(ModelError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    family: str
    vocab_size: int
    sentence_labels: tuple[str, ...] = ()
    word_labels: tuple[str, ...] = ()
    head: str = "sentence"  # sentence | word | both
    embed: int = 64
    hidden: int = 64
    layers: int = 2
    dropout: float = 0.1
    size_class: str = "edge"  # edge | pivot
    max_len: int = 64
    n_heads: int = 4
    ffn_mult: int = 2
    kernel_sizes: tuple[int, ...] = (3, 4, 5)
    dilations: tuple[int, ...] = (1, 2)
    mlm_head: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ModelError(f"unknown model family {self.family!r}")
        if self.head not in ("sentence", "word", "both"):
            raise ModelError(f"unknown head type {self.head!r}")
        if self.family == "transformer":
            if self.embed != self.hidden:
                raise ModelError("transformer requires embed == hidden")
            if self.hidden % self.n_heads:
                raise ModelError("transformer hidden must divide by n_heads")

    @property
    def needs_bos(self) -> bool:
        return self.family == "transformer"

    def to_doc(self) -> dict:
        doc = dataclasses.asdict(self)
        for key in ("sentence_labels", "word_labels", "kernel_sizes", "dilations"):
            doc[key] = list(doc[key])
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "ArchConfig":
        doc = dict(doc)
        for key in ("sentence_labels", "word_labels", "kernel_sizes", "dilations"):
            doc[key] = tuple(doc[key])
        return cls(**doc)


# hidden sizes tuned so edge families sit within +-15% of one another
_EDGE_HIDDEN = {
    ("transformer", "sentence"): 64, ("transformer", "word"): 64,
    ("bilstm", "sentence"): 40, ("bilstm", "word"): 40,
    ("cnn", "sentence"): 35, ("cnn", "word"): 124,
}

_PIVOT_DIMS = {  # embed/hidden, layers
    "small": (64, 2),
    "base": (96, 3),
    "large": (128, 4),
}


def edge_config(family: str, vocab_size: int, sentence_labels=(), word_labels=(),
                head: str = "sentence", dropout: float = 0.1) -> ArchConfig:
    hidden = _EDGE_HIDDEN[(family, "word" if head == "word" else "sentence")]
    return ArchConfig(family=family, vocab_size=vocab_size,
                      sentence_labels=tuple(sentence_labels),
                      word_labels=tuple(word_labels), head=head,
                      embed=64 if family != "transformer" else hidden,
                      hidden=hidden, layers=2, dropout=dropout)


def pivot_config(vocab_size: int, sentence_labels=(), word_labels=(),
                 size: str = "base", dropout: float = 0.1) -> ArchConfig:
    width, layers = _PIVOT_DIMS[size]
    return ArchConfig(family="transformer", vocab_size=vocab_size,
                      sentence_labels=tuple(sentence_labels),
                      word_labels=tuple(word_labels), head="both",
                      embed=width, hidden=width, layers=layers,
                      dropout=dropout, size_class="pivot", mlm_head=True,
                      max_len=128)  # room for paired bilingual documents


# ---- parameter construction -------------------------------------------------

def _param_specs(config: ArchConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init) triples; init is uniform | zeros | ones."""
    e, h, v = config.embed, config.hidden, config.vocab_size
    specs: list[tuple[str, tuple[int, ...], str]] = [("emb.tok", (v, e), "uniform")]
    if config.family == "transformer":
        specs += [("emb.pos", (config.max_len, e), "uniform"),
                  ("emb.ln.g", (e,), "ones"), ("emb.ln.b", (e,), "zeros")]
        f = h * config.ffn_mult
        for i in range(config.layers):
            p = f"enc{i}."
            for mat in ("wq", "wk", "wv", "wo"):
                specs += [(p + "attn." + mat, (h, h), "uniform"),
                          (p + "attn." + mat + "_b", (h,), "zeros")]
            specs += [(p + "ln1.g", (h,), "ones"), (p + "ln1.b", (h,), "zeros"),
                      (p + "ffn.w1", (h, f), "uniform"), (p + "ffn.b1", (f,), "zeros"),
                      (p + "ffn.w2", (f, h), "uniform"), (p + "ffn.b2", (h,), "zeros"),
                      (p + "ln2.g", (h,), "ones"), (p + "ln2.b", (h,), "zeros")]
        out_dim = h
    elif config.family == "bilstm":
        for i in range(config.layers):
            in_dim = e if i == 0 else 2 * h
            for d in ("fwd", "bwd"):
                p = f"lstm{i}.{d}."
                specs += [(p + "wx", (in_dim, 4 * h), "uniform"),
                          (p + "wh", (h, 4 * h), "uniform"),
                          (p + "b", (4 * h,), "zeros")]
        out_dim = 2 * h
    else:  # cnn
        if config.head in ("sentence", "both"):
            in_dim = e
            for i in range(config.layers):
                for k in config.kernel_sizes:
                    specs += [(f"conv{i}.k{k}.w", (k, in_dim, h), "uniform"),
                              (f"conv{i}.k{k}.b", (h,), "zeros")]
                in_dim = h * len(config.kernel_sizes)
        if config.head in ("word", "both"):
            in_dim = e
            for i in range(config.layers):
                d = config.dilations[i % len(config.dilations)]
                specs += [(f"dconv{i}.d{d}.w", (3, in_dim, h), "uniform"),
                          (f"dconv{i}.d{d}.b", (h,), "zeros")]
                in_dim = h
        out_dim = h * len(config.kernel_sizes)
    if config.head in ("sentence", "both"):
        k = max(1, len(config.sentence_labels))
        sent_in = out_dim if config.family != "bilstm" else 2 * h
        specs += [("head.sent.w", (sent_in, k), "uniform"),
                  ("head.sent.b", (k,), "zeros")]
    if config.head in ("word", "both"):
        k = max(1, len(config.word_labels))
        word_in = {"transformer": h, "bilstm": 2 * h, "cnn": h}[config.family]
        specs += [("head.word.w", (word_in, k), "uniform"),
                  ("head.word.b", (k,), "zeros")]
    if config.mlm_head:
        specs += [("head.mlm.w", (h, v), "uniform"), ("head.mlm.b", (v,), "zeros")]
    return specs


class EncoderModel:
    """Architecture config plus a flat, name-keyed parameter store."""

    def __init__(self, config: ArchConfig, params: dict[str, Tensor],
                 vocab_hash: str = ""):
        self.config = config
        self.params = params
        self.vocab_hash = vocab_hash
        self.train_mode = False
        self.rng: np.random.Generator | None = None

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def n_params(self) -> int:
        return sum(p.values.size for p in self.params.values())

    def train(self, rng: np.random.Generator) -> None:
        self.train_mode = True
        self.rng = rng

    def eval(self) -> None:
        self.train_mode = False
        self.rng = None

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def clone(self) -> "EncoderModel":
        params = {k: Tensor(v.values.copy(), requires_grad=True)
                  for k, v in self.params.items()}
        return EncoderModel(self.config, params, self.vocab_hash)

    def param_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].values).tobytes())
        return digest.hexdigest()


def build(config: ArchConfig, seed: int, vocab_hash: str = "") -> EncoderModel:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, init in _param_specs(config):
        if init == "uniform":
            values = rng.uniform(-0.08, 0.08, size=shape)
        elif init == "zeros":
            values = np.zeros(shape)
        else:
            values = np.ones(shape)
        params[name] = Tensor(values, requires_grad=True)
    return EncoderModel(config, params, vocab_hash)


def param_count(config: ArchConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape, _ in _param_specs(config))


# ---- batching ----------------------------------------------------------------

@dataclass
class Batch:
    ids: np.ndarray       # (B, T) subword ids, padded
    mask: np.ndarray      # (B, T) 1.0 at real positions
    lengths: np.ndarray   # (B,) real subword lengths
    word_idx: np.ndarray  # (B, W) first-subword positions, padded with 0
    word_mask: np.ndarray # (B, W) 1.0 at real words
    ex_ids: tuple[str, ...] = ()

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def make_batch(toks: Sequence[bpe.Tokenization], pad_id: int,
               ex_ids: Sequence[str] = ()) -> Batch:
    n = len(toks)
    t_max = max(len(t) for t in toks)
    w_max = max(t.n_words for t in toks)
    ids = np.full((n, t_max), pad_id, dtype=np.int64)
    mask = np.zeros((n, t_max), dtype=np.float64)
    lengths = np.zeros(n, dtype=np.int64)
    word_idx = np.zeros((n, w_max), dtype=np.int64)
    word_mask = np.zeros((n, w_max), dtype=np.float64)
    for i, tok in enumerate(toks):
        ids[i, :len(tok)] = tok.ids
        mask[i, :len(tok)] = 1.0
        lengths[i] = len(tok)
        firsts = tok.first_subwords
        word_idx[i, :len(firsts)] = firsts
        word_mask[i, :len(firsts)] = 1.0
    return Batch(ids=ids, mask=mask, lengths=lengths, word_idx=word_idx,
                 word_mask=word_mask, ex_ids=tuple(ex_ids))


def _const(values: np.ndarray) -> Tensor:
    return Tensor(values)


# ---- family forwards -----------------------------------------------------------

def _dropout(model: EncoderModel, x: Tensor) -> Tensor:
    return nm.dropout(x, model.config.dropout, model.rng, model.train_mode)


def _transformer_states(model: EncoderModel, batch: Batch) -> Tensor:
    cfg = model.config
    p = model.params
    n, t = batch.ids.shape
    if t > cfg.max_len:
        raise SequenceTooLongError(
            f"sequence length {t} exceeds positional table {cfg.max_len}")
    x = nm.embedding(p["emb.tok"], batch.ids) + nm.embedding(p["emb.pos"], np.arange(t))
    x = nm.layer_norm(x, p["emb.ln.g"], p["emb.ln.b"])
    x = _dropout(model, x)
    dh = cfg.hidden // cfg.n_heads
    attn_bias = _const(((1.0 - batch.mask) * NEG_INF)[:, None, None, :])
    scale = 1.0 / math.sqrt(dh)
    for i in range(cfg.layers):
        pre = f"enc{i}."

        def heads(name):
            y = x @ p[pre + "attn." + name] + p[pre + "attn." + name + "_b"]
            return nm.transpose(y.reshape((n, t, cfg.n_heads, dh)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = (q @ nm.transpose(k, (0, 1, 3, 2))) * scale + attn_bias
        ctx = nm.softmax(scores, axis=-1) @ v
        ctx = nm.transpose(ctx, (0, 2, 1, 3)).reshape((n, t, cfg.hidden))
        ctx = ctx @ p[pre + "attn.wo"] + p[pre + "attn.wo_b"]
        x = nm.layer_norm(x + _dropout(model, ctx), p[pre + "ln1.g"], p[pre + "ln1.b"])
        ff = nm.relu(x @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"])
        ff = ff @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        x = nm.layer_norm(x + _dropout(model, ff), p[pre + "ln2.g"], p[pre + "ln2.b"])
    return x


def _lstm_direction(model: EncoderModel, x: Tensor, batch: Batch, layer: int,
                    direction: str) -> Tensor:
    cfg = model.config
    p = model.params
    n, t = batch.ids.shape
    h_dim = cfg.hidden
    prefix = f"lstm{layer}.{direction}."
    if direction == "bwd":
        # reverse each sequence inside its true length; identity on padding
        steps = np.arange(t)[None, :]
        rev = np.where(steps < batch.lengths[:, None],
                       batch.lengths[:, None] - 1 - steps, steps)
        x = nm.gather_rows(x, rev)
    gates_in = x @ p[prefix + "wx"] + p[prefix + "b"]
    h = _const(np.zeros((n, h_dim)))
    c = _const(np.zeros((n, h_dim)))
    outs = []
    for step in range(t):
        g = nm.narrow(gates_in, 1, step, 1).reshape((n, 4 * h_dim)) + h @ p[prefix + "wh"]
        i_g = nm.sigmoid(nm.narrow(g, 1, 0, h_dim))
        f_g = nm.sigmoid(nm.narrow(g, 1, h_dim, h_dim))
        c_hat = nm.tanh(nm.narrow(g, 1, 2 * h_dim, h_dim))
        o_g = nm.sigmoid(nm.narrow(g, 1, 3 * h_dim, h_dim))
        c = f_g * c + i_g * c_hat
        h = o_g * nm.tanh(c)
        outs.append(h.reshape((n, 1, h_dim)))
    seq = nm.concat(outs, axis=1)
    if direction == "bwd":
        seq = nm.gather_rows(seq, rev)
    return seq


def _bilstm_states(model: EncoderModel, batch: Batch) -> Tensor:
    x = nm.embedding(model.params["emb.tok"], batch.ids)
    x = _dropout(model, x)
    for layer in range(model.config.layers):
        fwd = _lstm_direction(model, x, batch, layer, "fwd")
        bwd = _lstm_direction(model, x, batch, layer, "bwd")
        x = nm.concat([fwd, bwd], axis=-1)
        if layer + 1 < model.config.layers:
            x = _dropout(model, x)
    return x


def _masked_embeddings(model: EncoderModel, batch: Batch) -> Tensor:
    x = nm.embedding(model.params["emb.tok"], batch.ids)
    x = x * _const(batch.mask[:, :, None])
    return _dropout(model, x)


def _cnn_sentence_rep(model: EncoderModel, batch: Batch) -> Tensor:
    cfg = model.config
    x = _masked_embeddings(model, batch)
    for i in range(cfg.layers):
        outs = [nm.conv1d(x, model.params[f"conv{i}.k{k}.w"]) + model.params[f"conv{i}.k{k}.b"]
                for k in cfg.kernel_sizes]
        x = nm.relu(nm.concat(outs, axis=-1))
        x = _dropout(model, x)
    x = x + _const(((batch.mask - 1.0) * -NEG_INF)[:, :, None])
    return nm.max_over_time(x)


def _cnn_word_states(model: EncoderModel, batch: Batch) -> Tensor:
    cfg = model.config
    x = _masked_embeddings(model, batch)
    for i in range(cfg.layers):
        d = cfg.dilations[i % len(cfg.dilations)]
        x = nm.relu(nm.conv1d(x, model.params[f"dconv{i}.d{d}.w"], dilation=d)
                    + model.params[f"dconv{i}.d{d}.b"])
        x = _dropout(model, x)
    return x


def encoder_states(model: EncoderModel, batch: Batch) -> Tensor:
    family = model.config.family
    if family == "transformer":
        return _transformer_states(model, batch)
    if family == "bilstm":
        return _bilstm_states(model, batch)
    return _cnn_word_states(model, batch)


def sentence_logits(model: EncoderModel, batch: Batch) -> Tensor:
    cfg = model.config
    if cfg.head == "word":
        raise ModelError("model has no sentence head")
    n = batch.size
    if cfg.family == "cnn":
        rep = _cnn_sentence_rep(model, batch)
    else:
        states = encoder_states(model, batch)
        if cfg.family == "transformer":
            pool_idx = np.zeros((n, 1), dtype=np.int64)
        else:  # bilstm: last word's representation
            pool_idx = (batch.lengths - 1)[:, None]
        rep = nm.gather_rows(states, pool_idx).reshape((n, states.shape[-1]))
    return rep @ model.params["head.sent.w"] + model.params["head.sent.b"]


def word_logits(model: EncoderModel, batch: Batch) -> Tensor:
    cfg = model.config
    if cfg.head == "sentence":
        raise ModelError("model has no word head")
    states = encoder_states(model, batch)
    picked = nm.gather_rows(states, batch.word_idx)
    return picked @ model.params["head.word.w"] + model.params["head.word.b"]


def mlm_logits(model: EncoderModel, batch: Batch, positions: np.ndarray) -> Tensor:
    if not model.config.mlm_head:
        raise ModelError("model has no masked-token head")
    states = encoder_states(model, batch)
    picked = nm.gather_rows(states, positions)
    return picked @ model.params["head.mlm.w"] + model.params["head.mlm.b"]


# ---- prediction -----------------------------------------------------------------

@dataclass
class PredictionSet:
    """Per-example class distributions over a fixed category set."""
    task: str  # sentence | word
    ids: tuple[str, ...]
    labels: tuple[str, ...]
    probs: list[np.ndarray] = field(repr=False)  # (K,) or (W, K) per example

    def validate(self) -> None:
        for ex_id, p in zip(self.ids, self.probs):
            rows = p if p.ndim == 2 else p[None, :]
            if rows.shape[-1] != len(self.labels) or (rows < 0).any():
                raise ModelError(f"{ex_id}: malformed probability rows")
            if np.abs(rows.sum(axis=-1) - 1.0).max() > 1e-5:
                raise ModelError(f"{ex_id}: probabilities do not sum to 1")

    def argmax(self) -> list:
        if self.task == "sentence":
            return [self.labels[int(p.argmax())] for p in self.probs]
        return [[self.labels[int(i)] for i in p.argmax(axis=-1)] for p in self.probs]


def tokenize_corpus(vocab: bpe.SubwordVocab, corpus, needs_bos: bool):
    return [bpe.encode(vocab, h.words, bos=needs_bos) for h in corpus]


def predict(model: EncoderModel, vocab: bpe.SubwordVocab, corpus, task: str,
            batch_size: int = 64) -> PredictionSet:
    """Eval-mode forward over a corpus; emits one distribution per example
    (sentence task) or one per word at its first subword (word task)."""
    if model.vocab_hash and model.vocab_hash != vocab.content_hash():
        raise ModelError("vocabulary does not match the one the model was built with")
    model.eval()
    handles = list(corpus)
    toks = tokenize_corpus(vocab, handles, model.config.needs_bos)
    labels = model.config.sentence_labels if task == "sentence" else model.config.word_labels
    probs: list[np.ndarray] = []
    for lo in range(0, len(handles), batch_size):
        chunk = toks[lo:lo + batch_size]
        batch = make_batch(chunk, vocab.pad_id)
        if task == "sentence":
            out = nm.softmax(sentence_logits(model, batch), axis=-1).values
            probs.extend(np.array(row) for row in out)
        else:
            out = nm.softmax(word_logits(model, batch), axis=-1).values
            for i, tok in enumerate(chunk):
                probs.append(np.array(out[i, :tok.n_words]))
    pred = PredictionSet(task=task, ids=tuple(h.id for h in handles),
                         labels=tuple(labels), probs=probs)
    pred.validate()
    return pred


# ---- masked-token pretraining ------------------------------------------------

def _mask_positions(tok: bpe.Tokenization, rng: np.random.Generator) -> list[int]:
    eligible = list(range(1 if tok.bos else 0, len(tok)))
    n = max(1, int(round(0.15 * len(eligible))))
    picked = rng.choice(len(eligible), size=n, replace=False)
    return [eligible[i] for i in sorted(picked)]


def masked_token_loss(model: EncoderModel, vocab: bpe.SubwordVocab,
                      word_seqs: Sequence[Sequence[str]],
                      rng: np.random.Generator) -> Tensor:
    """Mask 15% of subwords and score cross-entropy on recovering them."""
    toks = [bpe.encode(vocab, ws, bos=model.config.needs_bos) for ws in word_seqs]
    masked_ids, positions, targets = [], [], []
    for tok in toks:
        pos = _mask_positions(tok, rng)
        ids = list(tok.ids)
        targets.append([ids[p] for p in pos])
        for p in pos:
            ids[p] = vocab.mask_id
        masked_ids.append(bpe.Tokenization(ids=tuple(ids), spans=tok.spans, bos=tok.bos))
        positions.append(pos)
    batch = make_batch(masked_ids, vocab.pad_id)
    m_max = max(len(p) for p in positions)
    pos_arr = np.zeros((len(toks), m_max), dtype=np.int64)
    tgt_arr = np.zeros((len(toks), m_max), dtype=np.int64)
    weights = np.zeros((len(toks), m_max))
    for i, (pos, tgt) in enumerate(zip(positions, targets)):
        pos_arr[i, :len(pos)] = pos
        tgt_arr[i, :len(tgt)] = tgt
        weights[i, :len(pos)] = 1.0
    log_probs = nm.log_softmax(mlm_logits(model, batch, pos_arr), axis=-1)
    nll = -nm.gather_classes(log_probs, tgt_arr)
    w = _const(weights)
    return (nll * w).sum() / w.sum()


def pivot_pretrain(config: ArchConfig, corpora: Iterable, steps: int, seed: int,
                   vocab: bpe.SubwordVocab, batch_size: int = 32,
                   lr: float = 2e-3) -> tuple[EncoderModel, list[float]]:
    """Masked-token pretraining over unlabeled multilingual text. Returns the
    model and the per-step loss curve."""
    from .train import TrainSettings, AdamWState, adamw_step, collect_grads

    pool = [tuple(h.words) for corpus in corpora for h in corpus]
    if not pool:
        raise ModelError("pivot_pretrain: empty corpus pool")
    model = build(config, seed=stable_int(seed, "pivot-init"),
                  vocab_hash=vocab.content_hash())
    settings = TrainSettings(lr=lr, seed=seed)
    state = AdamWState()
    rng = np.random.default_rng(stable_int(seed, "pivot-mask"))
    order_rng = np.random.default_rng(stable_int(seed, "pivot-order"))
    model.train(np.random.default_rng(stable_int(seed, "pivot-dropout")))
    losses: list[float] = []
    for _ in range(steps):
        picks = order_rng.integers(0, len(pool), size=batch_size)
        seqs = [pool[int(i)] for i in picks]
        model.zero_grad()
        loss = masked_token_loss(model, vocab, seqs, rng)
        loss.backward()
        adamw_step(model.params, collect_grads(model.params), state, settings)
        losses.append(loss.item())
    model.eval()
    return model, losses


def masked_accuracy(model: EncoderModel, vocab: bpe.SubwordVocab, corpus,
                    seed: int = 0) -> float:
    """Fraction of masked subwords recovered exactly; chance is 1/|vocab|."""
    rng = np.random.default_rng(seed)
    model.eval()
    hits = total = 0
    handles = list(corpus)
    for lo in range(0, len(handles), 64):
        seqs = [h.words for h in handles[lo:lo + 64]]
        toks = [bpe.encode(vocab, ws, bos=model.config.needs_bos) for ws in seqs]
        masked, positions, targets = [], [], []
        for tok in toks:
            pos = _mask_positions(tok, rng)
            ids = list(tok.ids)
            targets.append([ids[p] for p in pos])
            for p in pos:
                ids[p] = vocab.mask_id
            masked.append(bpe.Tokenization(ids=tuple(ids), spans=tok.spans, bos=tok.bos))
            positions.append(pos)
        batch = make_batch(masked, vocab.pad_id)
        m_max = max(len(p) for p in positions)
        pos_arr = np.zeros((len(toks), m_max), dtype=np.int64)
        for i, pos in enumerate(positions):
            pos_arr[i, :len(pos)] = pos
        out = mlm_logits(model, batch, pos_arr).values.argmax(axis=-1)
        for i, (pos, tgt) in enumerate(zip(positions, targets)):
            for j, t in enumerate(tgt):
                hits += int(out[i, j] == t)
                total += 1
    return hits / total


def stable_int(*parts) -> int:
    text = "\x1f".join(str(p) for p in parts)
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "big") >> 1


# ---- serialization ----------------------------------------------------------------

FORMAT_VERSION = 1


def save_model(model: EncoderModel, path) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_doc(),
        "vocab_hash": model.vocab_hash,
        "params": {name: base64.b64encode(
            np.ascontiguousarray(p.values.astype("<f4")).tobytes()).decode("ascii")
            for name, p in model.params.items()},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> EncoderModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelError(f"unsupported model format {doc.get('format_version')!r}")
    config = ArchConfig.from_doc(doc["config"])
    params: dict[str, Tensor] = {}
    for name, shape, _ in _param_specs(config):
        raw = base64.b64decode(doc["params"][name])
        values = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
        params[name] = Tensor(values, requires_grad=True)
    return EncoderModel(config, params, doc.get("vocab_hash", ""))
