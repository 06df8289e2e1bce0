"""Small post-layer-norm transformer encoder trained from scratch.

``ParamStore`` keeps every named parameter as a view into one contiguous
float64 vector θ, so flat-vector training (sparse-support updates, mask
extraction) and named forward passes always agree without copying.  The
``Encoder`` bundles config, parameters, and tokenizer and exposes masked
language-model logits, a cross-encoder relevance head on [CLS], and
mask-respecting mean pooling for bi-encoder similarity.

Plugin objects (adapter stacks) hook into the forward pass after the FFN
sub-layer of each layer; the FFN layer norm is re-applied over the plugin
output so a zero-initialized plugin is an exact passthrough.
"""

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .serialization import fingerprint, read_artifact, write_artifact
from .tokenizer import Tokenizer, TokenSequence

logger = logging.getLogger(__name__)

NEG_INF = -1e9  # additive attention bias; underflows to exact zero weight


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 8192
    max_seq_len: int = 128

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ConfigError(
                f"hidden={self.hidden} not divisible by heads={self.heads}"
            )
        if self.max_seq_len < 8:
            raise ConfigError(f"max_seq_len={self.max_seq_len} < 8")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return asdict(self)


def _layout(cfg: EncoderConfig):
    """Stable (name, shape) order defining the flat θ coordinate system."""
    h, f, v, s = cfg.hidden, cfg.ffn_dim, cfg.vocab_size, cfg.max_seq_len
    items = [
        ("emb.tok", (v, h)),
        ("emb.pos", (s, h)),
        ("emb.seg", (2, h)),
        ("emb.ln.g", (h,)),
        ("emb.ln.b", (h,)),
    ]
    for i in range(cfg.num_layers):
        p = f"layer{i}."
        items += [
            (p + "attn.wq", (h, h)), (p + "attn.bq", (h,)),
            (p + "attn.wk", (h, h)), (p + "attn.bk", (h,)),
            (p + "attn.wv", (h, h)), (p + "attn.bv", (h,)),
            (p + "attn.wo", (h, h)), (p + "attn.bo", (h,)),
            (p + "attn.ln.g", (h,)), (p + "attn.ln.b", (h,)),
            (p + "ffn.w1", (h, f)), (p + "ffn.b1", (f,)),
            (p + "ffn.w2", (f, h)), (p + "ffn.b2", (h,)),
            (p + "ffn.ln.g", (h,)), (p + "ffn.ln.b", (h,)),
        ]
    items += [
        ("mlm.w", (h, h)), ("mlm.b", (h,)),
        ("mlm.ln.g", (h,)), ("mlm.ln.b", (h,)),
        ("mlm.out_bias", (v,)),  # decoder reuses emb.tok transposed
        ("head.w", (h, 1)), ("head.b", (1,)),
    ]
    return items


class ParamStore:
    """Named parameter tensors viewing one flat float64 vector θ.

    ``flatten``/``unflatten`` round-trip bit-exactly because the named
    tensors are reshaped views of the same buffer; in-place writes to
    ``theta`` are immediately visible through every view.
    """

    INIT_STD = 0.02

    def __init__(self, config: EncoderConfig, theta: np.ndarray = None):
        self.config = config
        self.slices = {}
        self._shapes = {}
        off = 0
        for name, shape in _layout(config):
            n = int(np.prod(shape, dtype=np.int64))
            self.slices[name] = slice(off, off + n)
            self._shapes[name] = shape
            off += n
        self.dim = off
        if theta is None:
            theta = np.zeros(self.dim, dtype=np.float64)
        else:
            theta = np.asarray(theta, dtype=np.float64).copy()
            if theta.shape != (self.dim,):
                raise ContractError(
                    f"theta has {theta.shape}, expected ({self.dim},)"
                )
        self.theta = theta
        # float64 views into theta: Tensor construction keeps them un-copied,
        # so in-place writes to theta are visible through every named tensor.
        self.tensors = {
            name: T.Tensor(self.theta[sl].reshape(self._shapes[name]))
            for name, sl in self.slices.items()
        }

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "ParamStore":
        store = cls(config)
        rng = np.random.default_rng(seed)
        for name, shape in _layout(config):
            sl = store.slices[name]
            if name.endswith("ln.g"):
                store.theta[sl] = 1.0
            elif len(shape) >= 2:  # weight matrices and embedding tables
                store.theta[sl] = rng.normal(0.0, cls.INIT_STD, sl.stop - sl.start)
            # remaining 1-D parameters (biases) stay zero
        return store

    def __getitem__(self, name: str) -> T.Tensor:
        return self.tensors[name]

    def names(self):
        return list(self.slices)

    def flatten(self) -> np.ndarray:
        return self.theta.copy()

    def unflatten(self, theta: np.ndarray) -> None:
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ContractError(f"theta has {theta.shape}, expected ({self.dim},)")
        self.theta[:] = theta

    def clone(self) -> "ParamStore":
        return ParamStore(self.config, self.theta)

    def grad_vector(self) -> np.ndarray:
        """Concatenate per-tensor grads into flat-θ order (zeros if absent)."""
        g = np.zeros(self.dim, dtype=np.float64)
        for name, t in self.tensors.items():
            if t.grad is not None:
                g[self.slices[name]] = t.grad.ravel()
        return g

    def clear_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None
            t._tape = None
            t._nid = -1

    def indices_of(self, names) -> np.ndarray:
        """Flat-θ coordinate indices covered by the given parameter names."""
        parts = [np.arange(self.slices[n].start, self.slices[n].stop) for n in names]
        return np.concatenate(parts) if parts else np.array([], dtype=np.int64)


class Encoder:
    """Config + parameters + tokenizer with forward passes for all heads."""

    def __init__(self, config: EncoderConfig, params: ParamStore, tokenizer: Tokenizer):
        if params.config != config:
            raise ContractError("parameter store was built for a different config")
        if tokenizer.vocab_size > config.vocab_size:
            raise ContractError(
                f"tokenizer has {tokenizer.vocab_size} types, "
                f"config allows {config.vocab_size}"
            )
        self.config = config
        self.params = params
        self.tokenizer = tokenizer

    @classmethod
    def init(cls, config: EncoderConfig, tokenizer: Tokenizer, seed: int) -> "Encoder":
        return cls(config, ParamStore.init(config, seed), tokenizer)

    # ---- core forward -------------------------------------------------

    def encode_ids(self, ids, segments, mask, plugins=None) -> T.Tensor:
        """Batched forward: int arrays [B,T] -> hidden states Tensor [B,T,h]."""
        cfg, P = self.config, self.params
        ids = np.asarray(ids, dtype=np.int64)
        b, t = ids.shape
        if t > cfg.max_seq_len:
            raise ContractError(
                f"sequence length {t} exceeds max_seq_len {cfg.max_seq_len}"
            )
        x = T.embedding(P["emb.tok"], ids)
        x = T.add(x, T.embedding(P["emb.pos"], np.arange(t)))
        x = T.add(x, T.embedding(P["emb.seg"], np.asarray(segments, dtype=np.int64)))
        x = T.layer_norm(x, P["emb.ln.g"], P["emb.ln.b"])
        if plugins is not None:
            x = plugins.post_embed(x)
        bias = T.Tensor(((1.0 - np.asarray(mask, dtype=np.float64)) * NEG_INF)
                        .reshape(b, 1, 1, t))
        for layer in range(cfg.num_layers):
            x = self._layer(layer, x, bias, b, t, plugins, segments)
        return x

    def _heads(self, t: T.Tensor, b: int, n: int) -> T.Tensor:
        cfg = self.config
        return T.swapaxes(T.reshape(t, (b, n, cfg.heads, cfg.head_dim)), 1, 2)

    def _layer(self, i, x, bias, b, t, plugins, segments) -> T.Tensor:
        P, cfg = self.params, self.config
        p = f"layer{i}."
        q = self._heads(T.add(T.matmul(x, P[p + "attn.wq"]), P[p + "attn.bq"]), b, t)
        k = self._heads(T.add(T.matmul(x, P[p + "attn.wk"]), P[p + "attn.bk"]), b, t)
        v = self._heads(T.add(T.matmul(x, P[p + "attn.wv"]), P[p + "attn.bv"]), b, t)
        scores = T.scale(T.matmul(q, T.swapaxes(k, 2, 3)), 1.0 / np.sqrt(cfg.head_dim))
        attn = T.softmax(T.add(scores, bias))
        ctx = T.reshape(T.swapaxes(T.matmul(attn, v), 1, 2), (b, t, cfg.hidden))
        ao = T.add(T.matmul(ctx, P[p + "attn.wo"]), P[p + "attn.bo"])
        x1 = T.layer_norm(T.add(x, ao), P[p + "attn.ln.g"], P[p + "attn.ln.b"])
        r = T.add(
            T.matmul(
                T.relu(T.add(T.matmul(x1, P[p + "ffn.w1"]), P[p + "ffn.b1"])),
                P[p + "ffn.w2"],
            ),
            P[p + "ffn.b2"],
        )
        out = T.layer_norm(T.add(x1, r), P[p + "ffn.ln.g"], P[p + "ffn.ln.b"])
        if plugins is not None and plugins.active(i):
            a = plugins.post_ffn(i, out, r, segments)
            out = T.layer_norm(T.add(x1, a), P[p + "ffn.ln.g"], P[p + "ffn.ln.b"])
        return out

    # ---- single-sequence views ----------------------------------------

    def encode(self, seq: TokenSequence, plugins=None) -> T.Tensor:
        """Hidden states [len, h] for one sequence."""
        out = self.encode_ids(
            seq.ids[None, :], seq.segments[None, :], seq.mask[None, :], plugins
        )
        return T.reshape(out, (len(seq), self.config.hidden))

    def mlm_logits(self, seq: TokenSequence, plugins=None) -> T.Tensor:
        """Per-position vocabulary logits [len, vocab]."""
        h = self.encode(seq, plugins)
        if plugins is not None:
            h = plugins.pre_mlm(h)
        return self._mlm_head(h)

    def _mlm_head(self, h2: T.Tensor) -> T.Tensor:
        P = self.params
        z = T.layer_norm(
            T.relu(T.add(T.matmul(h2, P["mlm.w"]), P["mlm.b"])),
            P["mlm.ln.g"], P["mlm.ln.b"],
        )
        return T.add(T.matmul(z, T.swapaxes(P["emb.tok"], 0, 1)), P["mlm.out_bias"])

    # ---- training-path batched heads ----------------------------------

    def ce_logits(self, ids, segments, mask, plugins=None) -> T.Tensor:
        """Relevance logits [B] from the [CLS] state of each pair sequence."""
        b, t = np.asarray(ids).shape
        h = self.encode_ids(ids, segments, mask, plugins)
        flat = T.reshape(h, (b * t, self.config.hidden))
        cls_states = T.embedding(flat, np.arange(b, dtype=np.int64) * t)
        logits = T.add(T.matmul(cls_states, self.params["head.w"]), self.params["head.b"])
        return T.reshape(logits, (b,))

    def mlm_loss(self, ids, segments, mask, positions, targets, plugins=None) -> T.Tensor:
        """Mean masked-position cross entropy; positions index [B,T] flat."""
        b, t = np.asarray(ids).shape
        h = self.encode_ids(ids, segments, mask, plugins)
        if plugins is not None:
            h = plugins.pre_mlm(h)
        flat = T.reshape(h, (b * t, self.config.hidden))
        sel = T.embedding(flat, np.asarray(positions, dtype=np.int64))
        return T.cross_entropy(self._mlm_head(sel), targets)

    # ---- scoring APIs --------------------------------------------------

    def ce_score(self, query: str, document: str, plugins=None) -> float:
        """Relevance logit for one (query, document) pair; higher = better."""
        seq = self.tokenizer.encode_pair(query, document, self.config.max_seq_len)
        out = self.ce_logits(
            seq.ids[None, :], seq.segments[None, :], seq.mask[None, :], plugins
        )
        return float(out.data[0])

    def be_embed(self, text: str) -> np.ndarray:
        """Mean-pooled hidden state over non-pad tokens; adapters excluded."""
        seq = self.tokenizer.encode_single(text, self.config.max_seq_len)
        if len(seq) <= 2:  # only [CLS] [SEP]: no content
            logger.warning("be_embed: empty text, returning zero vector")
            return np.zeros(self.config.hidden)
        h = self.encode_ids(seq.ids[None, :], seq.segments[None, :], seq.mask[None, :])
        weights = (seq.mask / seq.mask.sum()).reshape(1, 1, -1)
        pooled = T.matmul(T.Tensor(weights), h)
        return pooled.data.reshape(self.config.hidden).copy()

    # ---- persistence ---------------------------------------------------

    def fingerprint(self) -> str:
        return fingerprint(
            self.config.to_dict(), self.tokenizer.id_to_token, self.params.theta
        )

    def save(self, path) -> None:
        write_artifact(
            path,
            kind="encoder",
            meta={
                "config": self.config.to_dict(),
                "vocab": self.tokenizer.id_to_token,
                "fingerprint": self.fingerprint(),
            },
            arrays={"theta": self.params.theta},
        )

    @classmethod
    def load(cls, path) -> "Encoder":
        _, meta, arrays = read_artifact(path, expect_kind="encoder")
        config = EncoderConfig(**meta["config"])
        store = ParamStore(config, arrays["theta"])
        tok = Tokenizer(meta["vocab"])
        enc = cls(config, store, tok)
        if enc.fingerprint() != meta["fingerprint"]:
            raise ContractError(f"{path}: stored fingerprint does not match contents")
        return enc
