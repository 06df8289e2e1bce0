"""Bottleneck adapters: language/ranking variants, per-token split routing,
layer dropping, and invertible embedding couplings.

An adapter reads the FFN sub-layer output ``h_l`` and adds its bottleneck
transform to the FFN residual ``r_l``: ``U(ψ(D(h_l))) + r_l``.  A ranking
adapter stacks on a language adapter's output but keeps the *same* residual
``r_l``.  Up-projections initialize to zero, so an untrained adapter stack
is an exact passthrough of the base encoder.

``AdapterStack`` is the runtime composition plugged into the encoder: which
language adapter(s) to use (single or per-token split at the first [SEP]),
an optional ranking adapter, how many leading layers run adapter-free, and
an optional invertible embedding transform.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    FingerprintMismatch,
)
from .serialization import read_artifact, write_artifact
from .tokenizer import SEP

_ACTIVATIONS = {"relu": T.relu}


@dataclass(frozen=True)
class AdapterConfig:
    reduction_factor: int
    hidden: int
    activation: str = "relu"

    def __post_init__(self):
        if self.reduction_factor < 1:
            raise ConfigError(f"reduction_factor must be >= 1, got {self.reduction_factor}")
        if self.hidden % self.reduction_factor != 0:
            raise ConfigError(
                f"hidden={self.hidden} not divisible by "
                f"reduction_factor={self.reduction_factor}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def bottleneck(self) -> int:
        return self.hidden // self.reduction_factor


def adapter_param_count(reduction_factor, num_layers: int, hidden: int) -> int:
    """Trainable parameters of one adapter: L·(2·h·d + d + h), d = h/r.

    Counts both projections with biases; the scoring head and invertible
    couplings are not included.
    """
    r = (
        reduction_factor.reduction_factor
        if isinstance(reduction_factor, AdapterConfig)
        else int(reduction_factor)
    )
    if hidden % r != 0:
        raise ConfigError(f"hidden={hidden} not divisible by reduction_factor={r}")
    d = hidden // r
    return num_layers * (2 * hidden * d + d + hidden)


class AdapterParams:
    """Per-layer down/up projections with biases."""

    DOWN_INIT_STD = 0.01

    def __init__(self, config: AdapterConfig, num_layers: int):
        self.config = config
        self.num_layers = num_layers
        h, d = config.hidden, config.bottleneck
        self.layers = [
            {
                "down_w": T.Tensor(np.zeros((h, d))),
                "down_b": T.Tensor(np.zeros(d)),
                "up_w": T.Tensor(np.zeros((d, h))),
                "up_b": T.Tensor(np.zeros(h)),
            }
            for _ in range(num_layers)
        ]

    @classmethod
    def init(cls, config: AdapterConfig, num_layers: int, seed: int) -> "AdapterParams":
        params = cls(config, num_layers)
        rng = np.random.default_rng(seed)
        for layer in params.layers:
            layer["down_w"].data[:] = rng.normal(
                0.0, cls.DOWN_INIT_STD, layer["down_w"].data.shape
            )
            # up_w / biases stay zero: untrained adapter == passthrough
        return params

    def named(self):
        for i, layer in enumerate(self.layers):
            for key in ("down_w", "down_b", "up_w", "up_b"):
                yield f"layer{i}.{key}", layer[key]

    def tensors(self):
        return [t for _, t in self.named()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def to_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.named()}

    @classmethod
    def from_arrays(cls, config: AdapterConfig, num_layers: int, arrays) -> "AdapterParams":
        params = cls(config, num_layers)
        for name, t in params.named():
            t.data[:] = arrays[name]
        return params


def _bottleneck(x: T.Tensor, layer: dict, activation) -> T.Tensor:
    pre = T.add(T.matmul(x, layer["down_w"]), layer["down_b"])
    return T.add(T.matmul(activation(pre), layer["up_w"]), layer["up_b"])


def _with_rows(fn, *tensors):
    """Run fn over >=2-D views, restoring 1-D shape afterwards."""
    if tensors[0].data.ndim == 1:
        n = tensors[0].data.shape[0]
        out = fn(*(T.reshape(t, (1, n)) for t in tensors))
        return T.reshape(out, (n,))
    return fn(*tensors)


def la_forward(h_l: T.Tensor, r_l: T.Tensor, params: AdapterParams, layer: int) -> T.Tensor:
    """Single-adapter transform: U(ψ(D(h_l))) + r_l."""
    if h_l.data.shape != r_l.data.shape:
        raise DimensionError(
            f"adapter input shapes differ: {h_l.data.shape} vs {r_l.data.shape}"
        )
    act = _ACTIVATIONS[params.config.activation]

    def run(h2, r2):
        return T.add(_bottleneck(h2, params.layers[layer], act), r2)

    return _with_rows(run, h_l, r_l)


def ra_forward(
    h_l: T.Tensor, r_l: T.Tensor, la: AdapterParams, ra: AdapterParams, layer: int
) -> T.Tensor:
    """Stacked transform: U_ra(ψ(D_ra(la_forward(h_l, r_l)))) + r_l.

    Both adapters read the same residual r_l; the ranking adapter consumes
    the language adapter's output but does not chain its residual.
    """
    if h_l.data.shape != r_l.data.shape:
        raise DimensionError(
            f"adapter input shapes differ: {h_l.data.shape} vs {r_l.data.shape}"
        )
    act = _ACTIVATIONS[ra.config.activation]

    def run(h2, r2):
        inner = la_forward(h2, r2, la, layer)
        return T.add(_bottleneck(inner, ra.layers[layer], act), r2)

    return _with_rows(run, h_l, r_l)


def split_route(ids) -> np.ndarray:
    """Per-token language-adapter assignment for a pair sequence.

    Tokens up to and including the first [SEP] route to the query-language
    adapter (0); everything after routes to the document-language adapter (1).
    """
    ids = np.asarray(ids)
    hits = np.where(ids == SEP)[0]
    if len(hits) == 0:
        raise ContractError("split routing requires at least one [SEP] token")
    route = np.zeros(ids.shape, dtype=np.int64)
    route[hits[0] + 1:] = 1
    return route


class InvertibleAdapterParams:
    """Additive coupling over embedding halves: o1 = e1 + F(e2), o2 = e2 + G(o1).

    F and G are bottleneck MLPs on h/2 dimensions; the coupling has an exact
    algebraic inverse, so the transform is bijective by construction.
    """

    INIT_STD = 0.01

    def __init__(self, hidden: int, reduction_factor: int = 2):
        if hidden % 2 != 0:
            raise ConfigError(f"invertible adapter needs even hidden, got {hidden}")
        self.hidden = hidden
        self.reduction_factor = reduction_factor
        half = hidden // 2
        d = max(1, half // reduction_factor)
        self.half = half
        shapes = {"w1": (half, d), "b1": (d,), "w2": (d, half), "b2": (half,)}
        self.params = {
            f"{fn}.{k}": T.Tensor(np.zeros(s))
            for fn in ("f", "g")
            for k, s in shapes.items()
        }

    @classmethod
    def init(cls, hidden: int, reduction_factor: int = 2, seed: int = 0):
        inv = cls(hidden, reduction_factor)
        rng = np.random.default_rng(seed)
        for fn in ("f", "g"):
            w1 = inv.params[f"{fn}.w1"]
            w1.data[:] = rng.normal(0.0, cls.INIT_STD, w1.data.shape)
            # w2 stays zero: coupling starts as the identity
        return inv

    def tensors(self):
        return list(self.params.values())

    def _mlp(self, fn: str, x: T.Tensor) -> T.Tensor:
        p = self.params
        hid = T.relu(T.add(T.matmul(x, p[f"{fn}.w1"]), p[f"{fn}.b1"]))
        return T.add(T.matmul(hid, p[f"{fn}.w2"]), p[f"{fn}.b2"])

    def _selectors(self):
        eye = np.eye(self.hidden)
        return T.Tensor(eye[:, : self.half]), T.Tensor(eye[:, self.half:])

    def apply(self, e: T.Tensor) -> T.Tensor:
        s1, s2 = self._selectors()
        e1, e2 = T.matmul(e, s1), T.matmul(e, s2)
        o1 = T.add(e1, self._mlp("f", e2))
        o2 = T.add(e2, self._mlp("g", o1))
        return T.add(T.matmul(o1, T.swapaxes(s1, 0, 1)), T.matmul(o2, T.swapaxes(s2, 0, 1)))

    def invert(self, o: T.Tensor) -> T.Tensor:
        s1, s2 = self._selectors()
        o1, o2 = T.matmul(o, s1), T.matmul(o, s2)
        e2 = T.sub(o2, self._mlp("g", o1))
        e1 = T.sub(o1, self._mlp("f", e2))
        return T.add(T.matmul(e1, T.swapaxes(s1, 0, 1)), T.matmul(e2, T.swapaxes(s2, 0, 1)))

    def to_arrays(self) -> dict:
        return {name: t.data.copy() for name, t in self.params.items()}

    @classmethod
    def from_arrays(cls, hidden, reduction_factor, arrays) -> "InvertibleAdapterParams":
        inv = cls(hidden, reduction_factor)
        for name, t in inv.params.items():
            t.data[:] = arrays[name]
        return inv


class AdapterStack:
    """Runtime composition plugged into the encoder forward pass.

    ``la_mode``: "Q" routes every token through la_q, "D" through la_d,
    "S" splits per token at the first [SEP].  Layers below ``drop_first_n``
    run the plain transformer layer.
    """

    def __init__(
        self,
        num_layers: int,
        la_mode: str = "Q",
        la_q: AdapterParams = None,
        la_d: AdapterParams = None,
        ra: AdapterParams = None,
        drop_first_n: int = 0,
        invertible: InvertibleAdapterParams = None,
    ):
        if la_mode not in ("Q", "D", "S"):
            raise ConfigError(f"la_mode must be Q, D, or S, got {la_mode!r}")
        if la_mode == "S" and (la_q is None or la_d is None):
            raise ConfigError("split mode requires both language adapters")
        if la_mode == "Q" and la_q is None and la_d is not None:
            raise ConfigError("mode Q given only a document-language adapter")
        if la_mode == "D" and la_d is None and la_q is not None:
            raise ConfigError("mode D given only a query-language adapter")
        if not 0 <= drop_first_n <= num_layers:
            raise ContractError(
                f"drop_first_n={drop_first_n} outside [0, {num_layers}]"
            )
        self.num_layers = num_layers
        self.la_mode = la_mode
        self.la_q = la_q
        self.la_d = la_d
        self.ra = ra
        self.drop_first_n = drop_first_n
        self.invertible = invertible

    def _single_la(self):
        return self.la_q if self.la_mode == "Q" else self.la_d

    def active(self, layer: int) -> bool:
        if self.la_q is None and self.la_d is None and self.ra is None:
            return False
        return layer >= self.drop_first_n

    def post_embed(self, x: T.Tensor) -> T.Tensor:
        return self.invertible.apply(x) if self.invertible is not None else x

    def pre_mlm(self, h: T.Tensor) -> T.Tensor:
        return self.invertible.invert(h) if self.invertible is not None else h

    def _la_out(self, layer, h, r, segments):
        if self.la_mode != "S":
            la = self._single_la()
            if la is None:
                return None
            return la_forward(h, r, la, layer)
        a_q = la_forward(h, r, self.la_q, layer)
        a_d = la_forward(h, r, self.la_d, layer)
        gate = np.asarray(segments, dtype=np.float64)[..., None]
        return T.add(T.mul(a_q, T.Tensor(1.0 - gate)), T.mul(a_d, T.Tensor(gate)))

    def post_ffn(self, layer: int, h: T.Tensor, r: T.Tensor, segments) -> T.Tensor:
        inner = self._la_out(layer, h, r, segments)
        if self.ra is None:
            return inner if inner is not None else r
        act = _ACTIVATIONS[self.ra.config.activation]
        base = inner if inner is not None else h
        return T.add(_bottleneck(base, self.ra.layers[layer], act), r)

    def dropped(self, n: int) -> "AdapterStack":
        """Copy of this composition with the first n layers adapter-free."""
        return AdapterStack(
            num_layers=self.num_layers,
            la_mode=self.la_mode,
            la_q=self.la_q,
            la_d=self.la_d,
            ra=self.ra,
            drop_first_n=n,
            invertible=self.invertible,
        )


def adapter_drop(stack: AdapterStack, n: int) -> AdapterStack:
    """Composition that skips adapters in the first n layers; params untouched."""
    return stack.dropped(n)


# ---- persistence -------------------------------------------------------


def save_adapter(
    path,
    params: AdapterParams,
    role: str,
    tag: str,
    base_fingerprint: str,
    head: dict = None,
    invertible: InvertibleAdapterParams = None,
) -> None:
    """Write an adapter artifact (optionally with scoring head + couplings)."""
    if role not in ("LA", "RA"):
        raise ContractError(f"adapter role must be LA or RA, got {role!r}")
    arrays = params.to_arrays()
    if head is not None:
        for name, arr in head.items():
            arrays[f"head.{name}"] = np.asarray(arr, dtype=np.float64)
    if invertible is not None:
        for name, arr in invertible.to_arrays().items():
            arrays[f"inv.{name}"] = arr
    meta = {
        "role": role,
        "tag": tag,
        "config": asdict(params.config),
        "num_layers": params.num_layers,
        "base_fingerprint": base_fingerprint,
        "has_head": head is not None,
        "invertible_reduction": (
            invertible.reduction_factor if invertible is not None else None
        ),
    }
    write_artifact(path, kind="adapter", meta=meta, arrays=arrays)


def load_adapter(path):
    """Read an adapter artifact; returns (params, meta, head, invertible)."""
    _, meta, arrays = read_artifact(path, expect_kind="adapter")
    config = AdapterConfig(**meta["config"])
    own = {k: v for k, v in arrays.items() if not k.startswith(("head.", "inv."))}
    params = AdapterParams.from_arrays(config, meta["num_layers"], own)
    head = None
    if meta.get("has_head"):
        head = {
            k[len("head."):]: v for k, v in arrays.items() if k.startswith("head.")
        }
    invertible = None
    if meta.get("invertible_reduction") is not None:
        inv_arrays = {
            k[len("inv."):]: v for k, v in arrays.items() if k.startswith("inv.")
        }
        invertible = InvertibleAdapterParams.from_arrays(
            config.hidden, meta["invertible_reduction"], inv_arrays
        )
    return params, meta, head, invertible


def check_base_fingerprint(meta: dict, fingerprint: str, what: str) -> None:
    """Refuse to compose artifacts trained against a different base encoder."""
    stored = meta.get("base_fingerprint")
    if stored != fingerprint:
        raise FingerprintMismatch(expected=fingerprint, found=stored, what=what)
