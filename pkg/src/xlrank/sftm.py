"""Sparse fine-tuning masks: top-K support selection over a flat parameter
vector, extraction of difference masks, and additive composition.

A mask is a sorted sparse delta over θ.  Supports come from the phase-1 /
phase-2 recipe: rank coordinates by how far full fine-tuning moved them,
restart from the original parameters training only that support, and store
the resulting difference.  Composition is plain coordinate-wise addition,
so independently trained ranking and language masks combine at inference
without retraining.
"""

from dataclasses import dataclass

import numpy as np

from .adapters import adapter_param_count
from .errors import ContractError
from .serialization import read_artifact, write_artifact


@dataclass
class SparseMask:
    """Sorted sparse delta over a flat parameter vector."""

    indices: np.ndarray          # int64, strictly increasing
    values: np.ndarray           # float64, same length
    dim: int
    k: int
    role: str = "language"       # "language" | "ranking"
    tag: str = ""

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.indices.shape != self.values.shape or self.indices.ndim != 1:
            raise ContractError("mask indices and values must be matching 1-D arrays")
        if len(self.indices) > self.k:
            raise ContractError(
                f"mask has {len(self.indices)} entries, budget K={self.k}"
            )
        if len(self.indices):
            if (np.diff(self.indices) <= 0).any():
                raise ContractError("mask indices must be strictly increasing")
            if self.indices[0] < 0 or self.indices[-1] >= self.dim:
                raise ContractError(
                    f"mask index out of range for dimension {self.dim}"
                )
        if self.role not in ("language", "ranking"):
            raise ContractError(f"mask role must be language or ranking, got {self.role!r}")

    def __len__(self):
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        dense[self.indices] = self.values
        return dense


def select_support(theta0: np.ndarray, theta1: np.ndarray, k: int,
                   eligible: np.ndarray = None) -> np.ndarray:
    """Indices of the K largest |θ⁰−θ¹| moves, ties by ascending index.

    ``eligible`` optionally restricts the candidate coordinates; the result
    is sorted ascending and has exactly min(K, #eligible) entries.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    theta1 = np.asarray(theta1, dtype=np.float64)
    if theta0.shape != theta1.shape or theta0.ndim != 1:
        raise ContractError(
            f"parameter vectors differ: {theta0.shape} vs {theta1.shape}"
        )
    dim = theta0.shape[0]
    if not 0 <= k <= dim:
        raise ContractError(f"K={k} outside [0, {dim}]")
    if eligible is None:
        cand = np.arange(dim, dtype=np.int64)
    else:
        cand = np.asarray(eligible, dtype=np.int64)
        if len(cand) and ((np.diff(cand) <= 0).any() or cand[0] < 0 or cand[-1] >= dim):
            raise ContractError("eligible indices must be sorted, unique, in range")
    delta = np.abs(theta0[cand] - theta1[cand])
    take = min(k, len(cand))
    # stable sort on (-delta, index): equal deltas keep ascending index order
    order = np.argsort(-delta, kind="stable")[:take]
    return np.sort(cand[order])


def extract_mask(theta2: np.ndarray, theta0: np.ndarray, support: np.ndarray,
                 k: int = None, role: str = "language", tag: str = "",
                 prune: bool = False) -> SparseMask:
    """Difference mask θ²−θ⁰ on the support; zero deltas optionally pruned.

    The rounded difference is the best float delta there is: whenever any
    float v satisfies fl(θ⁰+v) == θ², fl(θ²−θ⁰) is such a v.  (When the
    difference is coarser-grained than θ² — severe cancellation — the sum is
    exact by Sterbenz's lemma and only an exactly representable difference
    could land; otherwise the only miss mode is a rounding tie, which no
    candidate shift escapes.)  Composition is therefore bit-exact except on
    coordinates where no delta could be, and within one ulp of θ² there.
    """
    theta2 = np.asarray(theta2, dtype=np.float64)
    theta0 = np.asarray(theta0, dtype=np.float64)
    if theta2.shape != theta0.shape:
        raise ContractError(
            f"parameter vectors differ: {theta2.shape} vs {theta0.shape}"
        )
    support = np.sort(np.asarray(support, dtype=np.int64))
    values = theta2[support] - theta0[support]
    if prune:
        keep = values != 0.0
        support, values = support[keep], values[keep]
    if k is None:
        k = len(support)
    return SparseMask(indices=support, values=values, dim=theta0.shape[0],
                      k=k, role=role, tag=tag)


def compose(theta0: np.ndarray, rm: SparseMask = None, lm: SparseMask = None) -> np.ndarray:
    """θ⁰ + RM + LM, coordinate-wise; overlapping indices add."""
    theta0 = np.asarray(theta0, dtype=np.float64)
    out = theta0.copy()
    for mask in (rm, lm):
        if mask is None:
            continue
        if mask.dim != theta0.shape[0]:
            raise ContractError(
                f"mask dimension {mask.dim} does not match θ dimension {theta0.shape[0]}"
            )
        np.add.at(out, mask.indices, mask.values)
    return out


def combine_masks(a: SparseMask, b: SparseMask) -> SparseMask:
    """Sparse sum: support = union, overlapping values add."""
    if a.dim != b.dim:
        raise ContractError(f"mask dimensions differ: {a.dim} vs {b.dim}")
    indices = np.union1d(a.indices, b.indices)
    values = np.zeros(len(indices))
    values[np.searchsorted(indices, a.indices)] += a.values
    values[np.searchsorted(indices, b.indices)] += b.values
    tag = f"{a.tag}+{b.tag}" if a.tag or b.tag else ""
    return SparseMask(indices=indices, values=values, dim=a.dim,
                      k=a.k + b.k, role=a.role, tag=tag)


def k_from_reduction_factor(r: int, num_layers: int, hidden: int) -> int:
    """Mask budget matching the parameter count of an adapter at factor r."""
    return adapter_param_count(r, num_layers, hidden)


# ---- persistence -------------------------------------------------------


def save_mask(path, mask: SparseMask, base_fingerprint: str,
              head: dict = None) -> None:
    """Write a mask artifact; ranking masks may carry the scoring head."""
    arrays = {"indices": mask.indices, "values": mask.values}
    if head is not None:
        for name, arr in head.items():
            arrays[f"head.{name}"] = np.asarray(arr, dtype=np.float64)
    meta = {
        "dim": int(mask.dim),
        "k": int(mask.k),
        "role": mask.role,
        "tag": mask.tag,
        "base_fingerprint": base_fingerprint,
        "has_head": head is not None,
    }
    write_artifact(path, kind="mask", meta=meta, arrays=arrays)


def load_mask(path):
    """Read a mask artifact; returns (mask, meta, head-or-None)."""
    _, meta, arrays = read_artifact(path, expect_kind="mask")
    mask = SparseMask(
        indices=arrays["indices"], values=arrays["values"],
        dim=meta["dim"], k=meta["k"], role=meta["role"], tag=meta["tag"],
    )
    head = None
    if meta.get("has_head"):
        head = {k[len("head."):]: v for k, v in arrays.items() if k.startswith("head.")}
    return mask, meta, head
