"""Eviction policies over cached token positions.

A policy is a nonempty set of atoms (special, punct, frequent, local,
full); a hybrid retains the union of its atoms' position sets. All
operations are pure functions over immutable inputs.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .tokens import TokenAnnotation, TokenClass

# Guard against float products like 0.57*100 = 56.999999999999993 landing
# a hair above an exact integer and inflating the ceiling by one.
_BUDGET_EPS = 1e-9


class PolicyError(ValueError):
    """Raised on invalid policies, contexts, or policy strings."""


class PolicyAtom(Enum):
    SPECIAL = "special"
    PUNCTUATION = "punct"
    LOCAL = "local"
    FREQUENT = "frequent"
    FULL = "full"


# Canonical rendering order for hybrid policy strings.
_ATOM_ORDER = (
    PolicyAtom.SPECIAL,
    PolicyAtom.PUNCTUATION,
    PolicyAtom.FREQUENT,
    PolicyAtom.LOCAL,
)

DEFAULT_RATIO = 0.3


@dataclass(frozen=True)
class CompressionPolicy:
    """An atomic eviction rule or a hybrid union of atomics."""

    atoms: frozenset[PolicyAtom]
    r_l: float = DEFAULT_RATIO
    r_f: float = DEFAULT_RATIO

    def __post_init__(self):
        atoms = frozenset(self.atoms)
        object.__setattr__(self, "atoms", atoms)
        if not atoms:
            raise PolicyError("policy needs at least one atom")
        if PolicyAtom.FULL in atoms and atoms != {PolicyAtom.FULL}:
            raise PolicyError("full cannot be combined with other atoms")
        for name, value in (("r_l", self.r_l), ("r_f", self.r_f)):
            if not 0.0 < value <= 1.0:
                raise PolicyError(f"{name} must be in (0, 1], got {value}")

    @property
    def is_full(self) -> bool:
        return PolicyAtom.FULL in self.atoms

    def union(self, other: "CompressionPolicy") -> "CompressionPolicy":
        if self.is_full or other.is_full:
            return full_policy()
        return CompressionPolicy(self.atoms | other.atoms, self.r_l, self.r_f)

    def __str__(self) -> str:
        return format_policy(self)


def full_policy() -> CompressionPolicy:
    return CompressionPolicy(frozenset({PolicyAtom.FULL}))


def format_policy(policy: CompressionPolicy) -> str:
    """Canonical string form, e.g. ``special+punct+frequent(r_f=0.3)``."""
    if policy.is_full:
        return "full"
    parts = []
    for atom in _ATOM_ORDER:
        if atom not in policy.atoms:
            continue
        if atom is PolicyAtom.FREQUENT:
            parts.append(f"frequent(r_f={policy.r_f:g})")
        elif atom is PolicyAtom.LOCAL:
            parts.append(f"local(r_l={policy.r_l:g})")
        else:
            parts.append(atom.value)
    return "+".join(parts)


_ATOM_TOKEN = re.compile(r"^(?P<name>[a-z]+)(?:\((?P<param>[a-z_]+)=(?P<value>[^)]+)\))?$")


def parse_policy(text: str) -> CompressionPolicy:
    """Parse the canonical policy grammar; round-trips with format_policy."""
    atoms: set[PolicyAtom] = set()
    r_l = DEFAULT_RATIO
    r_f = DEFAULT_RATIO
    for token in text.strip().split("+"):
        m = _ATOM_TOKEN.match(token.strip())
        if not m:
            raise PolicyError(f"bad policy token {token!r}")
        name = m.group("name")
        try:
            atom = PolicyAtom(name)
        except ValueError:
            raise PolicyError(f"unknown policy atom {name!r}") from None
        atoms.add(atom)
        if m.group("param") is not None:
            param, raw = m.group("param"), m.group("value")
            try:
                value = float(raw)
            except ValueError:
                raise PolicyError(f"bad ratio {raw!r} in token {token!r}") from None
            if atom is PolicyAtom.FREQUENT and param == "r_f":
                r_f = value
            elif atom is PolicyAtom.LOCAL and param == "r_l":
                r_l = value
            else:
                raise PolicyError(f"parameter {param!r} not valid for atom {name!r}")
    return CompressionPolicy(frozenset(atoms), r_l=r_l, r_f=r_f)


@dataclass(frozen=True)
class RetainedSet:
    """Sorted, deduplicated cache positions."""

    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(sorted(set(int(i) for i in self.indices)))
        if idx and idx[0] < 0:
            raise PolicyError(f"negative position {idx[0]}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices: Iterable[int]) -> "RetainedSet":
        return cls(tuple(indices))

    def __len__(self) -> int:
        return len(self.indices)

    def __contains__(self, pos: int) -> bool:
        return pos in set(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def union(self, other: "RetainedSet") -> "RetainedSet":
        return RetainedSet(self.indices + other.indices)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.indices, dtype=np.intp)


@dataclass(frozen=True)
class PolicyContext:
    """State a policy decision is evaluated against.

    ``cumulative_scores[j]`` is the accumulated attention mass received by
    position j over all query rows so far (the frequency signal).
    """

    annotations: tuple[TokenAnnotation, ...]
    prompt_len: int
    current_len: int
    cumulative_scores: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        scores = np.asarray(self.cumulative_scores, dtype=np.float64)
        object.__setattr__(self, "cumulative_scores", scores)
        if not 1 <= self.prompt_len <= self.current_len:
            raise PolicyError(
                f"need current_len >= prompt_len >= 1, got "
                f"prompt_len={self.prompt_len}, current_len={self.current_len}"
            )
        if scores.shape != (self.current_len,):
            raise PolicyError(
                f"cumulative_scores has length {scores.shape}, expected "
                f"{self.current_len}"
            )
        if np.any(scores < 0.0) or not np.all(np.isfinite(scores)):
            raise PolicyError("cumulative_scores must be finite and >= 0")
        scores.setflags(write=False)

    def positions_of(self, klass: TokenClass) -> list[int]:
        return [
            a.position
            for a in self.annotations
            if a.klass is klass and a.position < self.current_len
        ]


def _budget(ratio: float, length: int) -> int:
    return max(1, math.ceil(ratio * length - _BUDGET_EPS))


def local_budget(policy: CompressionPolicy, ctx: PolicyContext) -> int:
    """Local window size: fixed at profiling time against the prompt length."""
    return _budget(policy.r_l, ctx.prompt_len)


def _atom_indices(
    atom: PolicyAtom,
    policy: CompressionPolicy,
    ctx: PolicyContext,
    candidates: Sequence[int] | None,
) -> list[int]:
    universe = range(ctx.current_len) if candidates is None else candidates
    if atom is PolicyAtom.FULL:
        return list(universe)
    if atom is PolicyAtom.SPECIAL:
        wanted = set(ctx.positions_of(TokenClass.SPECIAL))
        return [p for p in universe if p in wanted]
    if atom is PolicyAtom.PUNCTUATION:
        wanted = set(ctx.positions_of(TokenClass.PUNCTUATION))
        return [p for p in universe if p in wanted]
    if atom is PolicyAtom.LOCAL:
        window_start = ctx.current_len - local_budget(policy, ctx)
        return [p for p in universe if p >= window_start]
    if atom is PolicyAtom.FREQUENT:
        budget = _budget(policy.r_f, ctx.current_len)
        pool = np.asarray(sorted(universe), dtype=np.intp)
        if pool.size == 0:
            return []
        scores = ctx.cumulative_scores[pool]
        # Stable sort on descending score keeps ties in ascending-index order.
        order = np.argsort(-scores, kind="stable")
        return pool[order[:budget]].tolist()
    raise PolicyError(f"unhandled atom {atom}")


def retained_indices(
    policy: CompressionPolicy,
    ctx: PolicyContext,
    candidates: Iterable[int] | None = None,
) -> RetainedSet:
    """Positions the policy keeps in the cache.

    ``candidates`` restricts selection to positions that are still alive;
    the engine passes its live cache positions so that evicted rows never
    re-enter. Budgets are unchanged by the restriction.
    """
    cand: Sequence[int] | None
    if candidates is None:
        cand = None
    else:
        cand = sorted({int(p) for p in candidates})
        if cand and cand[-1] >= ctx.current_len:
            raise PolicyError(
                f"candidate position {cand[-1]} >= current_len {ctx.current_len}"
            )
    retained: set[int] = set()
    for atom in policy.atoms:
        retained.update(_atom_indices(atom, policy, ctx, cand))
    return RetainedSet.of(retained)


def apply_policy(K, V, retained: RetainedSet) -> tuple[np.ndarray, np.ndarray]:
    """Select the retained rows of K and V, in ascending position order.

    The retained set itself records the original position of each row,
    which callers keep alongside for causal masking and score bookkeeping.
    """
    k = np.asarray(K, dtype=np.float64)
    v = np.asarray(V, dtype=np.float64)
    if k.shape[0] != v.shape[0]:
        raise PolicyError(
            f"K has {k.shape[0]} rows but V has {v.shape[0]}"
        )
    if len(retained) and retained.indices[-1] >= k.shape[0]:
        raise PolicyError(
            f"retained position {retained.indices[-1]} out of range for "
            f"{k.shape[0]} rows"
        )
    idx = retained.as_array()
    return k[idx], v[idx]


def cache_memory_cost(policy: CompressionPolicy, ctx: PolicyContext) -> int:
    """Cache budget of a policy on this context, in retained tokens."""
    return len(retained_indices(policy, ctx))


DEFAULT_FEASIBLE_ORDER = (
    PolicyAtom.SPECIAL,
    PolicyAtom.PUNCTUATION,
    PolicyAtom.FREQUENT,
    PolicyAtom.LOCAL,
)


def feasible_set(
    r_l: float = DEFAULT_RATIO,
    r_f: float = DEFAULT_RATIO,
    atom_order: Sequence[PolicyAtom] = DEFAULT_FEASIBLE_ORDER,
    drop: Iterable[PolicyAtom] = (),
) -> list[CompressionPolicy]:
    """Greedily nested hybrid family, ending in the full-cache policy.

    ``atom_order`` permutes which atom joins at each stage (policy-order
    ablations); ``drop`` removes atoms entirely (policy-removal ablations).
    """
    dropped = set(drop)
    order = [a for a in atom_order if a not in dropped]
    if PolicyAtom.FULL in order:
        raise PolicyError("full is always the family backstop; omit it from the order")
    if len(set(order)) != len(order):
        raise PolicyError("atom_order has duplicates")
    if not order:
        raise PolicyError("feasible family needs at least one atom besides full")
    family: list[CompressionPolicy] = []
    atoms: set[PolicyAtom] = set()
    for atom in order:
        atoms.add(atom)
        family.append(CompressionPolicy(frozenset(atoms), r_l=r_l, r_f=r_f))
    family.append(full_policy())
    return family


def update_cumulative_scores(
    ctx: PolicyContext,
    new_attention_row: Sequence[float] | np.ndarray,
    retained: RetainedSet,
) -> PolicyContext:
    """Fold one decoding step's attention row into the frequency signal.

    Retained positions accumulate their new scores; evicted positions stay
    frozen at their last value (they cannot re-enter unless another atom
    re-retains them); one zero-initialized slot is appended for the token
    whose row was just cached.
    """
    row = np.asarray(new_attention_row, dtype=np.float64)
    if row.shape != (len(retained),):
        raise PolicyError(
            f"attention row has length {row.shape}, expected {len(retained)} "
            "(one score per retained position)"
        )
    if len(retained) and retained.indices[-1] >= ctx.current_len:
        raise PolicyError(
            f"retained position {retained.indices[-1]} >= current_len "
            f"{ctx.current_len}"
        )
    scores = ctx.cumulative_scores.copy()
    scores[retained.as_array()] += row
    scores = np.append(scores, 0.0)
    return replace(
        ctx, cumulative_scores=scores, current_len=ctx.current_len + 1
    )
