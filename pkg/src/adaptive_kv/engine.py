"""Dual-phase generation over a compressed KV cache.

Phase one encodes the prompt, profiles every head once, and compresses
each head's cache under its chosen policy. Phase two generates token by
token: each step appends the incoming token's K/V row, attends over the
retained positions plus that row, folds the attention row into the
frequency bookkeeping, re-applies the head's frozen policy to the grown
cache, and finally samples the next token. Evicted rows are dropped for
good; re-application only ever selects among live positions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .attention import causal_attention, softmax_vector
from .policies import (
    CompressionPolicy,
    PolicyAtom,
    PolicyContext,
    RetainedSet,
    apply_policy,
    retained_indices,
    update_cumulative_scores,
)
from .profiler import (
    HeadDecision,
    HeadProfile,
    ProfilerConfig,
    evaluate_policy,
    profile_model,
)
from .tokens import TokenAnnotation, classify_tokens


class EngineError(ValueError):
    """Raised on invalid generation state or configuration."""


@dataclass(frozen=True)
class GreedyArgmax:
    pass


@dataclass(frozen=True)
class Nucleus:
    temperature: float = 0.6
    top_p: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise EngineError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.top_p <= 1.0:
            raise EngineError(f"top_p must be in (0, 1], got {self.top_p}")


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int
    sampling: GreedyArgmax | Nucleus = field(default_factory=GreedyArgmax)

    def __post_init__(self):
        if self.max_new_tokens < 0:
            raise EngineError("max_new_tokens must be >= 0")


class _Sampler:
    def __init__(self, sampling: GreedyArgmax | Nucleus):
        self.sampling = sampling
        self._rng = (
            np.random.Generator(np.random.PCG64(sampling.seed))
            if isinstance(sampling, Nucleus)
            else None
        )

    def __call__(self, logits: np.ndarray) -> int:
        if isinstance(self.sampling, GreedyArgmax):
            return int(np.argmax(logits))
        probs = softmax_vector(logits / self.sampling.temperature)
        order = np.argsort(-probs, kind="stable")
        cum = np.cumsum(probs[order])
        cut = int(np.searchsorted(cum, self.sampling.top_p, side="left"))
        cut = min(cut, probs.size - 1)
        kept = order[: cut + 1]
        weights = probs[kept] / probs[kept].sum()
        return int(self._rng.choice(kept, p=weights))


def _attend_row(q, K, V, d_k: int) -> tuple[np.ndarray, np.ndarray]:
    """One query against a stack of key/value rows; weights sum to 1."""
    logits = (K @ q) / np.sqrt(float(d_k))
    weights = softmax_vector(logits)
    return weights, weights @ V


@dataclass
class HeadCacheState:
    policy: CompressionPolicy
    positions: list[int]
    K: np.ndarray
    V: np.ndarray
    # Full-length cumulative attention scores; materialized only for
    # policies that contain the frequency atom.
    scores: np.ndarray | None
    pending_output: np.ndarray
    last_row_recovery: float

    @property
    def sidecar(self) -> np.ndarray | None:
        """Cumulative-score entries of the retained positions."""
        if self.scores is None:
            return None
        return self.scores[np.asarray(self.positions, dtype=np.intp)]


@dataclass
class StepRecord:
    step: int
    token_id: int
    head_retained: dict[tuple[int, int], int]
    total_cache_tokens: int
    mean_recovery: float | None
    retained_positions: dict[tuple[int, int], tuple[int, ...]] | None = None


@dataclass
class CompressedCache:
    """Per-head compressed KV state owned by one generation session."""

    prompt_len: int
    seq_len: int
    annotations: list[TokenAnnotation]
    heads: dict[tuple[int, int], HeadCacheState]
    profile: HeadProfile
    diagnostics: bool = False
    shadow_keys: dict[tuple[int, int], list[np.ndarray]] | None = None
    last_record: StepRecord | None = None

    def total_retained(self) -> int:
        return sum(len(state.positions) for state in self.heads.values())


def _policy_context(
    cache: CompressedCache, state: HeadCacheState, current_len: int
) -> PolicyContext:
    scores = state.scores
    if scores is None or scores.shape[0] != current_len:
        scores = np.zeros(current_len)
    return PolicyContext(
        annotations=tuple(cache.annotations[:current_len]),
        prompt_len=cache.prompt_len,
        current_len=current_len,
        cumulative_scores=scores,
    )


def prompt_head_data(model, tokens: list[int], prompt_len: int | None = None):
    """Full-context pass: per-head (K, V, A) plus profiling inputs.

    ``prompt_len`` defaults to the full token list; diagnostic callers
    re-encoding a prompt plus generated tokens pass the true prompt length
    so model rows and policy budgets stay anchored to it.

    Returns (annotations, matrices, head_data) where matrices maps each
    (layer, head) to its (K, V, A-matrix) and head_data to the
    (AttentionMap, PolicyContext) pair the profiler consumes.
    """
    if not tokens:
        raise EngineError("empty prompt")
    cfg = model.config
    n = len(tokens)
    p = n if prompt_len is None else prompt_len
    if not 1 <= p <= n:
        raise EngineError(f"prompt_len {p} out of range for {n} tokens")
    annotations = classify_tokens(tokens, model.vocab)
    matrices: dict[tuple[int, int], tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    head_data = {}
    for layer, head in cfg.head_grid():
        K = np.vstack(
            [
                model.k_row(layer, head, pos, annotations[pos].klass, p)
                for pos in range(n)
            ]
        )
        V = np.vstack([model.v_row(layer, head, pos) for pos in range(n)])
        Q = np.vstack([model.q_row(layer, head, pos, p) for pos in range(n)])
        A, _ = causal_attention(Q, K, V, cfg.head_dim)
        ctx = PolicyContext(
            annotations=tuple(annotations),
            prompt_len=p,
            current_len=n,
            cumulative_scores=A.matrix.sum(axis=0),
        )
        matrices[(layer, head)] = (K, V, A.matrix)
        head_data[(layer, head)] = (A, ctx)
    return annotations, matrices, head_data


def encode_prompt(
    model,
    prompt_tokens: list[int],
    profiler_cfg: ProfilerConfig | None,
    fixed_policy: CompressionPolicy | None = None,
    threads: int | None = None,
    diagnostics: bool = True,
) -> tuple[HeadProfile, CompressedCache]:
    """Prompt encoding with one-shot profiling and cache compression.

    For every head: compute K, Q, V and the full attention map, select the
    head's policy (or impose ``fixed_policy``), and store the compressed
    rows. The profile is immutable afterwards.
    """
    if profiler_cfg is None and fixed_policy is None:
        raise EngineError("need a profiler config or a fixed policy")
    cfg = model.config
    n = len(prompt_tokens)
    annotations, full_rows, head_data = prompt_head_data(model, prompt_tokens)

    if fixed_policy is not None:
        decisions = {}
        for key, (A, ctx) in head_data.items():
            report = evaluate_policy(A, ctx, fixed_policy)
            decisions[key] = HeadDecision(
                fixed_policy, report.recovery, report.cost_tokens
            )
        profile = HeadProfile(decisions)
    else:
        profile = profile_model(
            head_data, profiler_cfg, grid=cfg.head_grid(), threads=threads
        )

    heads = {}
    shadow = {} if diagnostics else None
    for key, (K, V, A_matrix) in full_rows.items():
        _, ctx = head_data[key]
        policy = profile[key].policy
        retained = retained_indices(policy, ctx)
        K_C, V_C = apply_policy(K, V, retained)
        scores = (
            ctx.cumulative_scores.copy()
            if PolicyAtom.FREQUENT in policy.atoms
            else None
        )
        last_row = A_matrix[n - 1]
        heads[key] = HeadCacheState(
            policy=policy,
            positions=list(retained.indices),
            K=K_C,
            V=V_C,
            scores=scores,
            pending_output=last_row @ V,
            last_row_recovery=float(last_row[retained.as_array()].sum())
            if len(retained)
            else 0.0,
        )
        if diagnostics:
            shadow[key] = [K[i] for i in range(n)]

    cache = CompressedCache(
        prompt_len=n,
        seq_len=n,
        annotations=list(annotations),
        heads=heads,
        profile=profile,
        diagnostics=diagnostics,
        shadow_keys=shadow,
    )
    return profile, cache


def _check_cache(model, cache: CompressedCache):
    expected = set(model.config.head_grid())
    if set(cache.heads) != expected or set(cache.profile.decisions) != expected:
        raise EngineError(
            "cache/profile mismatch: head grid does not match the model"
        )


def generate_step(
    model,
    cache: CompressedCache,
    last_token: int | None = None,
    sampler: _Sampler | GreedyArgmax | Nucleus | None = None,
) -> tuple[int, CompressedCache]:
    """Advance one decoding step and sample the next token.

    When ``last_token`` is given, its K/V row joins every head's cache at
    the next position, attention runs over the retained positions plus
    that row, cumulative scores are updated, and the head's frozen policy
    is re-applied to the grown context before sampling. The first step of
    a session passes ``last_token=None``: the prompt's final query already
    produced the pending outputs, so it only samples.
    """
    _check_cache(model, cache)
    if sampler is None or not isinstance(sampler, _Sampler):
        sampler = _Sampler(sampler if sampler is not None else GreedyArgmax())

    recoveries: list[float] = []
    if last_token is not None:
        pos = cache.seq_len
        current_len = pos + 1
        klass = model.vocab.classify_id(last_token)
        cache.annotations.append(TokenAnnotation(pos, last_token, klass))
        prompt_len = cache.prompt_len
        d_k = model.config.head_dim
        for key, state in cache.heads.items():
            layer, head = key
            k_new = model.k_row(layer, head, pos, klass, prompt_len)
            v_new = model.v_row(layer, head, pos)
            q = model.q_row(layer, head, pos, prompt_len)
            K_att = np.vstack([state.K, k_new[None, :]])
            V_att = np.vstack([state.V, v_new[None, :]])
            attended = state.positions + [pos]
            weights, output = _attend_row(q, K_att, V_att, d_k)

            if state.scores is not None:
                ctx_old = PolicyContext(
                    annotations=tuple(cache.annotations[:pos]),
                    prompt_len=prompt_len,
                    current_len=pos,
                    cumulative_scores=state.scores,
                )
                updated = update_cumulative_scores(
                    ctx_old, weights[:-1], RetainedSet.of(state.positions)
                )
                state.scores = updated.cumulative_scores.copy()

            ctx_new = _policy_context(cache, state, current_len)
            new_retained = retained_indices(state.policy, ctx_new, candidates=attended)
            keep = set(new_retained.indices)
            sel = [i for i, p in enumerate(attended) if p in keep]
            state.positions = [attended[i] for i in sel]
            state.K = K_att[sel]
            state.V = V_att[sel]
            state.pending_output = output

            if cache.diagnostics:
                cache.shadow_keys[key].append(k_new)
                full_K = np.vstack(cache.shadow_keys[key])
                full_weights = softmax_vector((full_K @ q) / np.sqrt(float(d_k)))
                recovery = float(
                    full_weights[np.asarray(attended, dtype=np.intp)].sum()
                )
                state.last_row_recovery = recovery
                recoveries.append(recovery)
        cache.seq_len = current_len
    elif cache.diagnostics:
        recoveries = [s.last_row_recovery for s in cache.heads.values()]

    concat = np.concatenate(
        [cache.heads[key].pending_output for key in sorted(cache.heads)]
    )
    next_token = sampler(model.head_logits(concat))

    cache.last_record = StepRecord(
        step=0,
        token_id=next_token,
        head_retained={k: len(s.positions) for k, s in cache.heads.items()},
        total_cache_tokens=cache.total_retained(),
        mean_recovery=float(np.mean(recoveries)) if recoveries else None,
        retained_positions=(
            {k: tuple(s.positions) for k, s in cache.heads.items()}
            if cache.diagnostics
            else None
        ),
    )
    return next_token, cache


@dataclass
class GenerationResult:
    tokens: list[int]
    profile: HeadProfile
    records: list[StepRecord]
    cache: CompressedCache


def generate(
    model,
    prompt_tokens: list[int],
    profiler_cfg: ProfilerConfig,
    gen_cfg: GenerationConfig,
    threads: int | None = None,
    diagnostics: bool = True,
) -> GenerationResult:
    """Encode the prompt once, then run max_new_tokens decoding steps."""
    profile, cache = encode_prompt(
        model, prompt_tokens, profiler_cfg, threads=threads, diagnostics=diagnostics
    )
    return _run_decode(model, cache, profile, gen_cfg)


def generate_fixed_baseline(
    model,
    prompt_tokens: list[int],
    policy: CompressionPolicy,
    gen_cfg: GenerationConfig,
    diagnostics: bool = True,
) -> GenerationResult:
    """Impose one policy on every head, skipping profiling (H2O-style)."""
    profile, cache = encode_prompt(
        model, prompt_tokens, None, fixed_policy=policy, diagnostics=diagnostics
    )
    return _run_decode(model, cache, profile, gen_cfg)


def _run_decode(
    model, cache: CompressedCache, profile: HeadProfile, gen_cfg: GenerationConfig
) -> GenerationResult:
    sampler = _Sampler(gen_cfg.sampling)
    tokens: list[int] = []
    records: list[StepRecord] = []
    last: int | None = None
    for step in range(1, gen_cfg.max_new_tokens + 1):
        token, cache = generate_step(model, cache, last, sampler)
        record = cache.last_record
        record.step = step
        tokens.append(token)
        records.append(record)
        last = token
    return GenerationResult(tokens, profile, records, cache)


def reference_generate(
    model, prompt_tokens: list[int], gen_cfg: GenerationConfig
) -> GenerationResult:
    """Uncompressed baseline engine: every position stays cached forever.

    Kept free of any policy or eviction machinery so compressed runs can
    be checked against it.
    """
    cfg = model.config
    n = len(prompt_tokens)
    annotations, matrices, _ = prompt_head_data(model, prompt_tokens)
    keys: dict[tuple[int, int], list[np.ndarray]] = {}
    values: dict[tuple[int, int], list[np.ndarray]] = {}
    pending: dict[tuple[int, int], np.ndarray] = {}
    for key, (K, V, A_matrix) in matrices.items():
        keys[key] = [K[i] for i in range(n)]
        values[key] = [V[i] for i in range(n)]
        pending[key] = A_matrix[n - 1] @ V

    sampler = _Sampler(gen_cfg.sampling)
    tokens: list[int] = []
    records: list[StepRecord] = []
    vocab = model.vocab
    seq_len = n
    last: int | None = None
    for step in range(1, gen_cfg.max_new_tokens + 1):
        if last is not None:
            pos = seq_len
            klass = vocab.classify_id(last)
            annotations.append(TokenAnnotation(pos, last, klass))
            for key in keys:
                layer, head = key
                keys[key].append(model.k_row(layer, head, pos, klass, n))
                values[key].append(model.v_row(layer, head, pos))
                q = model.q_row(layer, head, pos, n)
                K_att = np.vstack(keys[key])
                V_att = np.vstack(values[key])
                weights, output = _attend_row(q, K_att, V_att, cfg.head_dim)
                pending[key] = output
            seq_len += 1
        concat = np.concatenate([pending[key] for key in sorted(pending)])
        token = sampler(model.head_logits(concat))
        tokens.append(token)
        records.append(
            StepRecord(
                step=step,
                token_id=token,
                head_retained={k: seq_len for k in keys},
                total_cache_tokens=seq_len * len(keys),
                mean_recovery=1.0,
            )
        )
        last = token

    final_heads = {
        key: HeadCacheState(
            policy=CompressionPolicy(frozenset({PolicyAtom.FULL})),
            positions=list(range(seq_len)),
            K=np.vstack(keys[key]),
            V=np.vstack(values[key]),
            scores=None,
            pending_output=pending[key],
            last_row_recovery=1.0,
        )
        for key in keys
    }
    cache = CompressedCache(
        prompt_len=n,
        seq_len=seq_len,
        annotations=annotations,
        heads=final_heads,
        profile=HeadProfile({}),
        diagnostics=False,
    )
    return GenerationResult(tokens, HeadProfile({}), records, cache)


def records_to_ndjson(records: list[StepRecord], num_layers: int, num_heads: int) -> str:
    """One JSON object per step with retained counts in layer-major order."""
    lines = []
    for rec in records:
        grid = [
            [rec.head_retained[(layer, head)] for head in range(num_heads)]
            for layer in range(num_layers)
        ]
        lines.append(
            json.dumps(
                {
                    "step": rec.step,
                    "token_id": rec.token_id,
                    "head_retained": grid,
                    "total_cache_tokens": rec.total_cache_tokens,
                    "mean_recovery": rec.mean_recovery,
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")
