"""Attention-trace file I/O.

Binary container: magic ``AKVT``, version u16, the model config as
fixed-width little-endian integers, a token table, then per
(layer, head, step) blocks of length-prefixed float64 arrays holding the
K, V, and Q rows of that position. Round-trips are lossless bit-for-bit.
An NDJSON variant with the same fields is accepted for hand-written
fixtures.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ModelError, linear_head_weights
from .tokens import TokenAnnotation, TokenClass, VocabMetadata

MAGIC = b"AKVT"
VERSION = 1

_CLASS_CODE = {TokenClass.SPECIAL: 0, TokenClass.PUNCTUATION: 1, TokenClass.OTHER: 2}
_CODE_CLASS = {v: k for k, v in _CLASS_CODE.items()}


class TraceError(Exception):
    """Base class for trace file problems."""


class TraceHeaderError(TraceError):
    """Malformed or invalid header (magic, version, config counts)."""


class TraceDimensionError(TraceError):
    """Row lengths or indices inconsistent with the declared config."""


class TraceTruncatedError(TraceError):
    """File ends in the middle of a structure."""


@dataclass(frozen=True)
class TraceBlock:
    step: int
    k: np.ndarray
    v: np.ndarray
    q: np.ndarray


@dataclass
class AttentionTrace:
    config: ModelConfig
    tokens: list[TokenAnnotation]
    blocks: dict[tuple[int, int], list[TraceBlock]] = field(default_factory=dict)

    def __post_init__(self):
        d = self.config.head_dim
        for (layer, head), entries in self.blocks.items():
            if not 0 <= layer < self.config.num_layers:
                raise TraceDimensionError(f"layer {layer} out of range")
            if not 0 <= head < self.config.num_heads:
                raise TraceDimensionError(f"head {head} out of range")
            prev_step = -1
            for block in entries:
                if block.step <= prev_step:
                    raise TraceDimensionError(
                        f"steps not strictly increasing at (layer={layer}, "
                        f"head={head}, step={block.step})"
                    )
                prev_step = block.step
                for name, row in (("K", block.k), ("V", block.v), ("Q", block.q)):
                    if row.shape != (d,):
                        raise TraceDimensionError(
                            f"{name} row at (layer={layer}, head={head}, "
                            f"step={block.step}) has length {row.shape}, "
                            f"expected {d}"
                        )
                    if not np.all(np.isfinite(row)):
                        raise TraceDimensionError(
                            f"{name} row at (layer={layer}, head={head}, "
                            f"step={block.step}) has non-finite entries"
                        )

    def vocab_metadata(self) -> VocabMetadata:
        """Reconstruct the special/punctuation id sets from the token table."""
        special = {t.token_id for t in self.tokens if t.klass is TokenClass.SPECIAL}
        punct = {
            t.token_id for t in self.tokens if t.klass is TokenClass.PUNCTUATION
        } - special
        return VocabMetadata(frozenset(special), frozenset(punct))


def _write_binary(trace: AttentionTrace, buf: io.BufferedIOBase):
    cfg = trace.config
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(
        struct.pack(
            "<IIIIq",
            cfg.num_layers,
            cfg.num_heads,
            cfg.head_dim,
            cfg.vocab_size,
            cfg.seed,
        )
    )
    buf.write(struct.pack("<I", len(trace.tokens)))
    for tok in trace.tokens:
        buf.write(struct.pack("<IB", tok.token_id, _CLASS_CODE[tok.klass]))
    for (layer, head) in sorted(trace.blocks):
        for block in trace.blocks[(layer, head)]:
            buf.write(struct.pack("<HHI", layer, head, block.step))
            for row in (block.k, block.v, block.q):
                data = np.ascontiguousarray(row, dtype="<f8")
                buf.write(struct.pack("<I", data.size))
                buf.write(data.tobytes())


def write_trace(trace: AttentionTrace, sink):
    """Write a trace to a path or binary file object."""
    if hasattr(sink, "write"):
        _write_binary(trace, sink)
    else:
        with open(sink, "wb") as fh:
            _write_binary(trace, fh)


def write_trace_ndjson(trace: AttentionTrace, sink):
    """Write the NDJSON text variant of the trace."""
    lines = [
        json.dumps(
            {
                "magic": "AKVT",
                "version": VERSION,
                "config": {
                    "num_layers": trace.config.num_layers,
                    "num_heads": trace.config.num_heads,
                    "head_dim": trace.config.head_dim,
                    "vocab_size": trace.config.vocab_size,
                    "seed": trace.config.seed,
                },
            },
            sort_keys=True,
        ),
        json.dumps(
            {
                "tokens": [
                    {"id": t.token_id, "klass": t.klass.value} for t in trace.tokens
                ]
            },
            sort_keys=True,
        ),
    ]
    for (layer, head) in sorted(trace.blocks):
        for block in trace.blocks[(layer, head)]:
            lines.append(
                json.dumps(
                    {
                        "layer": layer,
                        "head": head,
                        "step": block.step,
                        "k": block.k.tolist(),
                        "v": block.v.tolist(),
                        "q": block.q.tolist(),
                    },
                    sort_keys=True,
                )
            )
    text = "\n".join(lines) + "\n"
    if hasattr(sink, "write"):
        sink.write(text)
    else:
        with open(sink, "w", encoding="utf-8") as fh:
            fh.write(text)


def _read_exact(buf: io.BufferedIOBase, count: int, what: str) -> bytes:
    data = buf.read(count)
    if len(data) != count:
        raise TraceTruncatedError(f"truncated payload while reading {what}")
    return data


def _read_binary(buf: io.BufferedIOBase) -> AttentionTrace:
    magic = buf.read(4)
    if len(magic) < 4 or magic != MAGIC:
        raise TraceHeaderError(f"malformed header: bad magic {magic!r}")
    (version,) = struct.unpack("<H", _read_exact(buf, 2, "version"))
    if version != VERSION:
        raise TraceHeaderError(f"unsupported version {version}")
    fields = struct.unpack("<IIIIq", _read_exact(buf, 24, "model config"))
    num_layers, num_heads, head_dim, vocab_size, seed = fields
    try:
        config = ModelConfig(num_layers, num_heads, head_dim, vocab_size, seed)
    except ModelError as exc:
        raise TraceHeaderError(f"malformed header: {exc}") from exc
    (num_tokens,) = struct.unpack("<I", _read_exact(buf, 4, "token count"))
    tokens = []
    for pos in range(num_tokens):
        token_id, code = struct.unpack("<IB", _read_exact(buf, 5, f"token {pos}"))
        if code not in _CODE_CLASS:
            raise TraceHeaderError(f"token {pos}: unknown class code {code}")
        tokens.append(TokenAnnotation(pos, token_id, _CODE_CLASS[code]))

    blocks: dict[tuple[int, int], list[TraceBlock]] = {}
    while True:
        tag = buf.read(8)
        if not tag:
            break
        if len(tag) < 8:
            raise TraceTruncatedError("truncated payload while reading block tag")
        layer, head, step = struct.unpack("<HHI", tag)
        rows = []
        for name in ("K", "V", "Q"):
            (length,) = struct.unpack(
                "<I", _read_exact(buf, 4, f"{name} length at step {step}")
            )
            raw = _read_exact(buf, 8 * length, f"{name} row at step {step}")
            rows.append(np.frombuffer(raw, dtype="<f8").astype(np.float64))
        blocks.setdefault((layer, head), []).append(
            TraceBlock(step, rows[0], rows[1], rows[2])
        )
    return AttentionTrace(config, tokens, blocks)


def _read_ndjson(text: str) -> AttentionTrace:
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise TraceHeaderError("malformed header: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise TraceHeaderError(
            f"malformed header: no AKVT magic and first line is not JSON ({exc})"
        ) from exc
    if not isinstance(header, dict) or header.get("magic") != "AKVT":
        raise TraceHeaderError("malformed header: missing AKVT magic")
    if header.get("version") != VERSION:
        raise TraceHeaderError(f"unsupported version {header.get('version')}")
    try:
        config = ModelConfig(**header["config"])
    except (TypeError, KeyError, ModelError) as exc:
        raise TraceHeaderError(f"malformed header: {exc}") from exc
    if len(lines) < 2:
        raise TraceTruncatedError("truncated payload: missing token table")
    table = json.loads(lines[1])
    tokens = []
    for pos, entry in enumerate(table.get("tokens", [])):
        try:
            klass = TokenClass(entry["klass"])
        except ValueError as exc:
            raise TraceHeaderError(
                f"token {pos}: unknown class {entry['klass']!r}"
            ) from exc
        tokens.append(TokenAnnotation(pos, int(entry["id"]), klass))
    blocks: dict[tuple[int, int], list[TraceBlock]] = {}
    for line in lines[2:]:
        try:
            rec = json.loads(line)
            block = TraceBlock(
                int(rec["step"]),
                np.asarray(rec["k"], dtype=np.float64),
                np.asarray(rec["v"], dtype=np.float64),
                np.asarray(rec["q"], dtype=np.float64),
            )
            key = (int(rec["layer"]), int(rec["head"]))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise TraceTruncatedError(f"truncated payload: bad block line: {exc}")
        blocks.setdefault(key, []).append(block)
    return AttentionTrace(config, tokens, blocks)


def read_trace(source) -> AttentionTrace:
    """Read a trace from a path or binary file object (binary or NDJSON)."""
    if hasattr(source, "read"):
        data = source.read()
    else:
        with open(source, "rb") as fh:
            data = fh.read()
    if data[:4] == MAGIC:
        return _read_binary(io.BytesIO(data))
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise TraceHeaderError("malformed header: neither AKVT binary nor NDJSON") from exc
    return _read_ndjson(text)


class TraceModel:
    """Model handle backed by recorded rows.

    Replay is teacher-forced: the K/V/Q rows at each position are the
    recorded ones regardless of which tokens the current run samples. The
    next-token head is reconstructed from the trace's seed, so replaying a
    synthetic trace with matching settings reproduces the original run.
    """

    def __init__(self, trace: AttentionTrace):
        self.trace = trace
        self.config = trace.config
        self.vocab = trace.vocab_metadata()
        self._rows: dict[tuple[int, int], dict[int, TraceBlock]] = {}
        n_positions = len(trace.tokens)
        for key in trace.config.head_grid():
            entries = trace.blocks.get(key)
            if entries is None:
                raise TraceDimensionError(
                    f"trace has no blocks for (layer={key[0]}, head={key[1]})"
                )
            by_step = {b.step: b for b in entries}
            missing = [s for s in range(n_positions) if s not in by_step]
            if missing:
                raise TraceDimensionError(
                    f"trace is missing steps {missing[:4]} for "
                    f"(layer={key[0]}, head={key[1]})"
                )
            self._rows[key] = by_step
        self.max_context = n_positions
        self._head_weights = linear_head_weights(self.config)

    def _block(self, layer: int, head: int, pos: int) -> TraceBlock:
        if pos >= self.max_context:
            raise ModelError(
                f"position {pos} beyond trace length {self.max_context}"
            )
        return self._rows[(layer, head)][pos]

    def prompt_token_ids(self, prompt_len: int) -> list[int]:
        if prompt_len > len(self.trace.tokens):
            raise ModelError(
                f"prompt_len {prompt_len} exceeds trace length {len(self.trace.tokens)}"
            )
        return [t.token_id for t in self.trace.tokens[:prompt_len]]

    def k_row(self, layer, head, pos, klass, prompt_len) -> np.ndarray:
        return self._block(layer, head, pos).k

    def v_row(self, layer, head, pos) -> np.ndarray:
        return self._block(layer, head, pos).v

    def q_row(self, layer, head, pos, prompt_len) -> np.ndarray:
        return self._block(layer, head, pos).q

    def head_logits(self, concat_outputs: np.ndarray) -> np.ndarray:
        return self._head_weights @ concat_outputs
