"""Shared decoder-only transformer with a language head and a flow head.

One stack of pre-norm blocks (RMSNorm, multi-head causal attention, SiLU MLP)
consumes the interleaved token stream; modality projectors lift text ids,
image patches, robot state and (noisy) action rows into the same embedding
space, with the flow time tau appended to every action row before projection
(clean rows use tau = 1, the clean endpoint of the interpolation path).

Two execution paths share the same weights: a tape-recorded forward for
training and a plain-numpy engine with a KV cache for inference, including
the truncate/re-append cycle that re-runs the action suffix during Euler
denoising. Their agreement is part of the test surface.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional, Sequence

import numpy as np

from . import numerics as nm
from . import sequence as sq
from .vocab import VOCAB, Delimiter


class BackboneError(Exception):
    pass


class LengthError(BackboneError):
    pass


class CacheError(BackboneError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    dim: int = 64
    heads: int = 4
    head_dim: int = 16
    vocab: int = len(VOCAB)
    action_dim: int = 3
    horizon: int = 4
    max_positions: int = 1024
    patch_dim: int = 48
    state_dim: int = 3
    mlp_hidden: int = 256
    block_bidirectional: str = "off"

    def __post_init__(self):
        if self.dim != self.heads * self.head_dim:
            raise BackboneError(f"dim {self.dim} != heads {self.heads} x head_dim {self.head_dim}")
        if self.vocab < len(Delimiter):
            raise BackboneError("vocab must include the delimiter ids")
        if self.horizon < 1:
            raise BackboneError("horizon must be >= 1")

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in dc_fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in dc_fields(cls)}
        for line in text.strip().splitlines():
            k, v = line.split("=", 1)
            if k not in types:
                raise BackboneError(f"unknown config key {k!r}")
            kwargs[k] = v if k == "block_bidirectional" else int(v)
        return cls(**kwargs)

    def hash(self) -> int:
        return int.from_bytes(hashlib.sha256(self.to_text().encode()).digest()[:8], "little")


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declaration order; also the checkpoint blob order."""
    d, m = cfg.dim, cfg.mlp_hidden
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("tok_emb", (cfg.vocab, d)),
        ("pos_emb", (cfg.max_positions, d)),
        ("patch_w", (cfg.patch_dim, d)), ("patch_b", (d,)),
        ("state_w", (cfg.state_dim, d)), ("state_b", (d,)),
        ("act_w", (cfg.action_dim + 1, d)), ("act_b", (d,)),
    ]
    for i in range(cfg.layers):
        p = f"L{i}."
        shapes += [
            (p + "attn_norm", (d,)),
            (p + "wq", (d, d)), (p + "bq", (d,)),
            (p + "wk", (d, d)), (p + "bk", (d,)),
            (p + "wv", (d, d)), (p + "bv", (d,)),
            (p + "wo", (d, d)), (p + "bo", (d,)),
            (p + "mlp_norm", (d,)),
            (p + "w1", (d, m)), (p + "b1", (m,)),
            (p + "w2", (m, d)), (p + "b2", (d,)),
        ]
    shapes += [
        ("final_norm", (d,)),
        ("lm_w", (d, cfg.vocab)), ("lm_b", (cfg.vocab,)),
        ("flow_w", (d, cfg.action_dim)), ("flow_b", (cfg.action_dim,)),
    ]
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for _, s in _param_shapes(cfg))


class Params:
    """Named parameter tensors in fixed declaration order."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, nm.Tensor]):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> nm.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return [n for n, _ in _param_shapes(self.cfg)]

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "Params":
        return Params(self.cfg, {n: nm.Tensor(t.data.copy(), requires_grad=True, dtype=t.data.dtype)
                                 for n, t in self.tensors.items()})


def init_params(cfg: ModelConfig, rng: np.random.Generator, std: float = 0.02,
                dtype=np.float32) -> Params:
    tensors = {}
    for name, shape in _param_shapes(cfg):
        if name.endswith(("_norm",)):
            data = np.ones(shape, dtype=dtype)
        elif name.endswith(("_b", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2")) or shape == (cfg.dim,):
            data = np.zeros(shape, dtype=dtype)
        else:
            data = (rng.standard_normal(shape) * std).astype(dtype)
        tensors[name] = nm.Tensor(data, requires_grad=True, dtype=dtype)
    return Params(cfg, tensors)


# ---------------------------------------------------------------------------
# Training path (tape ops)
# ---------------------------------------------------------------------------


def embed_stream(stream_or_seq, params: Params) -> nm.Tensor:
    """Project every token into the shared embedding space and add positions."""
    stream = stream_or_seq if isinstance(stream_or_seq, sq.TokenStream) else sq.flatten(stream_or_seq)
    cfg = params.cfg
    if stream.n > cfg.max_positions or stream.positions.max(initial=0) >= cfg.max_positions:
        raise LengthError(f"{stream.n} tokens exceed max_positions {cfg.max_positions}")
    pieces = []
    text_idx = np.flatnonzero(stream.kinds == sq.K_TEXT)
    if text_idx.size:
        ids = stream.text_ids[text_idx]
        if ids.min() < 0 or ids.max() >= cfg.vocab:
            raise BackboneError("text id outside vocabulary")
        pieces.append((nm.gather_rows(params["tok_emb"], ids), text_idx))
    if stream.patch_rows.size:
        if stream.patch_vals.shape[1] != cfg.patch_dim:
            raise BackboneError(f"patch dim {stream.patch_vals.shape[1]} != {cfg.patch_dim}")
        x = nm.add_bias(nm.matmul(nm.Tensor(stream.patch_vals), params["patch_w"]), params["patch_b"])
        pieces.append((x, stream.patch_rows))
    if stream.state_rows.size:
        if stream.state_vals.shape[1] != cfg.state_dim:
            raise BackboneError(f"state dim {stream.state_vals.shape[1]} != {cfg.state_dim}")
        x = nm.add_bias(nm.matmul(nm.Tensor(stream.state_vals), params["state_w"]), params["state_b"])
        pieces.append((x, stream.state_rows))
    if stream.action_rows.size:
        if stream.action_vals.shape[1] != cfg.action_dim:
            raise BackboneError(f"action dim {stream.action_vals.shape[1]} != {cfg.action_dim}")
        inp = np.concatenate([stream.action_vals, stream.action_taus[:, None]], axis=1)
        x = nm.add_bias(nm.matmul(nm.Tensor(inp), params["act_w"]), params["act_b"])
        pieces.append((x, stream.action_rows))
    emb = nm.row_assemble(stream.n, pieces)
    pos = nm.gather_rows(params["pos_emb"], stream.positions)
    return nm.add(emb, pos)


def _block(x: nm.Tensor, params: Params, i: int, bounds, mask: Optional[np.ndarray]) -> nm.Tensor:
    cfg = params.cfg
    p = f"L{i}."
    a = nm.rms_norm(x, params[p + "attn_norm"])
    q = nm.add_bias(nm.matmul(a, params[p + "wq"]), params[p + "bq"])
    k = nm.add_bias(nm.matmul(a, params[p + "wk"]), params[p + "bk"])
    v = nm.add_bias(nm.matmul(a, params[p + "wv"]), params[p + "bv"])
    if mask is None:
        attn = nm.block_causal_attention(q, k, v, bounds, cfg.heads)
    else:
        attn = nm.masked_attention(q, k, v, mask, cfg.heads)
    x = nm.add(x, nm.add_bias(nm.matmul(attn, params[p + "wo"]), params[p + "bo"]))
    m = nm.rms_norm(x, params[p + "mlp_norm"])
    h = nm.silu(nm.add_bias(nm.matmul(m, params[p + "w1"]), params[p + "b1"]))
    return nm.add(x, nm.add_bias(nm.matmul(h, params[p + "w2"]), params[p + "b2"]))


def forward(seq_or_stream, params: Params, mask: Optional[np.ndarray] = None) -> nm.Tensor:
    """Hidden states [n, d] after the final norm (tape-recorded when active).

    With mask=None the fused block-causal attention is used, which equals the
    strict-causal attention_mask exactly; an explicit mask routes through the
    primitive composition (needed for block_bidirectional variants).
    """
    if isinstance(seq_or_stream, sq.TokenStream):
        stream = seq_or_stream
    elif isinstance(seq_or_stream, sq.PackedBatch):
        stream = sq.flatten(seq_or_stream.members)
    else:
        stream = sq.flatten(seq_or_stream)
    cfg = params.cfg
    if mask is None and cfg.block_bidirectional != "off":
        raise BackboneError("non-causal block attention needs an explicit mask")
    x = embed_stream(stream, params)
    for i in range(cfg.layers):
        x = _block(x, params, i, stream.bounds, mask)
    return nm.rms_norm(x, params["final_norm"])


def lm_logits(hidden_rows: nm.Tensor, params: Params) -> nm.Tensor:
    """Linear map d -> V over the selected readout rows (no softmax)."""
    return nm.add_bias(nm.matmul(hidden_rows, params["lm_w"]), params["lm_b"])


def flow_field(hidden_rows: nm.Tensor, params: Params) -> nm.Tensor:
    """Velocity readout for the final noisy action segment (exactly h rows)."""
    if hidden_rows.shape[0] != params.cfg.horizon:
        raise BackboneError(f"flow_field expects {params.cfg.horizon} rows, got {hidden_rows.shape[0]}")
    return _flow_head(hidden_rows, params)


def _flow_head(hidden_rows: nm.Tensor, params: Params) -> nm.Tensor:
    return nm.add_bias(nm.matmul(hidden_rows, params["flow_w"]), params["flow_b"])


# ---------------------------------------------------------------------------
# Inference engine (plain numpy, KV cache)
# ---------------------------------------------------------------------------


class KVCache:
    """Per-layer key/value storage with an append cursor and explicit truncate."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.keys = [np.zeros((cfg.max_positions, cfg.dim), dtype=np.float32) for _ in range(cfg.layers)]
        self.values = [np.zeros((cfg.max_positions, cfg.dim), dtype=np.float32) for _ in range(cfg.layers)]
        self.cursor = 0

    def truncate(self, to: int) -> None:
        if not (0 <= to <= self.cursor):
            raise CacheError(f"truncate to {to} outside [0, {self.cursor}]")
        self.cursor = to


def _np_rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x * (gain / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps))


def _np_silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


class DecodeSession:
    """Incremental decoding over one sequence; exclusive owner of its cache."""

    def __init__(self, params: Params, cfg: Optional[ModelConfig] = None):
        self.cfg = cfg or params.cfg
        self.w = {n: t.data for n, t in params.tensors.items()}
        self.cache = KVCache(self.cfg)
        self.last_text_id = -1
        self.last_hidden: Optional[np.ndarray] = None

    @property
    def cursor(self) -> int:
        return self.cache.cursor

    def truncate(self, to: int) -> None:
        self.cache.truncate(to)

    def _embed(self, piece: sq.TokenStream, pos0: int) -> np.ndarray:
        cfg, w = self.cfg, self.w
        x = np.zeros((piece.n, cfg.dim), dtype=np.float32)
        text_idx = np.flatnonzero(piece.kinds == sq.K_TEXT)
        if text_idx.size:
            x[text_idx] = w["tok_emb"][piece.text_ids[text_idx]]
        if piece.patch_rows.size:
            x[piece.patch_rows] = piece.patch_vals @ w["patch_w"] + w["patch_b"]
        if piece.state_rows.size:
            x[piece.state_rows] = piece.state_vals @ w["state_w"] + w["state_b"]
        if piece.action_rows.size:
            inp = np.concatenate([piece.action_vals, piece.action_taus[:, None]], axis=1)
            x[piece.action_rows] = inp @ w["act_w"] + w["act_b"]
        x += w["pos_emb"][pos0:pos0 + piece.n]
        return x

    def append(self, piece: sq.TokenStream, full_spans: Sequence[tuple[int, int]] = ()) -> np.ndarray:
        """Run the stack over new tokens against the cached prefix; returns
        final-norm hidden rows of the appended tokens."""
        cfg, w = self.cfg, self.w
        t = piece.n
        if t == 0:
            return np.zeros((0, cfg.dim), dtype=np.float32)
        c0 = self.cache.cursor
        if c0 + t > cfg.max_positions:
            raise LengthError(f"cache would grow to {c0 + t} > max_positions {cfg.max_positions}")
        x = self._embed(piece, c0)
        hd, H = cfg.head_dim, cfg.heads
        # allowed[i, j] over the t x (c0 + t) attention window
        cols = np.arange(c0 + t)
        rows = np.arange(t)[:, None]
        allowed = cols[None, :] <= (c0 + rows)
        for a, b in full_spans:
            allowed[a:b, c0 + a:c0 + b] = True
        neg = np.float32(-np.inf)
        for i in range(cfg.layers):
            p = f"L{i}."
            a = _np_rmsnorm(x, w[p + "attn_norm"])
            q = a @ w[p + "wq"] + w[p + "bq"]
            k = a @ w[p + "wk"] + w[p + "bk"]
            v = a @ w[p + "wv"] + w[p + "bv"]
            self.cache.keys[i][c0:c0 + t] = k
            self.cache.values[i][c0:c0 + t] = v
            K = self.cache.keys[i][:c0 + t]
            V = self.cache.values[i][:c0 + t]
            qh = q.reshape(t, H, hd).transpose(1, 0, 2)
            kh = K.reshape(c0 + t, H, hd).transpose(1, 0, 2)
            vh = V.reshape(c0 + t, H, hd).transpose(1, 0, 2)
            scores = (qh @ kh.transpose(0, 2, 1)) / np.sqrt(hd)
            scores = np.where(allowed[None, :, :], scores, neg)
            scores -= scores.max(axis=-1, keepdims=True)
            e = np.exp(scores)
            pattn = e / e.sum(axis=-1, keepdims=True)
            attn = (pattn @ vh).transpose(1, 0, 2).reshape(t, cfg.dim)
            x = x + attn @ w[p + "wo"] + w[p + "bo"]
            m = _np_rmsnorm(x, w[p + "mlp_norm"])
            x = x + _np_silu(m @ w[p + "w1"] + w[p + "b1"]) @ w[p + "w2"] + w[p + "b2"]
        self.cache.cursor = c0 + t
        text_tail = np.flatnonzero(piece.kinds == sq.K_TEXT)
        if text_tail.size and text_tail[-1] == t - 1:
            self.last_text_id = int(piece.text_ids[t - 1])
        else:
            self.last_text_id = -1
        out = _np_rmsnorm(x, w["final_norm"])
        self.last_hidden = out[-1]
        return out

    def lm_logits_np(self, hidden_rows: np.ndarray) -> np.ndarray:
        return hidden_rows @ self.w["lm_w"] + self.w["lm_b"]

    def flow_np(self, hidden_rows: np.ndarray) -> np.ndarray:
        return hidden_rows @ self.w["flow_w"] + self.w["flow_b"]


def full_hidden(params: Params, seq: sq.InterleavedSequence) -> np.ndarray:
    """One-shot inference forward over a whole sequence (no tape)."""
    session = DecodeSession(params)
    return session.append(sq.flatten(seq))


def text_piece(ids: Sequence[int]) -> sq.TokenStream:
    n = len(ids)
    z = np.zeros(0, dtype=np.int64)
    return sq.TokenStream(
        n=n, kinds=np.zeros(n, dtype=np.uint8), text_ids=np.asarray(ids, dtype=np.int32),
        positions=np.arange(n, dtype=np.int32), bounds=[(0, n)],
        patch_vals=np.zeros((0, 1), np.float32), patch_rows=z,
        state_vals=np.zeros((0, 1), np.float32), state_rows=z,
        action_vals=np.zeros((0, 1), np.float32), action_taus=np.zeros(0, np.float32), action_rows=z,
        ar_mask=np.zeros(n, bool), flow_mask=np.zeros(n, bool),
    )


def action_piece(chunk: np.ndarray, tau: float) -> sq.TokenStream:
    chunk = np.asarray(chunk, dtype=np.float32)
    h = chunk.shape[0]
    z = np.zeros(0, dtype=np.int64)
    return sq.TokenStream(
        n=h, kinds=np.full(h, sq.K_ACTION, dtype=np.uint8), text_ids=np.full(h, -1, dtype=np.int32),
        positions=np.arange(h, dtype=np.int32), bounds=[(0, h)],
        patch_vals=np.zeros((0, 1), np.float32), patch_rows=z,
        state_vals=np.zeros((0, 1), np.float32), state_rows=z,
        action_vals=chunk, action_taus=np.full(h, tau, dtype=np.float32), action_rows=np.arange(h, dtype=np.int64),
        ar_mask=np.zeros(h, bool), flow_mask=np.zeros(h, bool),
    )


def flatten_prompt(seq: sq.InterleavedSequence) -> sq.TokenStream:
    """Flatten for generation: the trailing EOS of a final text segment is
    omitted so the model can continue the open sentence frame."""
    stream = sq.flatten(seq)
    if seq.segments[-1].kind == sq.TEXT:
        return _drop_last_token(stream)
    return stream


def _drop_last_token(stream: sq.TokenStream) -> sq.TokenStream:
    n = stream.n - 1
    return sq.TokenStream(
        n=n, kinds=stream.kinds[:n], text_ids=stream.text_ids[:n], positions=stream.positions[:n],
        bounds=[(0, n)], patch_vals=stream.patch_vals, patch_rows=stream.patch_rows,
        state_vals=stream.state_vals, state_rows=stream.state_rows,
        action_vals=stream.action_vals, action_taus=stream.action_taus, action_rows=stream.action_rows,
        ar_mask=stream.ar_mask[:n], flow_mask=stream.flow_mask[:n],
    )


def sample_text(prefix: Optional[sq.InterleavedSequence], params: Params, *,
                mode: str = "greedy", temperature: float = 1.0,
                stop: Sequence[int] = (int(Delimiter.EOS),), max_new: int = 24,
                rng: Optional[np.random.Generator] = None,
                session: Optional[DecodeSession] = None) -> list[int]:
    """Autoregressive text sampling until a stop delimiter or max_new tokens.

    Greedy mode is deterministic (argmax, lowest id on ties). The stop token
    is appended to the session so a longer mixed-modality generation can
    continue in-distribution, but is not part of the returned ids.
    """
    if mode not in ("greedy", "temperature"):
        raise BackboneError(f"unknown sampling mode {mode!r}")
    if mode == "temperature" and rng is None:
        raise BackboneError("temperature sampling needs an rng")
    if session is None:
        if prefix is None:
            raise BackboneError("sample_text needs a prefix or an open session")
        session = DecodeSession(params)
    if prefix is not None:
        session.append(flatten_prompt(prefix))
    if session.last_hidden is None:
        raise BackboneError("sample_text needs a non-empty prefix in the session")
    stop_ids = {int(s) for s in stop}
    out: list[int] = []
    last_hidden = session.last_hidden
    for _ in range(max_new):
        logits = session.lm_logits_np(last_hidden[None, :])[0]
        if mode == "greedy":
            nxt = int(np.argmax(logits))
        else:
            z = logits / max(temperature, 1e-6)
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            nxt = int(rng.choice(len(p), p=p))
        last_hidden = session.append(text_piece([nxt]))[-1]
        if nxt in stop_ids:
            break
        out.append(nxt)
    return out


class ActionContext:
    """Velocity-field context for euler_integrate over a cached prefix.

    The prefix must end right after [EOR]; the [BOA] framing token is appended
    here once, and each velocity query truncates back to it before re-running
    the action suffix at the query's tau.
    """

    def __init__(self, session: DecodeSession, prefix: Optional[sq.InterleavedSequence] = None):
        self.session = session
        if prefix is not None:
            session.append(sq.flatten(prefix))
        if session.last_text_id != int(Delimiter.EOR):
            raise BackboneError("action context must start right after [EOR]")
        session.append(text_piece([int(Delimiter.BOA)]))
        self.base = session.cursor
        self.horizon = session.cfg.horizon
        self.action_dim = session.cfg.action_dim

    def velocity(self, chunk: np.ndarray, tau: float) -> np.ndarray:
        self.session.truncate(self.base)
        hidden = self.session.append(action_piece(chunk, tau))
        return self.session.flow_np(hidden)

    def finalize(self, chunk: np.ndarray) -> None:
        """Commit the clean chunk (tau = 1) and close the segment with [EOA]."""
        self.session.truncate(self.base)
        self.session.append(action_piece(chunk, 1.0))
        self.session.append(text_piece([int(Delimiter.EOA)]))


# ---------------------------------------------------------------------------
# Checkpoint codec (EOCK)
# ---------------------------------------------------------------------------

EOCK_MAGIC = b"EOCK"
EOCK_VERSION = 1


@dataclass
class OptimizerBlob:
    step: int
    epoch: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    ema_ar: float
    ema_fm: float


def save_checkpoint(path, params: Params, rng_seed: int, optimizer: Optional[OptimizerBlob] = None) -> None:
    cfg = params.cfg
    cfg_text = cfg.to_text().encode()
    with open(path, "wb") as f:
        f.write(EOCK_MAGIC)
        f.write(struct.pack("<I", EOCK_VERSION))
        f.write(struct.pack("<I", len(cfg_text)))
        f.write(cfg_text)
        f.write(struct.pack("<Q", cfg.hash()))
        for name in params.names():
            f.write(params[name].data.astype("<f4").tobytes())
        f.write(struct.pack("<Q", rng_seed & 0xFFFFFFFFFFFFFFFF))
        if optimizer is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<QQdd", optimizer.step, optimizer.epoch, optimizer.ema_ar, optimizer.ema_fm))
            for name in params.names():
                f.write(optimizer.m[name].astype("<f4").tobytes())
            for name in params.names():
                f.write(optimizer.v[name].astype("<f4").tobytes())


def load_checkpoint(path) -> tuple[Params, int, Optional[OptimizerBlob]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EOCK_MAGIC:
        raise sq.FormatError(f"bad checkpoint magic {data[:4]!r}")
    (version,) = struct.unpack("<I", data[4:8])
    if version != EOCK_VERSION:
        raise sq.FormatError(f"unsupported checkpoint version {version}")
    (clen,) = struct.unpack("<I", data[8:12])
    pos = 12
    cfg = ModelConfig.from_text(data[pos:pos + clen].decode())
    pos += clen
    (stored_hash,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if stored_hash != cfg.hash():
        raise sq.FormatError("checkpoint config hash mismatch")
    tensors = {}
    for name, shape in _param_shapes(cfg):
        nbytes = int(np.prod(shape)) * 4
        if pos + nbytes > len(data):
            raise sq.FormatError(f"truncated checkpoint at byte {pos}")
        arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
        tensors[name] = nm.Tensor(arr, requires_grad=True, dtype=np.float32)
        pos += nbytes
    params = Params(cfg, tensors)
    (rng_seed,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    (has_opt,) = struct.unpack("<B", data[pos:pos + 1])
    pos += 1
    opt = None
    if has_opt:
        step, epoch, ema_ar, ema_fm = struct.unpack("<QQdd", data[pos:pos + 32])
        pos += 32
        m, v = {}, {}
        for store in (m, v):
            for name, shape in _param_shapes(cfg):
                nbytes = int(np.prod(shape)) * 4
                store[name] = np.frombuffer(data, dtype="<f4", count=int(np.prod(shape)), offset=pos).reshape(shape).copy()
                pos += nbytes
        opt = OptimizerBlob(step, epoch, m, v, ema_ar, ema_fm)
    if pos != len(data):
        raise sq.FormatError("trailing bytes in checkpoint")
    return params, rng_seed, opt
