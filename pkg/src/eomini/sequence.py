"""Interleaved multimodal token streams.

A sequence is an ordered list of typed segments (image / text / state /
action). When flattened to tokens, every segment is framed by its begin/end
delimiters; consecutive text segments share one sentence frame unless a
segment asks for a frame break, so a question and its answer live inside a
single [BOS] ... [EOS] span with different loss roles.

This module owns the three sequence formats, loss masks, the causal
attention mask (block-diagonal over packed batches), the rectifying sampler
that splits an interleaved sequence into N+1 training subsequences, first-fit
-decreasing packing, and the versioned .eods container codec.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence as Seq

import numpy as np

from . import actionflow
from .vocab import VOCAB, Delimiter


class SequenceError(Exception):
    """Base class for sequence-layer failures."""


class ConstructionError(SequenceError):
    pass


class RangeError(SequenceError):
    pass


class SizeError(SequenceError):
    pass


class FormatError(SequenceError):
    """Malformed .eods bytes (bad magic/version, truncation, bad counts)."""


IMAGE, TEXT, STATE, ACTION = "image", "text", "state", "action"
_KIND_CODES = {IMAGE: 0, TEXT: 1, STATE: 2, ACTION: 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

LOSS_NONE, LOSS_AR, LOSS_FLOW = "none", "ar_target", "flow_target"
_LOSS_CODES = {LOSS_NONE: 0, LOSS_AR: 1, LOSS_FLOW: 2}
_LOSS_NAMES = {v: k for k, v in _LOSS_CODES.items()}

FORMAT_TAGS = ("understanding", "control", "interleaved_temporal", "interleaved_spatial", "interleaved_chat")

_DELIMS = {
    IMAGE: (Delimiter.BOI, Delimiter.EOI),
    TEXT: (Delimiter.BOS, Delimiter.EOS),
    STATE: (Delimiter.BOR, Delimiter.EOR),
    ACTION: (Delimiter.BOA, Delimiter.EOA),
}

PATCH_SIZE = 4


def image_to_patches(image: np.ndarray, patch: int = PATCH_SIZE) -> np.ndarray:
    """Flatten an HxWx3 uint8 image into row-major patch vectors in [-1, 1]."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] % patch or img.shape[1] % patch:
        raise ConstructionError(f"image shape {img.shape} not divisible into {patch}x{patch} patches")
    h, w, c = img.shape
    gh, gw = h // patch, w // patch
    x = img.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch * patch * c)
    return (x.astype(np.float32) / 127.5) - 1.0


@dataclass
class Segment:
    """One typed span of the stream.

    payload: text -> int token ids [n]; image -> patch vectors [p, patch_dim];
    state -> [1, state_dim]; action -> clean chunk [h, d_a]. Noisy action
    segments additionally carry the interpolated payload, the noise draw and
    the flow time tau.
    """

    kind: str
    payload: np.ndarray
    loss_role: str = LOSS_NONE
    noisy: bool = False
    tau: Optional[float] = None
    noisy_payload: Optional[np.ndarray] = None
    noise: Optional[np.ndarray] = None
    frame_break: bool = False

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ConstructionError(f"unknown segment kind {self.kind!r}")
        if self.kind == TEXT:
            self.payload = np.asarray(self.payload, dtype=np.int32)
            if self.payload.ndim != 1:
                raise ConstructionError("text payload must be a flat id list")
        else:
            self.payload = np.asarray(self.payload, dtype=np.float32)
            if self.payload.ndim != 2:
                raise ConstructionError(f"{self.kind} payload must be 2-d")
        if self.payload.shape[0] == 0:
            raise ConstructionError(f"empty {self.kind} segment payload")
        if self.loss_role not in _LOSS_CODES:
            raise ConstructionError(f"unknown loss role {self.loss_role!r}")
        if self.loss_role == LOSS_FLOW and (self.kind != ACTION or not self.noisy):
            raise ConstructionError("flow_target requires a noisy action segment")
        if self.loss_role == LOSS_AR and self.kind != TEXT:
            raise ConstructionError("ar_target requires a text segment")
        if self.kind in (IMAGE, STATE) and self.loss_role != LOSS_NONE:
            raise ConstructionError(f"{self.kind} segments never carry a loss")
        if self.noisy:
            if self.kind != ACTION:
                raise ConstructionError("only action segments can be noisy")
            if self.tau is None or not (0.0 <= self.tau < 1.0):
                raise ConstructionError(f"noisy action segment needs tau in [0,1), got {self.tau}")
            if self.noisy_payload is None or self.noisy_payload.shape != self.payload.shape:
                raise ConstructionError("noisy action segment needs a matching noisy payload")

    def token_count(self) -> int:
        return int(self.payload.shape[0])

    def text(self) -> str:
        if self.kind != TEXT:
            raise ConstructionError("text() on a non-text segment")
        return VOCAB.decode(self.payload)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Segment):
            return NotImplemented
        def arr_eq(a, b):
            return (a is None) == (b is None) and (a is None or np.array_equal(a, b))
        return (
            self.kind == other.kind
            and self.loss_role == other.loss_role
            and self.noisy == other.noisy
            and self.frame_break == other.frame_break
            and (self.tau == other.tau)
            and np.array_equal(self.payload, other.payload)
            and arr_eq(self.noisy_payload, other.noisy_payload)
            and arr_eq(self.noise, other.noise)
        )


@dataclass
class InterleavedSequence:
    segments: list[Segment]
    sample_id: int = 0
    format_tag: str = "understanding"

    def __post_init__(self):
        if self.format_tag not in FORMAT_TAGS:
            raise ConstructionError(f"unknown format tag {self.format_tag!r}")
        if not self.segments:
            raise ConstructionError("sequence needs at least one segment")

    def token_count(self) -> int:
        return len(layout(self))

    def action_segments(self) -> list[int]:
        return [i for i, s in enumerate(self.segments) if s.kind == ACTION]

    def validate(self, max_len: Optional[int] = None, strict_noisy: bool = True) -> None:
        noisy = [i for i, s in enumerate(self.segments) if s.noisy]
        if strict_noisy:
            if len(noisy) > 1:
                raise ConstructionError("more than one noisy action segment")
            if noisy and noisy[0] != len(self.segments) - 1:
                raise ConstructionError("noisy action segment must be the final segment")
        if max_len is not None and self.token_count() > max_len:
            raise SizeError(f"sequence {self.sample_id} ({self.token_count()} tokens) exceeds {max_len}")

    def __eq__(self, other) -> bool:
        if not isinstance(other, InterleavedSequence):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.format_tag == other.format_tag
            and len(self.segments) == len(other.segments)
            and all(a == b for a, b in zip(self.segments, other.segments))
        )


# ---------------------------------------------------------------------------
# Token layout
# ---------------------------------------------------------------------------

K_TEXT, K_PATCH, K_STATE, K_ACTION = 0, 1, 2, 3


@dataclass
class TokenInfo:
    kind: int              # K_TEXT / K_PATCH / K_STATE / K_ACTION
    seg_idx: int
    text_id: int = -1      # delimiter or word id when kind == K_TEXT
    row: int = -1          # payload row within the segment for non-text kinds
    is_delim: bool = False
    ar_target: bool = False
    flow_target: bool = False


def layout(seq: InterleavedSequence) -> list[TokenInfo]:
    """Token-level expansion with delimiter framing and loss flags."""
    toks: list[TokenInfo] = []
    segs = seq.segments
    for i, seg in enumerate(segs):
        if seg.kind == TEXT:
            opens = i == 0 or segs[i - 1].kind != TEXT or seg.frame_break
            if opens:
                toks.append(TokenInfo(K_TEXT, i, int(Delimiter.BOS), is_delim=True))
            ar = seg.loss_role == LOSS_AR
            for tid in seg.payload:
                toks.append(TokenInfo(K_TEXT, i, int(tid), ar_target=ar))
            closes = i == len(segs) - 1 or segs[i + 1].kind != TEXT or segs[i + 1].frame_break
            if closes:
                # The closing EOS of a frame that ends on an answer is part of
                # what the model must emit, so it shares the AR loss.
                toks.append(TokenInfo(K_TEXT, i, int(Delimiter.EOS), is_delim=True, ar_target=ar))
        else:
            bo, eo = _DELIMS[seg.kind]
            toks.append(TokenInfo(K_TEXT, i, int(bo), is_delim=True))
            kind = {IMAGE: K_PATCH, STATE: K_STATE, ACTION: K_ACTION}[seg.kind]
            flow = seg.loss_role == LOSS_FLOW
            for r in range(seg.payload.shape[0]):
                toks.append(TokenInfo(kind, i, row=r, flow_target=flow))
            toks.append(TokenInfo(K_TEXT, i, int(eo), is_delim=True))
    return toks


@dataclass
class TokenStream:
    """Flattened model input for one sequence or one packed batch."""

    n: int
    kinds: np.ndarray            # uint8 per token
    text_ids: np.ndarray         # int32, -1 where not text
    positions: np.ndarray        # int32, restart at member boundaries
    bounds: list[tuple[int, int]]
    patch_vals: np.ndarray       # [n_patch, patch_dim]
    patch_rows: np.ndarray
    state_vals: np.ndarray       # [n_state, state_dim]
    state_rows: np.ndarray
    action_vals: np.ndarray      # [n_action, d_a] model-input rows
    action_taus: np.ndarray      # float32 per action token
    action_rows: np.ndarray
    ar_mask: np.ndarray          # bool per token: AR target positions
    flow_mask: np.ndarray        # bool per token: noisy flow rows


def flatten(seqs: InterleavedSequence | Seq[InterleavedSequence]) -> TokenStream:
    members = [seqs] if isinstance(seqs, InterleavedSequence) else list(seqs)
    kinds, text_ids, positions = [], [], []
    patch_vals, patch_rows = [], []
    state_vals, state_rows = [], []
    action_vals, action_taus, action_rows = [], [], []
    ar_mask, flow_mask = [], []
    bounds = []
    off = 0
    for seq in members:
        toks = layout(seq)
        for p, t in enumerate(toks):
            kinds.append(t.kind)
            positions.append(p)
            text_ids.append(t.text_id)
            ar_mask.append(t.ar_target)
            flow_mask.append(t.flow_target and t.kind == K_ACTION)
            seg = seq.segments[t.seg_idx]
            idx = off + p
            if t.kind == K_PATCH:
                patch_vals.append(seg.payload[t.row])
                patch_rows.append(idx)
            elif t.kind == K_STATE:
                state_vals.append(seg.payload[t.row])
                state_rows.append(idx)
            elif t.kind == K_ACTION:
                vals = seg.noisy_payload if seg.noisy else seg.payload
                action_vals.append(vals[t.row])
                action_taus.append(seg.tau if seg.noisy else 1.0)
                action_rows.append(idx)
        bounds.append((off, off + len(toks)))
        off += len(toks)

    def stack(rows, width):
        return np.asarray(rows, dtype=np.float32) if rows else np.zeros((0, width), dtype=np.float32)

    return TokenStream(
        n=off,
        kinds=np.asarray(kinds, dtype=np.uint8),
        text_ids=np.asarray(text_ids, dtype=np.int32),
        positions=np.asarray(positions, dtype=np.int32),
        bounds=bounds,
        patch_vals=stack(patch_vals, 1),
        patch_rows=np.asarray(patch_rows, dtype=np.int64),
        state_vals=stack(state_vals, 1),
        state_rows=np.asarray(state_rows, dtype=np.int64),
        action_vals=stack(action_vals, 1),
        action_taus=np.asarray(action_taus, dtype=np.float32),
        action_rows=np.asarray(action_rows, dtype=np.int64),
        ar_mask=np.asarray(ar_mask, dtype=bool),
        flow_mask=np.asarray(flow_mask, dtype=bool),
    )


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------


def attention_mask(seq_or_batch, block_bidirectional: str = "off") -> np.ndarray:
    """Boolean matrix: (i, j) true iff token i may attend to token j.

    Strictly causal at token granularity (j <= i) and never across packed
    member boundaries. The optional flag lets payload tokens of an image
    (or image+action) segment attend bidirectionally within their segment.
    """
    if block_bidirectional not in ("off", "image", "image+action"):
        raise ConstructionError(f"unknown block_bidirectional mode {block_bidirectional!r}")
    members = _members_of(seq_or_batch)
    lens = [s.token_count() for s in members]
    n = sum(lens)
    mask = np.zeros((n, n), dtype=bool)
    off = 0
    for seq, ln in zip(members, lens):
        mask[off:off + ln, off:off + ln] = np.tril(np.ones((ln, ln), dtype=bool))
        if block_bidirectional != "off":
            kinds = {IMAGE} if block_bidirectional == "image" else {IMAGE, ACTION}
            toks = layout(seq)
            spans: dict[int, list[int]] = {}
            for p, t in enumerate(toks):
                if not t.is_delim and seq.segments[t.seg_idx].kind in kinds:
                    spans.setdefault(t.seg_idx, []).append(p)
            for idxs in spans.values():
                a, b = off + idxs[0], off + idxs[-1] + 1
                mask[a:b, a:b] = True
        off += ln
    return mask


def loss_masks(seq: InterleavedSequence) -> tuple[np.ndarray, np.ndarray]:
    """(ar_mask, flow_mask) over the sequence's own token stream; disjoint."""
    toks = layout(seq)
    ar = np.array([t.ar_target for t in toks], dtype=bool)
    flow = np.array([t.flow_target and t.kind == K_ACTION for t in toks], dtype=bool)
    return ar, flow


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _as_patches(image) -> np.ndarray:
    if hasattr(image, "image"):
        image = image.image
    image = np.asarray(image)
    if image.ndim == 2 and image.dtype != np.uint8:
        return image.astype(np.float32)  # already patch vectors
    return image_to_patches(image)


def _as_state(state) -> np.ndarray:
    if hasattr(state, "proprio"):
        state = state.proprio
    vec = np.asarray(state, dtype=np.float32).reshape(1, -1)
    return vec


def _check_chunk(chunk: np.ndarray) -> np.ndarray:
    chunk = np.asarray(chunk, dtype=np.float32)
    if chunk.ndim != 2:
        raise ConstructionError("action chunk must be h x d_a")
    if np.abs(chunk).max(initial=0.0) > 1.0 + 1e-6:
        raise RangeError("action chunk entries must lie in [-1, 1]")
    return chunk


def build_understanding_seq(image, question: str, answer: str, sample_id: int = 0) -> InterleavedSequence:
    """[BOI] patches [EOI] [BOS] question answer [EOS]; the answer (and its
    closing EOS) are the only AR targets."""
    if not answer.strip():
        raise ConstructionError("empty answer")
    q_ids, a_ids = VOCAB.encode(question), VOCAB.encode(answer)
    if not q_ids:
        raise ConstructionError("empty question")
    segs = [
        Segment(IMAGE, _as_patches(image)),
        Segment(TEXT, q_ids),
        Segment(TEXT, a_ids, loss_role=LOSS_AR),
    ]
    return InterleavedSequence(segs, sample_id=sample_id, format_tag="understanding")


def build_control_seq(image, instruction: str, state, chunk, tau: float, noise,
                      sample_id: int = 0) -> InterleavedSequence:
    """[BOI] patches [EOI] [BOS] instruction [EOS] [BOR] state [EOR] [BOA] noisy chunk [EOA]."""
    chunk = _check_chunk(chunk)
    noise = np.asarray(noise, dtype=np.float32)
    if not (0.0 <= tau < 1.0):
        raise RangeError(f"tau must lie in [0, 1), got {tau}")
    noisy = actionflow.interpolate(chunk, noise, tau)
    segs = [
        Segment(IMAGE, _as_patches(image)),
        Segment(TEXT, VOCAB.encode(instruction)),
        Segment(STATE, _as_state(state)),
        Segment(ACTION, chunk, loss_role=LOSS_FLOW, noisy=True, tau=float(tau),
                noisy_payload=noisy, noise=noise),
    ]
    return InterleavedSequence(segs, sample_id=sample_id, format_tag="control")


def build_control_prompt(image, instruction: str, state, sample_id: int = 0) -> InterleavedSequence:
    """Inference-side control prefix: everything up to (not including) the action."""
    segs = [
        Segment(IMAGE, _as_patches(image)),
        Segment(TEXT, VOCAB.encode(instruction)),
        Segment(STATE, _as_state(state)),
    ]
    return InterleavedSequence(segs, sample_id=sample_id, format_tag="control")


@dataclass
class Round:
    """One reasoning-and-acting round of an interleaved sequence."""

    image: object
    question: str
    answer: str
    instruction: str
    state: object
    chunk: np.ndarray


def build_interleaved_seq(rounds: Seq[Round], trailing_qa: Optional[tuple[object, str, str]],
                          format_tag: str, sample_id: int = 0) -> InterleavedSequence:
    """Rounds of [image][QA][instruction][state][action], then a trailing
    image + verification QA. Action segments are clean; noise is attached at
    batch-assembly time."""
    if format_tag not in ("interleaved_temporal", "interleaved_spatial", "interleaved_chat"):
        raise ConstructionError(f"not an interleaved format: {format_tag}")
    if not rounds:
        raise ConstructionError("interleaved sequence needs at least one round")
    segs: list[Segment] = []
    for r in rounds:
        if not r.question.strip() or not r.answer.strip():
            raise ConstructionError("interleaved round needs a question and an answer")
        segs.append(Segment(IMAGE, _as_patches(r.image)))
        segs.append(Segment(TEXT, VOCAB.encode(r.question)))
        segs.append(Segment(TEXT, VOCAB.encode(r.answer), loss_role=LOSS_AR))
        segs.append(Segment(TEXT, VOCAB.encode(r.instruction), frame_break=True))
        segs.append(Segment(STATE, _as_state(r.state)))
        segs.append(Segment(ACTION, _check_chunk(r.chunk)))
    if trailing_qa is not None:
        image, q, a = trailing_qa
        segs.append(Segment(IMAGE, _as_patches(image)))
        segs.append(Segment(TEXT, VOCAB.encode(q)))
        segs.append(Segment(TEXT, VOCAB.encode(a), loss_role=LOSS_AR))
    return InterleavedSequence(segs, sample_id=sample_id, format_tag=format_tag)


# ---------------------------------------------------------------------------
# Rectifying sampler
# ---------------------------------------------------------------------------


def attach_noise(seq: InterleavedSequence, taus: Seq[float], noises: Seq[np.ndarray]) -> InterleavedSequence:
    """Attach one (tau, z) draw to every action segment (pre-rectification state)."""
    idxs = seq.action_segments()
    if len(taus) != len(idxs) or len(noises) != len(idxs):
        raise ConstructionError(f"need {len(idxs)} (tau, z) draws, got {len(taus)}")
    segs = list(seq.segments)
    for j, i in enumerate(idxs):
        seg = segs[i]
        noise = np.asarray(noises[j], dtype=np.float32)
        segs[i] = dataclasses.replace(
            seg, noisy=True, tau=float(taus[j]), noise=noise,
            noisy_payload=actionflow.interpolate(seg.payload, noise, float(taus[j])),
            loss_role=LOSS_FLOW,
        )
    return InterleavedSequence(segs, sample_id=seq.sample_id, format_tag=seq.format_tag)


def _clean_action(seg: Segment) -> Segment:
    return dataclasses.replace(seg, noisy=False, tau=None, noisy_payload=None, noise=None, loss_role=LOSS_NONE)


def _mute_text(seg: Segment) -> Segment:
    return dataclasses.replace(seg, loss_role=LOSS_NONE) if seg.loss_role == LOSS_AR else seg


def rectify_sample(seq: InterleavedSequence) -> list[InterleavedSequence]:
    """Split a sequence with N action segments into N+1 training subsequences.

    Subsequence k (k = 1..N) is the prefix ending at action segment k with all
    earlier segments clean and loss-free and segment k noisy with the flow
    loss. The final output is the full sequence with every action segment
    clean and only the AR text losses active. N = 0 returns [seq].
    """
    idxs = seq.action_segments()
    if not idxs:
        return [seq]
    for i in idxs:
        seg = seq.segments[i]
        if seg.noisy_payload is None or seg.tau is None:
            raise ConstructionError("rectify_sample needs noisy payloads attached to every action segment")
    outs: list[InterleavedSequence] = []
    for k, idx in enumerate(idxs):
        segs: list[Segment] = []
        for j in range(idx + 1):
            seg = seq.segments[j]
            if seg.kind == ACTION and j != idx:
                segs.append(_clean_action(seg))
            elif seg.kind == TEXT:
                segs.append(_mute_text(seg))
            elif j == idx:
                segs.append(dataclasses.replace(seg, loss_role=LOSS_FLOW, noisy=True))
            else:
                segs.append(seg)
        outs.append(InterleavedSequence(segs, sample_id=seq.sample_id, format_tag=seq.format_tag))
    full = [
        _clean_action(s) if s.kind == ACTION else s
        for s in seq.segments
    ]
    outs.append(InterleavedSequence(full, sample_id=seq.sample_id, format_tag=seq.format_tag))
    for o in outs:
        o.validate(strict_noisy=True)
    return outs


# ---------------------------------------------------------------------------
# Packing
# ---------------------------------------------------------------------------


@dataclass
class PackedBatch:
    members: list[InterleavedSequence]
    boundaries: list[int]
    total_len: int

    def token_count(self) -> int:
        return self.total_len


def _members_of(seq_or_batch) -> list[InterleavedSequence]:
    if isinstance(seq_or_batch, PackedBatch):
        return seq_or_batch.members
    return [seq_or_batch]


def pack(seqs: Seq[InterleavedSequence], target_len: int) -> list[PackedBatch]:
    """First-fit-decreasing bin packing; no member is split across batches."""
    lens = []
    for s in seqs:
        ln = s.token_count()
        if ln > target_len:
            raise SizeError(f"sequence {s.sample_id} ({ln} tokens) exceeds pack length {target_len}")
        lens.append(ln)
    order = sorted(range(len(seqs)), key=lambda i: (-lens[i], i))
    bins: list[list[int]] = []
    room: list[int] = []
    for i in order:
        for b in range(len(bins)):
            if lens[i] <= room[b]:
                bins[b].append(i)
                room[b] -= lens[i]
                break
        else:
            bins.append([i])
            room.append(target_len - lens[i])
    batches = []
    for members_idx in bins:
        members = [seqs[i] for i in members_idx]
        bounds, off = [], 0
        for i in members_idx:
            bounds.append(off)
            off += lens[i]
        batches.append(PackedBatch(members, bounds, off))
    return batches


# ---------------------------------------------------------------------------
# .eods codec
# ---------------------------------------------------------------------------

EODS_MAGIC = b"EODS"
EODS_VERSION = 1
_FORMAT_CODES = {t: i for i, t in enumerate(FORMAT_TAGS)}


def _pack_segment(seg: Segment) -> bytes:
    if seg.noisy or seg.noisy_payload is not None or seg.noise is not None:
        raise ConstructionError("noisy payloads are batch-assembly state; datasets store clean sequences")
    flags = _LOSS_CODES[seg.loss_role] | (0x08 if seg.frame_break else 0)
    if seg.kind == TEXT:
        body = seg.payload.astype("<u2").tobytes()
    else:
        r, c = seg.payload.shape
        body = struct.pack("<HH", r, c) + seg.payload.astype("<f4").tobytes()
    return struct.pack("<BBI", _KIND_CODES[seg.kind], flags, len(body)) + body


def serialize(seq: InterleavedSequence) -> bytes:
    """One length-prefixed record: sample id, format, segment list."""
    buf = io.BytesIO()
    buf.write(struct.pack("<QBH", seq.sample_id, _FORMAT_CODES[seq.format_tag], len(seq.segments)))
    for seg in seq.segments:
        buf.write(_pack_segment(seg))
    body = buf.getvalue()
    return struct.pack("<I", len(body)) + body


class _Reader:
    def __init__(self, data: bytes, base_offset: int = 0):
        self.data = data
        self.pos = 0
        self.base = base_offset

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated record at byte {self.base + self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _unpack_record(body: bytes, base_offset: int = 0) -> InterleavedSequence:
    r = _Reader(body, base_offset)
    sample_id, fmt_code, n_segs = r.unpack("<QBH")
    if fmt_code >= len(FORMAT_TAGS):
        raise FormatError(f"unknown format code {fmt_code}")
    segs = []
    for _ in range(n_segs):
        kind_code, flags, plen = r.unpack("<BBI")
        if kind_code not in _KIND_NAMES:
            raise FormatError(f"unknown segment kind {kind_code}")
        if flags & 0x04:
            raise FormatError("noisy segment in a dataset record")
        payload = r.take(plen)
        kind = _KIND_NAMES[kind_code]
        if kind == TEXT:
            if plen % 2:
                raise FormatError("odd text payload length")
            data = np.frombuffer(payload, dtype="<u2").astype(np.int32)
        else:
            if plen < 4:
                raise FormatError("array payload too short")
            rows, cols = struct.unpack("<HH", payload[:4])
            if 4 + rows * cols * 4 != plen:
                raise FormatError("array payload length mismatch")
            data = np.frombuffer(payload, dtype="<f4", offset=4).reshape(rows, cols).copy()
        try:
            segs.append(Segment(kind, data, loss_role=_LOSS_NAMES.get(flags & 0x03, None) or LOSS_NONE,
                                frame_break=bool(flags & 0x08)))
        except ConstructionError as e:
            raise FormatError(str(e)) from e
    if r.pos != len(body):
        raise FormatError("trailing bytes in record")
    try:
        return InterleavedSequence(segs, sample_id=sample_id, format_tag=FORMAT_TAGS[fmt_code])
    except ConstructionError as e:
        raise FormatError(str(e)) from e


def deserialize(record: bytes) -> InterleavedSequence:
    if len(record) < 4:
        raise FormatError("record shorter than its length prefix")
    (blen,) = struct.unpack("<I", record[:4])
    if blen != len(record) - 4:
        raise FormatError(f"record length prefix {blen} does not match body {len(record) - 4}")
    return _unpack_record(record[4:], base_offset=4)


def write_eods(path, seqs: Iterable[InterleavedSequence]) -> int:
    seqs = list(seqs)
    with open(path, "wb") as f:
        f.write(EODS_MAGIC)
        f.write(struct.pack("<IQ", EODS_VERSION, len(seqs)))
        for s in seqs:
            f.write(serialize(s))
    return len(seqs)


def read_eods(path) -> list[InterleavedSequence]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != EODS_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} (want {EODS_MAGIC!r})")
    if len(data) < 16:
        raise FormatError("file shorter than its header")
    version, count = struct.unpack("<IQ", data[4:16])
    if version != EODS_VERSION:
        raise FormatError(f"unsupported version {version}")
    out = []
    pos = 16
    for _ in range(count):
        if pos + 4 > len(data):
            raise FormatError(f"truncated file at byte {pos}")
        (blen,) = struct.unpack("<I", data[pos:pos + 4])
        if pos + 4 + blen > len(data):
            raise FormatError(f"truncated record at byte {pos}")
        out.append(_unpack_record(data[pos + 4:pos + 4 + blen], base_offset=pos + 4))
        pos += 4 + blen
    if pos != len(data):
        raise FormatError("trailing bytes after last record")
    return out
