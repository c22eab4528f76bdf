"""Shared test fixtures: random sequence generators and brute-force oracles."""

import numpy as np

from eomini import actionflow, sequence as sq
from eomini.templates import COLORS, REGION_NAMES, SUBTASK_INSTRUCTIONS, render
from eomini.vocab import VOCAB

PATCH_H = PATCH_W = 16


def random_image(rng):
    return rng.integers(0, 256, size=(PATCH_H, PATCH_W, 3), dtype=np.uint8)


def random_state(rng):
    return rng.uniform(-1, 1, size=3).astype(np.float32)


def random_chunk(rng, h=4, d=3):
    return rng.uniform(-1, 1, size=(h, d)).astype(np.float32)


def random_texts(rng):
    color = COLORS[rng.integers(len(COLORS))]
    region = REGION_NAMES[rng.integers(len(REGION_NAMES))]
    task = render("move the {color} block to the {region}", color=color, region=region)
    q = render("the task is to {task} . what should the robot do next ?", task=task)
    a = render(SUBTASK_INSTRUCTIONS["reach"], color=color)
    return task, q, a


def random_understanding(rng, sample_id=0):
    _, q, a = random_texts(rng)
    return sq.build_understanding_seq(random_image(rng), q, a, sample_id=sample_id)


def random_control(rng, sample_id=0, h=4, d=3):
    task, _, _ = random_texts(rng)
    tau = float(rng.uniform(0, 0.999))
    return sq.build_control_seq(
        random_image(rng), task, random_state(rng), random_chunk(rng, h, d), tau,
        rng.standard_normal((h, d)).astype(np.float32), sample_id=sample_id,
    )


def random_interleaved(rng, n_rounds=None, sample_id=0, h=4, d=3, fmt="interleaved_temporal"):
    if n_rounds is None:
        n_rounds = int(rng.integers(1, 5))
    task, q, a = random_texts(rng)
    rounds = [
        sq.Round(random_image(rng), q, a, "next " + a, random_state(rng), random_chunk(rng, h, d))
        for _ in range(n_rounds)
    ]
    trailing = (random_image(rng), q, "yes") if rng.uniform() < 0.8 else None
    return sq.build_interleaved_seq(rounds, trailing, fmt, sample_id=sample_id)


def random_sequence(rng, sample_id=0):
    r = rng.uniform()
    if r < 0.34:
        return random_understanding(rng, sample_id)
    if r < 0.67:
        return random_control(rng, sample_id)
    return random_interleaved(rng, sample_id=sample_id)


def with_noise(seq, rng):
    """Attach fresh (tau, z) draws to every action segment."""
    idxs = seq.action_segments()
    taus = [actionflow.sample_tau(rng) for _ in idxs]
    zs = [rng.standard_normal(seq.segments[i].payload.shape).astype(np.float32) for i in idxs]
    return sq.attach_noise(seq, taus, zs)


def mask_oracle(seq_or_batch, block_bidirectional="off"):
    """O(N^2) per-pair evaluation of the attention rule (independent of the
    fast builder): j <= i, same member, plus optional intra-segment spans."""
    members = seq_or_batch.members if isinstance(seq_or_batch, sq.PackedBatch) else [seq_or_batch]
    tokens = []  # (member, segment_key_or_None)
    for m_idx, member in enumerate(members):
        toks = sq.layout(member)
        for t in toks:
            seg = member.segments[t.seg_idx]
            span_key = None
            if not t.is_delim and (
                (block_bidirectional == "image" and seg.kind == sq.IMAGE)
                or (block_bidirectional == "image+action" and seg.kind in (sq.IMAGE, sq.ACTION))
            ):
                span_key = (m_idx, t.seg_idx)
            tokens.append((m_idx, span_key))
    n = len(tokens)
    mask = np.zeros((n, n), dtype=bool)
    for i in range(n):
        for j in range(n):
            same_member = tokens[i][0] == tokens[j][0]
            causal = j <= i
            same_span = tokens[i][1] is not None and tokens[i][1] == tokens[j][1]
            mask[i, j] = same_member and (causal or same_span)
    return mask


def rectify_oracle(seq):
    """Rebuild each rectified subsequence from scratch (naive enumeration)."""
    import dataclasses

    idxs = seq.action_segments()
    if not idxs:
        return [seq]
    outs = []
    for k, idx in enumerate(idxs):
        segs = []
        for j in range(idx + 1):
            s = seq.segments[j]
            if s.kind == sq.ACTION and j == idx:
                segs.append(dataclasses.replace(s, noisy=True, loss_role=sq.LOSS_FLOW))
            elif s.kind == sq.ACTION:
                segs.append(dataclasses.replace(s, noisy=False, tau=None, noisy_payload=None,
                                                noise=None, loss_role=sq.LOSS_NONE))
            elif s.kind == sq.TEXT and s.loss_role == sq.LOSS_AR:
                segs.append(dataclasses.replace(s, loss_role=sq.LOSS_NONE))
            else:
                segs.append(s)
        outs.append(sq.InterleavedSequence(segs, sample_id=seq.sample_id, format_tag=seq.format_tag))
    full = [
        dataclasses.replace(s, noisy=False, tau=None, noisy_payload=None, noise=None, loss_role=sq.LOSS_NONE)
        if s.kind == sq.ACTION else s
        for s in seq.segments
    ]
    outs.append(sq.InterleavedSequence(full, sample_id=seq.sample_id, format_tag=seq.format_tag))
    return outs
