"""Deterministic generators and loaders for the evaluation tasks.

Passkey retrieval embeds a 5-digit code at a controlled depth inside filler
and ends with a retrieval query; the copy task asks for a prefix pattern to
be reproduced after a delimiter; text corpora are byte-level, either loaded
from disk or produced by a seeded word-babble generator with slowly
switching topics (so there is long-range structure to exploit). Every
generator is a pure function of its seed and parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import ToyModel, decode_greedy

# Symbolic passkey vocabulary: 10 digits, 3 markers, filler word ids.
DIGITS = 10
KEY_MARK = 10
KEY_END = 11
QUERY_MARK = 12
FILLER_BASE = 13
N_FILLER = 19
PASSKEY_VOCAB = FILLER_BASE + N_FILLER

_PREAMBLE = np.arange(FILLER_BASE, FILLER_BASE + 4)
_OVERHEAD = len(_PREAMBLE) + 7 + 1  # preamble + marked key block + query mark

_BYTE_PREAMBLE = b"Read the notes below and remember the pass key. "
_BYTE_KEY_PRE = b" The pass key is "
_BYTE_KEY_POST = b". Remember it. "
_BYTE_QUERY = b" What is the pass key? The pass key is "

_TOPIC_WORDS = (
    ("river", "stone", "valley", "bridge", "water", "bank", "current", "ford",
     "mill", "reed", "shore", "deep", "cold", "slow", "wide", "grey"),
    ("engine", "signal", "wire", "circuit", "switch", "relay", "spark", "coil",
     "meter", "panel", "fuse", "load", "fast", "hot", "steady", "dull"),
    ("market", "grain", "trade", "wagon", "ledger", "coin", "scale", "cart",
     "stall", "price", "salt", "cloth", "busy", "full", "late", "fair"),
)


@dataclass
class PasskeySample:
    """One retrieval prompt; answer_span indexes the embedded code digits."""

    tokens: np.ndarray
    answer_span: tuple[int, int]
    depth: float
    length: int
    passkey: str


def gen_passkey(
    seed: int,
    length: int,
    depth: float,
    filler_source: str | None = None,
) -> PasskeySample:
    """Deterministic passkey prompt of `length` tokens.

    The code sits at roughly depth * length, padded by filler on both sides,
    and the prompt ends with the retrieval query so the next tokens a model
    emits are its answer. With filler_source=None the sample uses the small
    symbolic vocabulary and seeded filler ids; pointing filler_source at a
    text file produces a byte-level sample padded with that file's bytes.
    """
    if not 0.0 <= depth <= 1.0:
        raise ValueError("depth must lie in [0, 1]")
    rng = np.random.Generator(np.random.PCG64(seed))
    digits = rng.integers(0, 10, 5)
    passkey = "".join(str(int(d)) for d in digits)
    if filler_source is None:
        return _symbolic_passkey(rng, length, depth, digits, passkey)
    return _byte_passkey(rng, length, depth, digits, passkey, filler_source)


def _symbolic_passkey(rng, length, depth, digits, passkey) -> PasskeySample:
    budget = length - _OVERHEAD
    if budget < 4:
        raise ValueError(f"length {length} too small; need at least {_OVERHEAD + 4}")
    n1 = round(depth * budget)
    filler = FILLER_BASE + _babble_ids(rng, budget, N_FILLER)
    key_block = np.concatenate([[KEY_MARK], digits, [KEY_END]])
    tokens = np.concatenate(
        [_PREAMBLE, filler[:n1], key_block, filler[n1:], [QUERY_MARK]]
    ).astype(np.int64)
    start = len(_PREAMBLE) + n1 + 1
    return PasskeySample(tokens, (start, start + 5), depth, length, passkey)


def _byte_passkey(rng, length, depth, digits, passkey, filler_source) -> PasskeySample:
    key_block = _BYTE_KEY_PRE + passkey.encode() + _BYTE_KEY_POST
    overhead = len(_BYTE_PREAMBLE) + len(key_block) + len(_BYTE_QUERY)
    budget = length - overhead
    if budget < 4:
        raise ValueError(f"length {length} too small; need at least {overhead + 4}")
    source = load_text_corpus(filler_source)
    if source.size == 0:
        raise ValueError(f"filler source {filler_source} is empty")
    offset = int(rng.integers(0, source.size))
    filler = np.resize(np.roll(source, -offset), budget)
    n1 = round(depth * budget)
    tokens = np.concatenate([
        np.frombuffer(_BYTE_PREAMBLE, dtype=np.uint8),
        filler[:n1],
        np.frombuffer(key_block, dtype=np.uint8),
        filler[n1:],
        np.frombuffer(_BYTE_QUERY, dtype=np.uint8),
    ]).astype(np.int64)
    start = len(_BYTE_PREAMBLE) + n1 + len(_BYTE_KEY_PRE)
    return PasskeySample(tokens, (start, start + 5), depth, length, passkey)


def _babble_ids(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """Markov-flavoured id stream: sticky transitions over a seeded ranking."""
    if n <= 0:
        return np.zeros(0, dtype=np.int64)
    pref = rng.permutation(k)
    out = np.empty(n, dtype=np.int64)
    cur = int(rng.integers(0, k))
    for i in range(n):
        out[i] = cur
        if rng.random() < 0.4:
            cur = int(pref[(np.where(pref == cur)[0][0] + 1) % k])
        else:
            cur = int(rng.integers(0, k))
    return out


def gen_copy(seed: int, length: int, pattern_len: int, vocab: int = 16):
    """Copy task: a prefix pattern must be reproduced after a delimiter.

    Layout: pattern, filler gap, delimiter (id vocab-1), pattern again.
    Returns (tokens, mask) where the mask marks the trailing copy region.
    """
    if pattern_len >= length / 2:
        raise ValueError("pattern_len must be smaller than length / 2")
    gap = length - 2 * pattern_len - 1
    rng = np.random.Generator(np.random.PCG64(seed))
    pattern = rng.integers(0, vocab - 1, pattern_len)
    filler = rng.integers(0, vocab - 1, gap)
    tokens = np.concatenate([pattern, filler, [vocab - 1], pattern]).astype(np.int64)
    mask = np.zeros(length, dtype=bool)
    mask[-pattern_len:] = True
    return tokens, mask


def synthetic_corpus(n_tokens: int, seed: int, mean_topic_run: int = 160) -> np.ndarray:
    """Seeded byte-level word babble with slowly switching topics.

    Sentences of 4-10 words are drawn mostly from the active topic's word
    list; the topic persists for a geometric number of words, which creates
    long-range correlations a sequence model can pick up. Returns uint8
    tokens (raw bytes) of exactly n_tokens.
    """
    if n_tokens < 0:
        raise ValueError("n_tokens must be non-negative")
    rng = np.random.Generator(np.random.PCG64(seed))
    parts: list[str] = []
    total = 0
    topic = int(rng.integers(0, len(_TOPIC_WORDS)))
    switch_p = 1.0 / max(mean_topic_run, 1)
    while total < n_tokens:
        n_words = int(rng.integers(4, 11))
        words = []
        for _ in range(n_words):
            if rng.random() < switch_p:
                topic = int(rng.integers(0, len(_TOPIC_WORDS)))
            pool = _TOPIC_WORDS[topic]
            if rng.random() < 0.15:
                pool = _TOPIC_WORDS[int(rng.integers(0, len(_TOPIC_WORDS)))]
            words.append(pool[int(rng.integers(0, len(pool)))])
        sentence = " ".join(words).capitalize() + ". "
        parts.append(sentence)
        total += len(sentence)
    text = "".join(parts)[:n_tokens]
    return np.frombuffer(text.encode("ascii"), dtype=np.uint8).copy()


def load_text_corpus(paths, boundary_marker: int | None = None) -> np.ndarray:
    """Raw bytes of one or more files as uint8 tokens.

    With several paths, boundary_marker (a byte value) is inserted between
    consecutive documents when given.
    """
    if isinstance(paths, (str, bytes)) or hasattr(paths, "__fspath__"):
        paths = [paths]
    chunks: list[np.ndarray] = []
    for idx, path in enumerate(paths):
        if idx and boundary_marker is not None:
            chunks.append(np.array([boundary_marker], dtype=np.uint8))
        try:
            with open(path, "rb") as f:
                chunks.append(np.frombuffer(f.read(), dtype=np.uint8))
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"corpus file not found: {path}") from exc
    if not chunks:
        return np.zeros(0, dtype=np.uint8)
    return np.concatenate(chunks)


def _derive_seeds(seed: int, *scope: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *map(int, scope)])


def lm_batches(
    corpus: np.ndarray,
    length: int,
    batch_size: int,
    seed: int = 0,
) -> Callable[[int], tuple[np.ndarray, np.ndarray, None]]:
    """Batch function over random corpus windows, pure in the step index."""
    corpus = np.asarray(corpus)
    if corpus.shape[0] < length + 1:
        raise ValueError(
            f"corpus has {corpus.shape[0]} tokens, need at least {length + 1}"
        )

    def batch(step: int):
        rng = np.random.Generator(np.random.PCG64(_derive_seeds(seed, step)))
        offs = rng.integers(0, corpus.shape[0] - length, batch_size)
        seqs = np.stack([corpus[o:o + length + 1] for o in offs]).astype(np.int64)
        return seqs[:, :-1], seqs[:, 1:], None

    return batch


def copy_batches(length: int, pattern_len: int, batch_size: int, seed: int = 0,
                 vocab: int = 16):
    """Batch function of copy-task samples; loss restricted to the copy span."""

    def batch(step: int):
        child = _derive_seeds(seed, step).generate_state(batch_size)
        rows = [gen_copy(int(s), length + 1, pattern_len, vocab) for s in child]
        seqs = np.stack([r[0] for r in rows])
        masks = np.stack([r[1] for r in rows])
        return seqs[:, :-1], seqs[:, 1:], masks[:, 1:]

    return batch


def passkey_batches(
    prompt_length: int,
    batch_size: int,
    seed: int = 0,
    depth_range: tuple[float, float] = (0.05, 0.95),
    filler_source: str | None = None,
):
    """Batch function of passkey samples with the answer appended.

    Sequences are prompt_length + 5 tokens; the loss mask covers only the
    five answer digits at the end.
    """

    def batch(step: int):
        rng = np.random.Generator(np.random.PCG64(_derive_seeds(seed, step)))
        child = _derive_seeds(seed, step, 1).generate_state(batch_size)
        seqs = []
        for s in child:
            depth = float(rng.uniform(*depth_range))
            sample = gen_passkey(int(s), prompt_length, depth, filler_source)
            answer = sample.tokens[sample.answer_span[0]:sample.answer_span[1]]
            seqs.append(np.concatenate([sample.tokens, answer]))
        seqs = np.stack(seqs)
        mask = np.zeros(seqs.shape, dtype=bool)
        mask[:, -5:] = True
        return seqs[:, :-1], seqs[:, 1:], mask[:, 1:]

    return batch


def passkey_grid_eval(
    model: ToyModel,
    lengths: Sequence[int],
    depths: Sequence[float],
    n_per_cell: int = 20,
    scales=None,
    seed: int = 0,
    filler_source: str | None = None,
):
    """Exact-match retrieval accuracy over a (length, depth) grid.

    Each cell greedy-decodes 5 tokens after the query on n_per_cell fresh
    samples; a cell is "solved" only when every sample is retrieved exactly.
    Returns (accuracy, solved) arrays of shape (len(lengths), len(depths)).
    """
    lengths = list(lengths)
    depths = list(depths)
    acc = np.zeros((len(lengths), len(depths)))
    for i, length in enumerate(lengths):
        for j, depth in enumerate(depths):
            child = _derive_seeds(seed, i, j).generate_state(n_per_cell)
            samples = [gen_passkey(int(s), length, depth, filler_source)
                       for s in child]
            prompts = np.stack([s.tokens for s in samples])
            preds = decode_greedy(model, prompts, 5, scales=scales)
            expected = np.stack(
                [s.tokens[s.answer_span[0]:s.answer_span[1]] for s in samples]
            )
            acc[i, j] = float(np.mean(np.all(preds == expected, axis=1)))
    solved = acc >= 1.0
    return acc, solved
