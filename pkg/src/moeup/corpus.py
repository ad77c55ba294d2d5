"""Byte-level tokenization, synthetic multi-domain corpora, and batching.

Tokens are raw bytes (vocab 256) plus one pad id, so text round-trips with no
external assets. The five builtin generators produce styles that share the
byte vocabulary but have far-apart character statistics: arithmetic worksheets,
balanced-bracket programs, lowercase word salad, Caesar-shifted word salad,
and hex dumps. A batch always holds sequences from a single domain; mixed
corpora are interleavings of single-domain batches, which keeps the batch
domain label meaningful for oracle routing and statistics accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, EmptySplitError

BYTE_VOCAB = 256
PAD_ID = 256
VOCAB_SIZE = 257

SYNTHETIC_KINDS = ("arith", "brackets", "prose", "caesar", "hexcode")

_SPLIT_NAMES = ("train", "val", "test")

_WORDS = (
    "the of and to in is was for on that with as his they at be this from "
    "have or had by word but not what all were when your can said there use "
    "each which she how their if will other about out many then them these "
    "so some her would make like him into time look two more write go see "
    "river stone garden winter summer market bridge window copper silver "
    "mountain valley harbor forest meadow lantern basket hammer needle "
    "thread candle mirror saddle barrel cellar chimney curtain blanket "
    "kettle ladder anchor feather shadow morning evening thunder village "
    "orchard granite timber marble willow cedar maple walnut barley wheat "
    "honey butter pepper ginger salmon heron falcon badger rabbit spider "
    "beetle cricket swallow sparrow plough furrow meadowlark quarry slate "
    "ribbon collar button pocket jacket woolen linen cotton leather carved "
    "painted woven mended broken folded gathered scattered buried lifted "
    "carried wandered rested waited watched listened answered whispered "
    "shouted climbed crossed followed returned remained appeared vanished "
    "glimmered trembled settled drifted floated hurried lingered murmured "
    "harvest beacon orchardist miller weaver cooper mason tanner smith "
    "shepherd fiddler tailor glazier potter carter farrier tinker drover "
    "chandler clockwork spindle loom anvil forge bellows kiln mortar trowel "
    "chisel awl gimlet adze scythe sickle flail winnow bushel firkin "
    "hogshead tun cask flagon tankard trencher ewer basin pitcher crock "
    "jug tureen platter salver"
).split()

# fixed follower table: every word prefers four successors, so the word to
# word statistics are a stable property of the domain itself rather than of
# any one sampling seed, and a model has to memorize them per word
_NEXT_WORD = [
    [(7 * i + 1) % len(_WORDS), (5 * i + 3) % len(_WORDS),
     (11 * i + 4) % len(_WORDS), (3 * i + 8) % len(_WORDS)]
    for i in range(len(_WORDS))
]


@dataclass
class TokenSequence:
    """One document: token ids plus the count of real (non-pad) tokens."""

    tokens: np.ndarray
    domain_id: int
    length: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise ConfigError("TokenSequence tokens must be 1-D")
        if self.length > self.tokens.shape[0]:
            raise ConfigError("TokenSequence length exceeds capacity")
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= VOCAB_SIZE):
            raise ConfigError("token id out of range")


@dataclass
class DomainCorpus:
    domain_id: int
    name: str
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name: str) -> list:
        if name not in _SPLIT_NAMES:
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass
class Batch:
    """B x T token matrix with a mask that is true exactly at real tokens."""

    tokens: np.ndarray
    mask: np.ndarray
    domain_id: int

    @property
    def shape(self):
        return self.tokens.shape


def tokenize_bytes(text) -> TokenSequence:
    """One token per byte; accepts str (encoded UTF-8) or bytes."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    arr = np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)
    return TokenSequence(tokens=arr, domain_id=0, length=arr.shape[0])


def detokenize(seq: TokenSequence) -> bytes:
    toks = seq.tokens[: seq.length]
    if toks.size and toks.max() >= BYTE_VOCAB:
        raise ConfigError("cannot detokenize pad ids")
    return bytes(toks.astype(np.uint8).tolist())


def _gen_arith(rng: np.random.Generator, target: int) -> str:
    # two-digit sums and single-digit products: small models can actually
    # master these, so the task measures routing rather than raw capacity
    lines = []
    total = 0
    while total < target:
        a = int(rng.integers(1, 100))
        b = int(rng.integers(1, 100))
        op = rng.choice(["+", "-", "*"])
        if op == "+":
            c = a + b
        elif op == "-":
            c = a - b
        else:
            a, b = a % 10, b % 10
            c = a * b
        line = f"{a}{op}{b}={c}"
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines)


def _gen_brackets(rng: np.random.Generator, target: int) -> str:
    pairs = [("(", ")"), ("[", "]"), ("{", "}")]
    lines = []
    total = 0
    while total < target:
        want = int(rng.integers(8, 40))
        stack = []
        out = []
        while len(out) < want or stack:
            if stack and (len(out) >= want or rng.random() < 0.45 or len(stack) > 6):
                out.append(stack.pop())
            else:
                o, c = pairs[int(rng.integers(0, 3))]
                out.append(o)
                stack.append(c)
        line = "".join(out)
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines)


def _gen_prose(rng: np.random.Generator, target: int, word_limit: int | None = None) -> str:
    vocab = len(_WORDS) if word_limit is None else min(word_limit, len(_WORDS))
    sentences = []
    total = 0
    while total < target:
        n = int(rng.integers(4, 11))
        w = int(rng.integers(0, vocab))
        words = [_WORDS[w]]
        for _ in range(n - 1):
            if word_limit is None:
                if rng.random() < 0.85:
                    w = _NEXT_WORD[w][int(rng.integers(0, 4))]
                else:
                    w = int(rng.integers(0, len(_WORDS)))
            else:
                # capped vocabulary: follow the table only where it stays
                # inside the cap, so the capped stream never leaks rare words
                options = [s for s in _NEXT_WORD[w] if s < vocab]
                if options and rng.random() < 0.85:
                    w = options[int(rng.integers(0, len(options)))]
                else:
                    w = int(rng.integers(0, vocab))
            words.append(_WORDS[w])
        s = " ".join(words) + "."
        sentences.append(s)
        total += len(s) + 1
    return " ".join(sentences)


def _caesar_shift(text: str, shift: int = 3) -> str:
    # shift over the 95 printable bytes 32..126 so every character moves:
    # the cipher stream must not share byte support with plain prose, or the
    # prose expert becomes a usable stand-in and routing stops mattering
    out = []
    for ch in text:
        c = ord(ch)
        if 32 <= c <= 126:
            c = 32 + ((c - 32 + shift) % 95)
        out.append(chr(c))
    return "".join(out)


def _gen_caesar(rng: np.random.Generator, target: int, word_limit: int | None = None) -> str:
    return _caesar_shift(_gen_prose(rng, target, word_limit))


_HEX_ALPHABET = "0123456789ABCDEF"
# fixed transition table: every nibble prefers three successors, two of them
# letters. Learnable pair structure is what separates the dedicated expert
# from the merged trunk here
_HEX_NEXT = [
    [10 + (5 * p + 1) % 6, 10 + (3 * p + 2) % 6, (7 * p + 3) % 16] for p in range(16)
]


def _gen_hexcode(rng: np.random.Generator, target: int) -> str:
    lines = []
    total = 0
    while total < target:
        width = int(rng.integers(24, 40))
        p = int(rng.integers(0, 16))
        chars = [_HEX_ALPHABET[p]]
        for _ in range(width - 1):
            if rng.random() < 0.85:
                p = _HEX_NEXT[p][int(rng.integers(0, 3))]
            else:
                p = int(rng.integers(0, 16))
            chars.append(_HEX_ALPHABET[p])
        line = "".join(chars)
        lines.append(line)
        total += len(line) + 1
    return "\n".join(lines)


_GENERATORS = {
    "arith": _gen_arith,
    "brackets": _gen_brackets,
    "prose": _gen_prose,
    "caesar": _gen_caesar,
    "hexcode": _gen_hexcode,
}


def _split_sequences(seqs, fractions) -> tuple:
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ConfigError(f"split fractions must be nonnegative and sum to 1, got {fractions}")
    n = len(seqs)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_train = min(n_train, n)
    n_val = min(n_val, n - n_train)
    return seqs[:n_train], seqs[n_train : n_train + n_val], seqs[n_train + n_val :]


def gen_synthetic_domain(
    kind: str,
    size: int,
    seed: int,
    domain_id: int = 0,
    name: str | None = None,
    paragraph_bytes: int = 110,
    fractions=(0.8, 0.1, 0.1),
    word_limit: int | None = None,
) -> DomainCorpus:
    """Generate ``size`` paragraphs of one synthetic style, split into
    train/val/test by contiguous fractions. Deterministic for a fixed seed.

    ``word_limit`` caps the word-salad vocabulary to its most common prefix;
    kinds without a word vocabulary ignore it. A capped corpus works as
    generic pretraining text whose rare words are held out for specialists.
    """
    if kind not in _GENERATORS:
        raise ConfigError(f"unknown synthetic kind {kind!r}; choose from {SYNTHETIC_KINDS}")
    if size <= 0:
        raise ConfigError("size must be positive")
    if word_limit is not None and word_limit <= 0:
        raise ConfigError("word_limit must be positive")
    rng = np.random.default_rng(np.random.PCG64(seed))
    gen = _GENERATORS[kind]
    kw = {"word_limit": word_limit} if kind in ("prose", "caesar") else {}
    seqs = []
    for _ in range(size):
        target = paragraph_bytes + int(rng.integers(0, paragraph_bytes // 2 + 1))
        text = gen(rng, target, **kw)
        ts = tokenize_bytes(text)
        ts.domain_id = domain_id
        seqs.append(ts)
    train, val, test = _split_sequences(seqs, fractions)
    return DomainCorpus(
        domain_id=domain_id, name=name or kind, train=train, val=val, test=test
    )


def make_domain_suite(kinds, size: int, seed: int, **kw) -> list:
    """Builtin multi-domain suite: one corpus per kind, ids by position."""
    out = []
    for d, kind in enumerate(kinds):
        out.append(gen_synthetic_domain(kind, size, seed + 1000 * d, domain_id=d, **kw))
    return out


def ingest_text_file(
    path, domain_id: int, name: str | None = None, fractions=(0.8, 0.1, 0.1)
) -> DomainCorpus:
    """One UTF-8 file per domain; paragraphs are separated by blank lines."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    paragraphs = [blk.strip() for blk in text.split("\n\n") if blk.strip()]
    if not paragraphs:
        raise ConfigError(f"{p}: no paragraphs found")
    seqs = []
    for blk in paragraphs:
        ts = tokenize_bytes(blk)
        ts.domain_id = domain_id
        seqs.append(ts)
    train, val, test = _split_sequences(seqs, fractions)
    return DomainCorpus(
        domain_id=domain_id, name=name or p.stem, train=train, val=val, test=test
    )


def make_batches(
    corpus: DomainCorpus,
    split: str,
    batch_size: int,
    seq_len: int,
    shuffle_seed: int = 0,
) -> list:
    """Shuffle, truncate/pad each sequence to ``seq_len``, chunk into batches.

    The final batch may be smaller. Every real token that survives truncation
    appears in exactly one batch.
    """
    if batch_size <= 0 or seq_len <= 0:
        raise ConfigError("batch_size and seq_len must be positive")
    seqs = corpus.split(split)
    if not seqs:
        raise EmptySplitError(f"domain {corpus.name!r} has an empty {split!r} split")
    order = np.random.default_rng(np.random.PCG64(shuffle_seed)).permutation(len(seqs))
    batches = []
    for start in range(0, len(seqs), batch_size):
        chunk = [seqs[i] for i in order[start : start + batch_size]]
        tokens = np.full((len(chunk), seq_len), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(chunk), seq_len), dtype=bool)
        for r, ts in enumerate(chunk):
            n = min(ts.length, seq_len)
            tokens[r, :n] = ts.tokens[:n]
            mask[r, :n] = True
        batches.append(Batch(tokens=tokens, mask=mask, domain_id=corpus.domain_id))
    return batches


def interleave_batches(
    corpora, split: str, batch_size: int, seq_len: int, shuffle_seed: int = 0
) -> list:
    """Mixed-domain stream: single-domain batches from every corpus, shuffled.

    Keeps every batch single-domain so the domain label stays defined.
    """
    all_batches = []
    for c in corpora:
        all_batches.extend(
            make_batches(c, split, batch_size, seq_len, shuffle_seed + 7919 * c.domain_id)
        )
    order = np.random.default_rng(np.random.PCG64(shuffle_seed ^ 0x5EED)).permutation(
        len(all_batches)
    )
    return [all_batches[i] for i in order]


def unigram_distribution(corpus: DomainCorpus, split: str = "train") -> np.ndarray:
    """Empirical byte histogram over a split, for statistics diagnostics."""
    counts = np.zeros(BYTE_VOCAB, dtype=np.float64)
    for ts in corpus.split(split):
        toks = ts.tokens[: ts.length]
        counts += np.bincount(toks, minlength=BYTE_VOCAB)[:BYTE_VOCAB]
    total = counts.sum()
    if total == 0:
        raise EmptySplitError(f"domain {corpus.name!r} split {split!r} has no tokens")
    return counts / total
