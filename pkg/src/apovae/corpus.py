"""Tokenization, vocabularies, batching and the synthetic phrase-tree corpus."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import torch

from .errors import InvalidArgumentError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


def tokenize(line: str) -> list[str]:
    return line.lower().split()


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


class Vocab:
    """Token/id mapping with ids 0-3 reserved for pad, begin, end and unk."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, line: str) -> list[int]:
        """Wrap a line's ids in begin/end markers."""
        return [BOS] + [self.stoi.get(t, UNK) for t in tokenize(line)] + [EOS]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (PAD, BOS):
                continue
            out.append(self.itos[i] if 0 <= i < len(self.itos) else RESERVED[UNK])
        return detokenize(out)

    @property
    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]


def build_vocab(lines: Iterable[str], cap: int = 10_000) -> Vocab:
    """Frequency-ranked vocabulary truncated to ``cap`` entries including the reserved ones.

    Ties in frequency are broken lexicographically.
    """
    lines = list(lines)
    if not lines:
        raise InvalidArgumentError("cannot build a vocabulary from empty input")
    if cap < len(RESERVED):
        raise InvalidArgumentError(f"cap must be at least {len(RESERVED)}")
    counts = Counter(t for line in lines for t in tokenize(line))
    ranked = sorted((t for t in counts if t not in RESERVED), key=lambda t: (-counts[t], t))
    return Vocab(ranked[: cap - len(RESERVED)])


@dataclass
class Sentence:
    """Token ids wrapped in begin/end markers, with an optional tree depth."""

    ids: list[int]
    depth: int | None = None

    def __post_init__(self):
        if len(self.ids) < 3 or self.ids[0] != BOS or self.ids[-1] != EOS:
            raise InvalidArgumentError("a sentence needs begin, at least one token, and end")
        if self.depth is not None and self.depth < 0:
            raise InvalidArgumentError("depth must be nonnegative")

    def __len__(self) -> int:
        return len(self.ids)


DEFAULT_BASES = [
    f"{s} {v}"
    for s in ("the cat", "a dog", "the bird", "my friend")
    for v in ("sleeps", "runs", "sings", "waits")
]
DEFAULT_MODIFIERS = [
    "in the park",
    "near the river",
    "at night",
    "with a smile",
    "every morning",
    "under the bridge",
    "on the hill",
    "after dinner",
    "before sunrise",
    "without shoes",
    "beside an old tree",
    "during the storm",
    "behind the house",
    "for an hour",
    "like a child",
    "across the field",
    "inside a small box",
    "next to her brother",
    "without any fear",
    "along the quiet road",
]


@dataclass
class TreeCorpusConfig:
    """Phrase-tree generator settings. One tree is grown per base phrase."""

    branching: int = 3
    max_depth: int = 4
    bases: list[str] = field(default_factory=lambda: list(DEFAULT_BASES))
    modifiers: list[str] = field(default_factory=lambda: list(DEFAULT_MODIFIERS))
    sentences_per_node: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.max_depth < 1 or self.branching < 1 or self.sentences_per_node < 1:
            raise InvalidArgumentError("branching, max_depth and sentences_per_node must be >= 1")
        if not self.bases or not self.modifiers:
            raise InvalidArgumentError("phrase inventories must be nonempty")
        if len(self.modifiers) < self.branching + self.max_depth - 1:
            raise InvalidArgumentError("modifier inventory too small for distinct children")


def gen_tree_corpus(cfg: TreeCorpusConfig) -> list[tuple[str, int]]:
    """Grow phrase trees: a child appends one unused modifier to its parent's sentence.

    Returns ``(sentence, depth)`` pairs in depth-first order. Node sentences
    are repeated ``sentences_per_node`` times.
    """
    rng = random.Random(cfg.seed)
    out: list[tuple[str, int]] = []

    def grow(text: str, depth: int, used: frozenset[str]):
        out.extend([(text, depth)] * cfg.sentences_per_node)
        if depth == cfg.max_depth:
            return
        choices = rng.sample([m for m in cfg.modifiers if m not in used], cfg.branching)
        for m in choices:
            grow(f"{text} {m}", depth + 1, used | {m})

    for base in cfg.bases:
        grow(base, 0, frozenset())
    return out


def pad_batch(seqs: Sequence[Sequence[int]], pad_to: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack id sequences into a ``(B, T)`` long tensor padded with ``PAD``."""
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    width = max(int(lengths.max()), pad_to or 0)
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return ids, lengths


def batch_iter(
    sentences: Sequence[Sentence | Sequence[int]],
    batch_size: int,
    seed: int | None = None,
    epoch: int = 0,
    pad_to: int | None = None,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield one epoch of padded ``(ids, lengths)`` batches.

    With ``seed`` set, the order is a shuffle determined by ``(seed, epoch)``;
    otherwise the corpus order is kept.
    """
    if batch_size < 1:
        raise InvalidArgumentError("batch size must be >= 1")
    order = list(range(len(sentences)))
    if seed is not None:
        random.Random(f"{seed}:{epoch}").shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [sentences[i] for i in order[start : start + batch_size]]
        yield pad_batch([s.ids if isinstance(s, Sentence) else s for s in chunk], pad_to)


def read_lines(path: str | Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def read_corpus(path: str | Path) -> list[tuple[str, int | None]]:
    """Read plain text (one sentence per line) or a ``depth<TAB>sentence`` TSV (``.tsv``)."""
    path = Path(path)
    lines = read_lines(path)
    if path.suffix != ".tsv":
        return [(ln, None) for ln in lines]
    rows = []
    for no, ln in enumerate(lines, 1):
        depth, sep, text = ln.partition("\t")
        if not sep or not depth.strip().isdigit():
            raise InvalidArgumentError(f"{path}:{no}: expected 'depth<TAB>sentence'")
        rows.append((text.strip(), int(depth)))
    return rows


def write_corpus(rows: Sequence[tuple[str, int]], text_path: str | Path) -> Path:
    """Write sentences to ``text_path`` and the depth sidecar next to it; return the sidecar path."""
    text_path = Path(text_path)
    sidecar = text_path.with_suffix(".tsv")
    if sidecar == text_path:
        raise InvalidArgumentError("text corpus path must not end in .tsv")
    text_path.write_text("".join(f"{s}\n" for s, _ in rows), encoding="utf-8")
    sidecar.write_text("".join(f"{d}\t{s}\n" for s, d in rows), encoding="utf-8")
    return sidecar


def encode_corpus(rows: Sequence[tuple[str, int | None]], vocab: Vocab) -> list[Sentence]:
    return [Sentence(vocab.encode(text), depth) for text, depth in rows]
