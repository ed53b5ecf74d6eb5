"""Byte-level BPE tokenizer shared by decoder inputs and retrieved captions.

Text is split into words (each word keeps its leading space, so decoding is
plain concatenation), every word is mapped to UTF-8 bytes, and learned merges
are applied by rank.  The 256 byte symbols are always in the vocabulary, which
makes :func:`encode` total.

Caption normalization (lowercase, punctuation stripped, whitespace collapsed)
is a separate step applied once at ingestion; see :func:`normalize_caption`.
"""

from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
DEFAULT_MAX_LEN = 40
NORMALIZATION = "lowercase+strip-punctuation+collapse-whitespace"
HEADER = "ratcap-bpe v1"

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)
_WORD = re.compile(r" ?[^ ]+| +(?! )| +")


def normalize_caption(text: str) -> str:
    """Lowercase, drop punctuation, collapse runs of whitespace."""
    text = _PUNCT.sub(" ", text.lower())
    return " ".join(text.split())


@lru_cache(maxsize=None)
def bytes_to_unicode() -> dict[int, str]:
    """Printable, whitespace-free stand-in character for every byte value."""
    keep = list(range(ord("!"), ord("~") + 1)) + list(range(0xA1, 0xAD)) + list(range(0xAE, 0x100))
    chars = list(keep)
    n = 0
    for b in range(256):
        if b not in keep:
            keep.append(b)
            chars.append(256 + n)
            n += 1
    return dict(zip(keep, map(chr, chars)))


@lru_cache(maxsize=None)
def unicode_to_bytes() -> dict[str, int]:
    return {v: k for k, v in bytes_to_unicode().items()}


def _word_symbols(word: str) -> tuple[str, ...]:
    table = bytes_to_unicode()
    return tuple(table[b] for b in word.encode("utf-8"))


def pretokenize(text: str) -> list[str]:
    return _WORD.findall(text)


class TokenizerError(ValueError):
    pass


@dataclass
class Vocabulary:
    id_to_token: list[str]
    token_to_id: dict[str, int] = field(init=False)
    truncated: bool = False

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise TokenizerError("duplicate tokens in vocabulary")
        if tuple(self.id_to_token[:3]) != SPECIALS:
            raise TokenizerError("vocabulary must start with <pad>, <bos>, <eos>")

    def __len__(self) -> int:
        return len(self.id_to_token)

    pad_id = PAD
    bos_id = BOS
    eos_id = EOS


@dataclass
class MergeTable:
    merges: list[tuple[str, str]]

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise TokenizerError("duplicate merge pairs")
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.merges)


def base_alphabet() -> list[str]:
    return list(SPECIALS) + [bytes_to_unicode()[b] for b in range(256)]


def _pair_counts(words: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in words.items():
        for pair in zip(symbols, symbols[1:]):
            counts[pair] += freq
    return counts


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    out = []
    i = 0
    left, right = pair
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def train_bpe(corpus: list[str], target_vocab_size: int = 4096) -> tuple[Vocabulary, MergeTable]:
    """Greedy most-frequent-pair BPE.

    Ties between equally frequent pairs go to the lexicographically smallest
    ``(left, right)``.  If the corpus runs out of pairs before the target size
    is reached, the smaller vocabulary is returned with ``truncated=True``.
    """
    if not corpus:
        raise TokenizerError("empty corpus")
    alphabet = base_alphabet()
    if target_vocab_size < len(alphabet):
        raise TokenizerError(
            f"target vocabulary {target_vocab_size} is below the base alphabet size {len(alphabet)}"
        )
    words: Counter = Counter()
    for text in corpus:
        for w in pretokenize(text):
            words[_word_symbols(w)] += 1
    words = dict(words)

    tokens = list(alphabet)
    known = set(tokens)
    merges: list[tuple[str, str]] = []
    counts = _pair_counts(words)
    truncated = False
    while len(tokens) < target_vocab_size:
        counts = +counts  # drop non-positive entries
        if not counts:
            truncated = True
            break
        best_freq = max(counts.values())
        best = min(p for p, c in counts.items() if c == best_freq)
        merges.append(best)
        new_tok = best[0] + best[1]
        if new_tok not in known:
            tokens.append(new_tok)
            known.add(new_tok)
        updated = {}
        for symbols, freq in words.items():
            if best[0] in symbols and len(symbols) > 1:
                merged = _merge_word(symbols, best)
                if merged != symbols:
                    for pair in zip(symbols, symbols[1:]):
                        counts[pair] -= freq
                    for pair in zip(merged, merged[1:]):
                        counts[pair] += freq
                    updated[symbols] = merged
        for old, new in updated.items():
            freq = words.pop(old)
            words[new] = words.get(new, 0) + freq
    if truncated:
        warnings.warn(
            f"BPE stopped at {len(tokens)} tokens: no pairs left to merge "
            f"(target {target_vocab_size})",
            stacklevel=2,
        )
    return Vocabulary(tokens, truncated=truncated), MergeTable(merges)


class Tokenizer:
    """Encoder/decoder bound to one vocabulary and merge table."""

    def __init__(self, vocab: Vocabulary, merges: MergeTable, max_len: int = DEFAULT_MAX_LEN):
        if max_len < 2:
            raise TokenizerError("max_len must leave room for BOS and EOS")
        self.vocab = vocab
        self.merges = merges
        self.max_len = max_len
        self._cache: dict[str, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def _bpe(self, word: str) -> tuple[int, ...]:
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(_word_symbols(word))
        ranks = self.merges.ranks
        while len(symbols) > 1:
            best_rank, best_i = None, -1
            for i in range(len(symbols) - 1):
                r = ranks.get((symbols[i], symbols[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best_rank, best_i = r, i
            if best_rank is None:
                break
            pair = (symbols[best_i], symbols[best_i + 1])
            symbols = list(_merge_word(tuple(symbols), pair))
        ids = tuple(self.vocab.token_to_id[s] for s in symbols)
        self._cache[word] = ids
        return ids

    def encode(self, text: str, max_len: int | None = None) -> list[int]:
        """``[BOS, ..., EOS]``, truncated to ``max_len`` with EOS kept last."""
        max_len = self.max_len if max_len is None else max_len
        body: list[int] = []
        for w in pretokenize(text):
            body.extend(self._bpe(w))
        return [BOS] + body[: max_len - 2] + [EOS]

    def decode(self, ids) -> str:
        n = len(self.vocab)
        table = unicode_to_bytes()
        out = bytearray()
        for i in ids:
            i = int(i)
            if i < 0 or i >= n:
                raise IndexError(f"token id {i} outside vocabulary of size {n}")
            if i in (PAD, BOS, EOS):
                continue
            out.extend(table[c] for c in self.vocab.id_to_token[i])
        return out.decode("utf-8", errors="replace")

    # -- persistence --------------------------------------------------------
    def save(self, path) -> None:
        lines = [f"{HEADER} {len(self.vocab)}"]
        lines += [f"{r}\t{a}\t{b}" for r, (a, b) in enumerate(self.merges.merges)]
        lines += [f"{i}\t{t}" for i, t in enumerate(self.vocab.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path, max_len: int = DEFAULT_MAX_LEN) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = lines[0].split(" ")
        if " ".join(head[:2]) != HEADER:
            raise TokenizerError(f"{path}: not a ratcap BPE file")
        size = int(head[2])
        merges, tokens = [], []
        for line in lines[1:]:
            parts = line.split("\t")
            if len(parts) == 3:
                merges.append((parts[1], parts[2]))
            elif len(parts) == 2:
                tokens.append(parts[1])
            else:
                raise TokenizerError(f"{path}: malformed line {line!r}")
        if len(tokens) != size:
            raise TokenizerError(f"{path}: header says {size} tokens, found {len(tokens)}")
        return cls(Vocabulary(tokens), MergeTable(merges), max_len=max_len)

    @classmethod
    def train(cls, corpus: list[str], target_vocab_size: int = 4096, max_len: int = DEFAULT_MAX_LEN):
        vocab, merges = train_bpe(corpus, target_vocab_size)
        return cls(vocab, merges, max_len=max_len)
