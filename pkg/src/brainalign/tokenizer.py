"""Domain WordPiece vocabulary training and deterministic tokenization.

Training follows the likelihood-gain merge rule: at every step the adjacent
unit pair (a, b) maximizing count(ab) / (count(a) * count(b)) is fused into a
new vocabulary entry, subject to count(ab) >= min_frequency. Frequent whole
words therefore end up as single tokens while rare words stay segmented.
Encoding is greedy longest-match with "##" continuation pieces.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD, UNK, CLS, SEP, MASK = "<pad>", "<unk>", "<cls>", "<sep>", "<mask>"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"

MAX_WORD_CHARS = 100  # longer words are mapped to <unk> outright

# words, single digits, single punctuation marks (numerals split per digit so
# measurement strings like "17 mm" stay tokenizable); a literal "<unk>" is kept
# whole so decode output re-encodes to the same ids
_WORD_RE = re.compile(r"<unk>|[a-z]+|[0-9]|[^\sa-z0-9]")


class TokenizerError(ValueError):
    pass


def pre_tokenize(text: str) -> list[str]:
    """Lowercase and split into word units: letter runs, digits, punctuation."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token set; ids are contiguous from 0 with specials pinned first."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise TokenizerError("special tokens must occupy ids 0..4")
        index = {}
        for i, tok in enumerate(self.tokens):
            if tok in index:
                raise TokenizerError(f"duplicate token {tok!r}")
            index[tok] = i
        object.__setattr__(self, "index", index)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id_of(self, token: str) -> int:
        return self.index[token]

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tokens=tuple(lines))


@dataclass
class TokenSequence:
    token_ids: list[int]
    tokens: list[str]
    attention_mask: list[int]

    def __post_init__(self):
        if not (len(self.token_ids) == len(self.tokens) == len(self.attention_mask)):
            raise TokenizerError("token_ids, tokens and attention_mask lengths differ")

    def __len__(self):
        return len(self.token_ids)


def _initial_segmentation(word: str) -> tuple[str, ...]:
    return tuple([word[0]] + [CONTINUATION + ch for ch in word[1:]])


def _merge_token(a: str, b: str) -> str:
    return a + (b[len(CONTINUATION) :] if b.startswith(CONTINUATION) else b)


def train_wordpiece(texts, vocab_size: int = 10000, min_frequency: int = 10) -> Vocabulary:
    """Train a WordPiece vocabulary on an iterable of texts.

    Deterministic: merge ties are broken by the lexicographically smallest
    merged token (then pair). Stops when vocab_size is reached or no pair
    occurs at least min_frequency times.
    """
    word_freq = Counter()
    for text in texts:
        word_freq.update(pre_tokenize(text))
    if not word_freq:
        raise TokenizerError("empty corpus")

    segmentations = {w: _initial_segmentation(w) for w in word_freq}
    unit_freq = Counter()
    for word, seg in segmentations.items():
        for unit in seg:
            unit_freq[unit] += word_freq[word]

    alphabet = sorted(unit_freq)
    base = len(SPECIAL_TOKENS) + len(alphabet)
    if vocab_size <= base:
        raise TokenizerError(
            f"vocab_size={vocab_size} does not exceed specials + base characters ({base})"
        )

    tokens = list(SPECIAL_TOKENS) + alphabet
    while len(tokens) < vocab_size:
        pair_counts = Counter()
        for word, seg in segmentations.items():
            freq = word_freq[word]
            for a, b in zip(seg, seg[1:]):
                pair_counts[(a, b)] += freq

        best = None
        for (a, b), count in pair_counts.items():
            if count < min_frequency:
                continue
            score = count / (unit_freq[a] * unit_freq[b])
            key = (-score, _merge_token(a, b), a, b)
            if best is None or key < best[0]:
                best = (key, (a, b))
        if best is None:
            break

        a, b = best[1]
        merged = _merge_token(a, b)
        tokens.append(merged)
        for word, seg in segmentations.items():
            if a not in seg:
                continue
            out = []
            i = 0
            while i < len(seg):
                if i + 1 < len(seg) and seg[i] == a and seg[i + 1] == b:
                    out.append(merged)
                    unit_freq[merged] += word_freq[word]
                    unit_freq[a] -= word_freq[word]
                    unit_freq[b] -= word_freq[word]
                    i += 2
                else:
                    out.append(seg[i])
                    i += 1
            segmentations[word] = tuple(out)

    return Vocabulary(tokens=tuple(tokens))


def segment_word(word: str, vocab: Vocabulary) -> list[str] | None:
    """Greedy longest-match segmentation; None if the word cannot be covered."""
    if len(word) > MAX_WORD_CHARS:
        return None
    pieces = []
    start = 0
    while start < len(word):
        end = len(word)
        piece = None
        while end > start:
            candidate = word[start:end]
            if start > 0:
                candidate = CONTINUATION + candidate
            if candidate in vocab:
                piece = candidate
                break
            end -= 1
        if piece is None:
            return None
        pieces.append(piece)
        start = end
    return pieces


def encode(text: str, vocab: Vocabulary) -> TokenSequence:
    """Tokenize text to word pieces; unsegmentable words become <unk>."""
    tokens = []
    for word in pre_tokenize(text):
        pieces = None if word == UNK else segment_word(word, vocab)
        tokens.extend(pieces if pieces is not None else [UNK])
    ids = [vocab.id_of(t) for t in tokens]
    return TokenSequence(token_ids=ids, tokens=tokens, attention_mask=[1] * len(ids))


def decode(token_ids, vocab: Vocabulary) -> str:
    """Join pieces back into whitespace-normalized text.

    Structural specials (<pad>/<cls>/<sep>/<mask>) are dropped; <unk> is kept
    as its literal marker so decoded text re-encodes to the same ids.
    """
    words = []
    for tid in token_ids:
        if not 0 <= tid < len(vocab):
            raise TokenizerError(f"token id {tid} out of range for |V|={len(vocab)}")
        tok = vocab.tokens[tid]
        if tok in SPECIAL_TOKENS and tok != UNK:
            continue
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION) :]
        else:
            words.append(tok)
    return " ".join(words)


def pack_blocks(token_ids, block_length: int = 128, *, vocab: Vocabulary) -> list[TokenSequence]:
    """Chop a corpus token stream into contiguous fixed-length padded blocks."""
    if block_length < 2:
        raise TokenizerError("block_length must be >= 2")
    ids = list(token_ids)
    blocks = []
    for start in range(0, len(ids), block_length):
        chunk = ids[start : start + block_length]
        n_real = len(chunk)
        n_pad = block_length - n_real
        chunk = chunk + [PAD_ID] * n_pad
        blocks.append(
            TokenSequence(
                token_ids=chunk,
                tokens=[vocab.tokens[i] for i in chunk],
                attention_mask=[1] * n_real + [0] * n_pad,
            )
        )
    return blocks
