"""Nucleotide tokenizers: character, non-overlapping k-mer, and trained BPE.

All vocabularies reserve ids 0..3 for PAD/UNK/BOS/EOS and frame encoded
sequences as [BOS, tokens..., EOS]. Padding is a batching concern and never
happens here.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

from .errors import ConfigError, ParseError

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_NAMES = ("<pad>", "<unk>", "<bos>", "<eos>")
N_SPECIALS = 4

_ACGT = "ACGT"


@dataclass
class Vocab:
    """Token registry for one tokenizer kind.

    kind is "char", "kmer" (with kmer_k set) or "bpe". Ids are contiguous with
    the four specials first; for BPE, replaying `merges` over the character
    alphabet reproduces the non-special part of the table.
    """

    kind: str
    token_to_id: dict[str, int]
    merges: list[tuple[str, str]] = field(default_factory=list)
    kmer_k: int | None = None

    def __post_init__(self):
        self.id_to_token = [None] * len(self.token_to_id)
        for tok, i in self.token_to_id.items():
            self.id_to_token[i] = tok
        self._merge_rank = {pair: r for r, pair in enumerate(self.merges)}

    def __len__(self) -> int:
        return len(self.token_to_id)

    @property
    def size(self) -> int:
        return len(self.token_to_id)


@dataclass
class TokenSequence:
    ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)


def _base_table(tokens) -> dict[str, int]:
    table = {name: i for i, name in enumerate(SPECIAL_NAMES)}
    for tok in tokens:
        table[tok] = len(table)
    return table


def char_vocab() -> Vocab:
    return Vocab("char", _base_table(_ACGT))


def kmer_vocab(k: int) -> Vocab:
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    kmers = ("".join(p) for p in itertools.product(_ACGT, repeat=k))
    return Vocab("kmer", _base_table(kmers), kmer_k=k)


def _frame(body: list[int], max_len: int) -> TokenSequence:
    return TokenSequence([BOS] + body[:max_len] + [EOS])


def char_encode(vocab: Vocab, sequence: str, max_len: int = 10**9) -> TokenSequence:
    """One token per character; non-ACGT characters map to UNK."""
    if vocab.kind != "char":
        raise ConfigError(f"char_encode needs a char vocab, got '{vocab.kind}'")
    body = [vocab.token_to_id.get(ch, UNK) for ch in sequence]
    return _frame(body, max_len)


def kmer_encode(vocab: Vocab, sequence: str, max_len: int = 10**9) -> TokenSequence:
    """Non-overlapping k-wide windows, left aligned; a short trailing remainder is dropped."""
    if vocab.kind != "kmer":
        raise ConfigError(f"kmer_encode needs a kmer vocab, got '{vocab.kind}'")
    k = vocab.kmer_k
    body = []
    for start in range(0, len(sequence) - k + 1, k):
        window = sequence[start:start + k]
        body.append(vocab.token_to_id.get(window, UNK))
    return _frame(body, max_len)


def _pair_counts(corpus_tokens: list[list[str]]) -> Counter:
    counts: Counter = Counter()
    for toks in corpus_tokens:
        counts.update(zip(toks, toks[1:]))
    return counts


def bpe_train(corpus: list[str], vocab_size: int) -> Vocab:
    """Standard BPE over the observed character alphabet.

    Repeatedly merges the most frequent adjacent pair (ties broken
    lexicographically by the concatenated string) until `vocab_size` tokens
    exist or no pair occurs at least twice. Single-threaded and deterministic.
    """
    if not corpus:
        raise ConfigError("bpe_train needs a non-empty corpus")
    alphabet = sorted(set("".join(corpus)))
    # equality is the valid zero-merge boundary: specials + alphabet, no merges
    if vocab_size < N_SPECIALS + len(alphabet):
        raise ConfigError(
            f"vocab_size must be at least specials + alphabet = {N_SPECIALS + len(alphabet)}, "
            f"got {vocab_size}"
        )
    tokens = _base_table(alphabet)
    corpus_tokens = [list(seq) for seq in corpus]
    merges: list[tuple[str, str]] = []

    while len(tokens) < vocab_size:
        counts = _pair_counts(corpus_tokens)
        if not counts:
            break
        best_pair = min(counts, key=lambda p: (-counts[p], p[0] + p[1]))
        if counts[best_pair] < 2:
            break
        merged = best_pair[0] + best_pair[1]
        merges.append(best_pair)
        tokens[merged] = len(tokens)
        a, b = best_pair
        for toks in corpus_tokens:
            i = 0
            while i < len(toks) - 1:
                if toks[i] == a and toks[i + 1] == b:
                    toks[i:i + 2] = [merged]
                else:
                    i += 1
    return Vocab("bpe", tokens, merges=merges)


def _apply_merges(
    symbols: list[str],
    merge_rank: dict[tuple[str, str], int],
    merges: list[tuple[str, str]],
) -> list[str]:
    # Repeatedly merging the lowest-rank pair present is equivalent to replaying
    # the merge list in training order: a merge can never create a new instance
    # of an earlier pair, because both of that pair's symbols would have to
    # survive the later merge unchanged.
    while len(symbols) > 1:
        best_rank = None
        for pair in zip(symbols, symbols[1:]):
            r = merge_rank.get(pair)
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
        if best_rank is None:
            break
        a, b = merges[best_rank]
        merged = a + b
        out = []
        i = 0
        while i < len(symbols):
            if i < len(symbols) - 1 and symbols[i] == a and symbols[i + 1] == b:
                out.append(merged)
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    return symbols


def bpe_encode(vocab: Vocab, sequence: str, max_len: int = 10**9) -> TokenSequence:
    """Greedy merge replay; residual symbols missing from the table map to UNK."""
    if vocab.kind != "bpe":
        raise ConfigError(f"bpe_encode needs a bpe vocab, got '{vocab.kind}'")
    symbols = _apply_merges(list(sequence), vocab._merge_rank, vocab.merges)
    body = [vocab.token_to_id.get(s, UNK) for s in symbols]
    return _frame(body, max_len)


def encode(vocab: Vocab, sequence: str, max_len: int = 10**9) -> TokenSequence:
    """Dispatch to the encoder matching the vocab kind."""
    if vocab.kind == "char":
        return char_encode(vocab, sequence, max_len)
    if vocab.kind == "kmer":
        return kmer_encode(vocab, sequence, max_len)
    return bpe_encode(vocab, sequence, max_len)


def decode(vocab: Vocab, tokens: TokenSequence | list[int]) -> str:
    """Concatenate token surfaces, skipping specials; UNK decodes to 'N'."""
    ids = tokens.ids if isinstance(tokens, TokenSequence) else tokens
    parts = []
    for i in ids:
        if not 0 <= i < len(vocab):
            raise ConfigError(f"token id {i} out of range for vocab of size {len(vocab)}")
        if i == UNK:
            parts.append("N")
        elif i >= N_SPECIALS:
            parts.append(vocab.id_to_token[i])
    return "".join(parts)


def save_vocab(vocab: Vocab, path):
    """Text format: #KIND line, one line per token in id order, then #MERGES pairs."""
    with open(path, "w", encoding="ascii") as fh:
        if vocab.kind == "kmer":
            fh.write(f"#KIND kmer {vocab.kmer_k}\n")
        else:
            fh.write(f"#KIND {vocab.kind}\n")
        for tok in vocab.id_to_token:
            fh.write(tok + "\n")
        fh.write("#MERGES\n")
        for a, b in vocab.merges:
            fh.write(f"{a} {b}\n")


def load_vocab(path) -> Vocab:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or not lines[0].startswith("#KIND"):
        raise ParseError("vocab file must start with a #KIND line", path=path, line=1)
    kind_fields = lines[0].split()
    kind = kind_fields[1]
    kmer_k = int(kind_fields[2]) if kind == "kmer" else None
    try:
        merges_at = lines.index("#MERGES")
    except ValueError:
        raise ParseError("missing #MERGES marker", path=path) from None
    tokens = lines[1:merges_at]
    if tokens[:N_SPECIALS] != list(SPECIAL_NAMES):
        raise ParseError("specials must occupy ids 0..3", path=path, line=2)
    merges = []
    for off, ln in enumerate(lines[merges_at + 1:]):
        if not ln:
            continue
        parts = ln.split(" ")
        if len(parts) != 2:
            raise ParseError(f"bad merge line '{ln}'", path=path, line=merges_at + 2 + off)
        merges.append((parts[0], parts[1]))
    vocab = Vocab(kind, {tok: i for i, tok in enumerate(tokens)}, merges=merges, kmer_k=kmer_k)
    if kind == "bpe":
        _check_replay(vocab, path)
    return vocab


def _check_replay(vocab: Vocab, path):
    """Fail loading when the merge list does not rebuild the stored table."""
    rebuilt = list(SPECIAL_NAMES) + sorted(
        t for t in vocab.token_to_id if t not in SPECIAL_NAMES and len(t) == 1
    )
    for a, b in vocab.merges:
        if a not in rebuilt or b not in rebuilt:
            raise ParseError(f"merge ({a},{b}) references unknown token", path=path)
        rebuilt.append(a + b)
    if rebuilt != vocab.id_to_token:
        raise ParseError("merge replay does not reconstruct the vocabulary", path=path)
