import math

import numpy as np
import pytest

from taxossm.errors import ConfigError, ParseError
from taxossm.tokenizers import (
    BOS,
    EOS,
    PAD,
    UNK,
    bpe_encode,
    bpe_train,
    char_encode,
    char_vocab,
    decode,
    kmer_encode,
    kmer_vocab,
    load_vocab,
    save_vocab,
)


def ids_of(vocab, *tokens):
    return [vocab.token_to_id[t] for t in tokens]


# ---------------------------------------------------------------------------
# char and k-mer encoders


def test_char_encode_basic():
    v = char_vocab()
    out = char_encode(v, "ACGT")
    assert out.ids == [BOS] + ids_of(v, "A", "C", "G", "T") + [EOS]
    assert len(out) == 6


def test_char_encode_unk():
    v = char_vocab()
    assert char_encode(v, "ACNG").ids == [BOS, v.token_to_id["A"], v.token_to_id["C"],
                                          UNK, v.token_to_id["G"], EOS]


def test_char_encode_empty():
    assert char_encode(char_vocab(), "").ids == [BOS, EOS]


def test_kmer_encode_exact_division():
    v = kmer_vocab(3)
    assert kmer_encode(v, "ACGTAC").ids == [BOS] + ids_of(v, "ACG", "TAC") + [EOS]


def test_kmer_encode_drops_remainder():
    v = kmer_vocab(3)
    assert kmer_encode(v, "ACGTACG").ids == kmer_encode(v, "ACGTAC").ids


def test_kmer_encode_unk_window():
    v = kmer_vocab(3)
    assert kmer_encode(v, "ACNTAC").ids == [BOS, UNK, v.token_to_id["TAC"], EOS]


def test_specials_occupy_first_four_ids_everywhere():
    for v in (char_vocab(), kmer_vocab(2), bpe_train(["ACGTACGT"] * 3, 10)):
        assert (PAD, UNK, BOS, EOS) == (0, 1, 2, 3)
        assert v.id_to_token[:4] == ["<pad>", "<unk>", "<bos>", "<eos>"]
        assert sorted(v.token_to_id.values()) == list(range(len(v)))


def test_max_len_truncation():
    v = char_vocab()
    out = char_encode(v, "ACGT" * 10, max_len=5)
    assert len(out) == 7 and out.ids[0] == BOS and out.ids[-1] == EOS
    assert decode(v, out) == "ACGTA"


# ---------------------------------------------------------------------------
# BPE training against a brute-force oracle


def oracle_bpe_merges(corpus, vocab_size):
    """Independent BPE trainer: recounts every pair from scratch each step."""
    alphabet = sorted(set("".join(corpus)))
    tokens = list(alphabet)
    seqs = [list(s) for s in corpus]
    merges = []
    while len(tokens) + 4 < vocab_size:
        counts = {}
        for s in seqs:
            for i in range(len(s) - 1):
                counts[(s[i], s[i + 1])] = counts.get((s[i], s[i + 1]), 0) + 1
        if not counts:
            break
        best = None
        for pair, cnt in counts.items():
            key = (-cnt, pair[0] + pair[1])
            if best is None or key < best[0]:
                best = (key, pair)
        if counts[best[1]] < 2:
            break
        a, b = best[1]
        merges.append((a, b))
        tokens.append(a + b)
        for s in seqs:
            i = 0
            while i < len(s) - 1:
                if s[i] == a and s[i + 1] == b:
                    s[i:i + 2] = [a + b]
                else:
                    i += 1
    return merges


def test_bpe_train_worked_example():
    v = bpe_train(["AAAA", "AAAA"], 7)
    assert v.merges == [("A", "A"), ("AA", "AA")]
    assert v.merges == oracle_bpe_merges(["AAAA", "AAAA"], 7)
    assert len(v) == 7


def test_bpe_train_matches_oracle_on_random_corpora(rng):
    bases = np.array(list("ACGT"))
    for trial in range(15):
        corpus = ["".join(bases[rng.integers(0, 4, size=rng.integers(4, 40))])
                  for _ in range(int(rng.integers(2, 12)))]
        size = int(rng.integers(8, 40))
        assert bpe_train(corpus, size).merges == oracle_bpe_merges(corpus, size)


def test_bpe_train_zero_merge_boundary():
    v = bpe_train(["ACGT", "ACGT"], 8)  # 4 specials + 4 letters
    assert v.merges == []
    assert set(v.token_to_id) == {"<pad>", "<unk>", "<bos>", "<eos>", "A", "C", "G", "T"}


def test_bpe_train_stops_when_no_pair_repeats():
    v = bpe_train(["ACGT"], 100)
    assert v.merges == []


def test_bpe_train_rejects_bad_inputs():
    with pytest.raises(ConfigError):
        bpe_train([], 10)
    with pytest.raises(ConfigError):
        bpe_train(["ACGT"], 7)  # below specials + alphabet


def test_bpe_train_deterministic():
    corpus = ["ACGTACGTAC", "GTACGTAACC", "ACACACGTGT"]
    runs = [bpe_train(corpus, 16).merges for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]


# ---------------------------------------------------------------------------
# BPE encoding


def test_bpe_encode_merge_replay():
    v = bpe_train(["AAAA", "AAAA", "ACAC"], 7)
    assert v.merges[0] == ("A", "A")
    out = bpe_encode(v, "AAAA")
    aa = v.token_to_id["AA"]
    assert out.ids == [BOS, aa, aa, EOS]


def test_bpe_encode_without_applicable_merges_matches_char_ids():
    v = bpe_train(["AAAA", "AAAA"], 6)  # alphabet {A}, one merge (A,A)
    out = bpe_encode(v, "CG")  # C and G unseen at training: residuals become UNK
    assert out.ids == [BOS, UNK, UNK, EOS]
    v2 = bpe_train(["ACGT", "ACGT"], 8)  # zero merges over full alphabet
    cv = char_vocab()
    assert decode(v2, bpe_encode(v2, "GATTACA")) == decode(cv, char_encode(cv, "GATTACA"))


def naive_replay_encode(vocab, sequence):
    """Apply each merge once in training order, a full left-to-right pass per merge."""
    symbols = list(sequence)
    for a, b in vocab.merges:
        out, i = [], 0
        while i < len(symbols):
            if i < len(symbols) - 1 and symbols[i] == a and symbols[i + 1] == b:
                out.append(a + b)
                i += 2
            else:
                out.append(symbols[i])
                i += 1
        symbols = out
    return [BOS] + [vocab.token_to_id.get(s, UNK) for s in symbols] + [EOS]


def test_bpe_encode_equals_naive_in_order_replay(rng):
    bases = np.array(list("ACGT"))
    corpus = ["".join(bases[rng.integers(0, 4, size=30)]) for _ in range(8)]
    v = bpe_train(corpus, 24)
    for _ in range(200):
        s = "".join(bases[rng.integers(0, 4, size=rng.integers(0, 50))])
        assert bpe_encode(v, s).ids == naive_replay_encode(v, s)


def test_bpe_round_trip_1000_random_strings(rng):
    bases = np.array(list("ACGT"))
    corpus = ["".join(bases[rng.integers(0, 4, size=60)]) for _ in range(10)]
    v = bpe_train(corpus, 40)
    for _ in range(1000):
        s = "".join(bases[rng.integers(0, 4, size=rng.integers(1, 80))])
        assert decode(v, bpe_encode(v, s)) == s


def test_char_round_trip_1000_random_strings(rng):
    v = char_vocab()
    bases = np.array(list("ACGT"))
    for _ in range(1000):
        s = "".join(bases[rng.integers(0, 4, size=rng.integers(0, 64))])
        assert decode(v, char_encode(v, s)) == s


# ---------------------------------------------------------------------------
# decode


def test_decode_kmer_tokens():
    v = kmer_vocab(3)
    assert decode(v, [BOS, v.token_to_id["ACG"], v.token_to_id["TAC"], EOS]) == "ACGTAC"


def test_decode_specials_only():
    assert decode(char_vocab(), [BOS, EOS]) == ""


def test_decode_unk_becomes_n():
    v = char_vocab()
    assert decode(v, [BOS, v.token_to_id["A"], UNK, EOS]) == "AN"


def test_decode_rejects_out_of_range():
    with pytest.raises(ConfigError):
        decode(char_vocab(), [BOS, 999, EOS])


# ---------------------------------------------------------------------------
# documented k-mer frameshift weakness


def test_kmer_frameshift_sensitivity(rng):
    k = 6
    v = kmer_vocab(k)
    bases = np.array(list("ACGT"))
    for _ in range(25):
        L = int(rng.integers(30, 90))
        s = "".join(bases[rng.integers(0, 4, size=L)])
        orig = kmer_encode(v, s).ids[1:-1]
        shifted = kmer_encode(v, s[1:]).ids[1:-1]
        changed = sum(1 for a, b in zip(orig, shifted) if a != b) + abs(len(orig) - len(shifted))
        assert changed >= math.ceil((L - 1) / k) - 1


# ---------------------------------------------------------------------------
# serialization


def test_vocab_file_round_trip(tmp_path, rng):
    bases = np.array(list("ACGT"))
    corpus = ["".join(bases[rng.integers(0, 4, size=40)]) for _ in range(6)]
    for v in (char_vocab(), kmer_vocab(4), bpe_train(corpus, 20)):
        path = tmp_path / f"{v.kind}.vocab"
        save_vocab(v, path)
        back = load_vocab(path)
        assert back.kind == v.kind
        assert back.kmer_k == v.kmer_k
        assert back.token_to_id == v.token_to_id
        assert back.merges == v.merges


def test_vocab_load_rejects_corrupted_merges(tmp_path, rng):
    v = bpe_train(["ACGTACGT" * 3] * 4, 12)
    path = tmp_path / "v.vocab"
    save_vocab(v, path)
    lines = path.read_text().splitlines()
    lines[5], lines[6] = lines[6], lines[5]  # scramble token id order
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ParseError):
        load_vocab(path)
