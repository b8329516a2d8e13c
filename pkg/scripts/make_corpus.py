"""Regenerate the bundled synthetic corpus.

Emits data/corpus.txt (training) and data/val.txt (held out) from one
seeded stream, so the two files never share a window. The text is
English-like word salad: a Zipf-weighted vocabulary of pronounceable
pseudo-words plus common function words, arranged into sentences and
paragraphs. Byte-level models pick up the spelling and punctuation
structure quickly, which is all the desk experiments need.

Running this script twice produces byte-identical files.
"""

import os

import numpy as np

SEED = 20260822
TRAIN_BYTES = 1_300_000
VAL_BYTES = 140_000
# Vocabulary size tunes task difficulty.  The desk experiments need text a
# ~140k-parameter model can nearly master: with redundant capacity some
# attention heads go idle and the head-usage statistics differentiate, which
# is the regime the collapse experiments study.  Larger vocabularies keep
# every head busy and the usage statistics stay flat.
N_WORDS = 120
ZIPF_EXP = 1.10

ONSETS = ["b", "br", "c", "ch", "d", "dr", "f", "fl", "g", "gr", "h", "j",
          "k", "l", "m", "n", "p", "pl", "pr", "qu", "r", "s", "sh", "sl",
          "sp", "st", "str", "t", "th", "tr", "v", "w"]
VOWELS = ["a", "e", "i", "o", "u", "ai", "ea", "ee", "io", "ou"]
CODAS = ["", "b", "ck", "d", "g", "l", "ll", "m", "n", "nd", "ng", "nt",
         "p", "r", "rd", "s", "st", "t", "th"]

FUNCTION_WORDS = ["the", "of", "and", "to", "a", "in", "that", "it", "was",
                  "for", "on", "with", "as", "at", "by", "from", "this",
                  "but", "not", "they", "his", "her", "which", "or", "we",
                  "an", "were", "been", "has", "had", "is", "are", "be"]


def build_vocab(rng, n_words=N_WORDS):
    words = list(FUNCTION_WORDS)
    seen = set(words)
    while len(words) < n_words:
        n_syll = rng.integers(1, 4)
        w = "".join(
            ONSETS[rng.integers(len(ONSETS))]
            + VOWELS[rng.integers(len(VOWELS))]
            + (CODAS[rng.integers(len(CODAS))] if s == n_syll - 1 else "")
            for s in range(n_syll)
        )
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def stream_text(rng, vocab, n_bytes):
    # Zipf weights over the rank-ordered vocabulary
    ranks = np.arange(1, len(vocab) + 1, dtype=np.float64)
    p = ranks ** -ZIPF_EXP
    p /= p.sum()
    chunks = []
    total = 0
    sent_in_para = 0
    para_len = int(rng.integers(3, 8))
    while total < n_bytes:
        n_words = int(rng.integers(4, 15))
        idx = rng.choice(len(vocab), size=n_words, p=p)
        words = [vocab[i] for i in idx]
        words[0] = words[0].capitalize()
        end = "." if rng.random() < 0.85 else ("?" if rng.random() < 0.5 else "!")
        if n_words > 7 and rng.random() < 0.3:
            cut = int(rng.integers(3, n_words - 2))
            words[cut] = words[cut] + ","
        sentence = " ".join(words) + end
        sent_in_para += 1
        if sent_in_para >= para_len:
            sentence += "\n\n"
            sent_in_para = 0
            para_len = int(rng.integers(3, 8))
        else:
            sentence += " "
        chunks.append(sentence)
        total += len(sentence)
    return "".join(chunks)[:n_bytes]


def main():
    rng = np.random.default_rng(SEED)
    vocab = build_vocab(rng)
    out_dir = os.path.join(os.path.dirname(__file__), "..", "data")
    os.makedirs(out_dir, exist_ok=True)
    # one stream, consumed in order: train first, validation after, so the
    # validation text is disjoint from every training window
    train = stream_text(rng, vocab, TRAIN_BYTES)
    val = stream_text(rng, vocab, VAL_BYTES)
    with open(os.path.join(out_dir, "corpus.txt"), "w", newline="\n") as f:
        f.write(train)
    with open(os.path.join(out_dir, "val.txt"), "w", newline="\n") as f:
        f.write(val)
    print(f"corpus.txt {len(train)} bytes, val.txt {len(val)} bytes")


if __name__ == "__main__":
    main()
