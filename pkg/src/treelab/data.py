"""Corpus ingestion, vocabularies, window splits, and the bracket-balance
dataset with its stack-machine oracle.

The character LM protocol: train windows start at offsets 0..49,999 and
test windows at 50,512..55,511, leaving a 513-character gap so no test
context overlaps training text. Desk-scale runs subsample those same
ranges with an even stride.

When the corpus file is absent and the download fails (offline hosts),
``corpus = synthetic`` in the run config switches to a deterministic
generated stand-in with a 65-character vocabulary.
"""

from __future__ import annotations

import os
import urllib.request

import numpy as np

from .errors import DataError

CORPUS_URL = ("https://raw.githubusercontent.com/karpathy/char-rnn/"
              "master/data/tinyshakespeare/input.txt")

TRAIN_OFFSETS = 50_000
TEST_START = 50_512
TEST_OFFSETS = 5_000

BRACKETS = "()[]{}"
PAD_TOKEN = "<PAD>"
_OPEN_TO_CLOSE = {"(": ")", "[": "]", "{": "}"}
_CLOSE_TO_OPEN = {v: k for k, v in _OPEN_TO_CLOSE.items()}


class Vocab:
    """Bijective token <-> dense id map."""

    def __init__(self, tokens, pad_token=None):
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary tokens are not unique")
        self.pad_id = self.token_to_id[pad_token] if pad_token is not None else None

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, text):
        try:
            return np.array([self.token_to_id[t] for t in text], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"token {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids):
        return "".join(self.id_to_token[int(i)] for i in ids)


def build_char_vocab(text: str) -> Vocab:
    """Sorted unique characters => reproducible ids for a given corpus."""
    if not text:
        raise DataError("cannot build a vocabulary from empty text")
    return Vocab(sorted(set(text)))


def bracket_vocab() -> Vocab:
    return Vocab(list(BRACKETS) + [PAD_TOKEN], pad_token=PAD_TOKEN)


# ---------------------------------------------------------------------------
# character corpus

class CharCorpus:
    def __init__(self, text: str):
        if not text:
            raise DataError("corpus is empty")
        self.text = text
        self.vocab = build_char_vocab(text)
        self.ids = self.vocab.encode(text)

    def __len__(self):
        return len(self.text)


def fetch_corpus(path: str, url: str = CORPUS_URL) -> str:
    """Read the corpus file, downloading it first when absent."""
    if not os.path.exists(path):
        try:
            with urllib.request.urlopen(url, timeout=30) as r:
                data = r.read()
        except OSError as exc:
            raise DataError(
                f"corpus file {path!r} is missing and the download from "
                f"{url} failed ({exc}); provide the file or set corpus = synthetic"
            ) from exc
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "wb") as f:
            f.write(data)
    with open(path, "r", encoding="utf-8") as f:
        return f.read()


def lm_splits(corpus: CharCorpus, seq_len: int, window_extra: int = 0,
              train_windows: int = TRAIN_OFFSETS, test_windows: int = TEST_OFFSETS):
    """Window start offsets for train and test.

    Full scale keeps all 50,000 / 5,000 stride-1 offsets; smaller counts
    stride evenly through the same ranges so coverage stays broad.
    """
    window = seq_len + window_extra
    needed = TEST_START + TEST_OFFSETS - 1 + window
    if len(corpus) < needed:
        raise DataError(f"corpus has {len(corpus)} chars, need at least {needed}")
    if not (0 < train_windows <= TRAIN_OFFSETS and 0 < test_windows <= TEST_OFFSETS):
        raise DataError("window counts exceed the protocol ranges")
    train = np.arange(train_windows) * (TRAIN_OFFSETS // train_windows)
    test = TEST_START + np.arange(test_windows) * (TEST_OFFSETS // test_windows)
    return train.astype(np.int64), test.astype(np.int64)


def window_batches(ids: np.ndarray, offsets: np.ndarray, window: int,
                   batch_size: int, rng: np.random.Generator | None = None):
    """Yield [B, window] id matrices; shuffles offsets when given an rng."""
    offsets = np.asarray(offsets, dtype=np.int64)
    if rng is not None:
        offsets = rng.permutation(offsets)
    base = np.arange(window, dtype=np.int64)
    for i in range(0, len(offsets), batch_size):
        chunk = offsets[i:i + batch_size]
        yield ids[chunk[:, None] + base]


# ---------------------------------------------------------------------------
# bracket balance task

def is_balanced(tokens: str) -> bool:
    """Stack machine: push opens, pop-and-match closes."""
    stack = []
    for t in tokens:
        if t in _OPEN_TO_CLOSE:
            stack.append(t)
        elif t in _CLOSE_TO_OPEN:
            if not stack or stack.pop() != _CLOSE_TO_OPEN[t]:
                return False
        else:
            raise DataError(f"non-bracket token {t!r}")
    return not stack


def gen_balanced(rng: np.random.Generator, length: int) -> str:
    """Random balanced string of exactly ``length`` tokens.

    At each step either open a random type (budget permitting: every open
    still needs a matching close) or close the top of stack.
    """
    if length % 2 or length < 2:
        raise DataError(f"balanced strings need a positive even length, got {length}")
    out = []
    stack = []
    for pos in range(length):
        remaining = length - pos
        can_open = len(stack) + 2 <= remaining
        can_close = bool(stack)
        if can_open and (not can_close or rng.random() < 0.5):
            b = BRACKETS[2 * int(rng.integers(3))]
            stack.append(b)
            out.append(b)
        else:
            out.append(_OPEN_TO_CLOSE[stack.pop()])
    s = "".join(out)
    assert is_balanced(s)
    return s


def max_nesting_depth(tokens: str) -> int:
    depth = best = 0
    for t in tokens:
        if t in _OPEN_TO_CLOSE:
            depth += 1
            best = max(best, depth)
        elif t in _CLOSE_TO_OPEN:
            depth -= 1
    return best


def gen_unbalanced(rng: np.random.Generator, length: int) -> str:
    """Minimally corrupted balanced string, resampled until the oracle
    rejects it. Small corruption distance keeps the task structural: the
    negatives cannot be told apart by token-count statistics."""
    base = list(gen_balanced(rng, length))
    while True:
        s = base.copy()
        kind = int(rng.integers(3))
        if kind == 0:
            i = int(rng.integers(length))
            choices = [b for b in BRACKETS if b != s[i]]
            s[i] = choices[int(rng.integers(len(choices)))]
        elif kind == 1:
            i, j = rng.choice(length, size=2, replace=False)
            s[int(i)], s[int(j)] = s[int(j)], s[int(i)]
        else:
            i = int(rng.integers(length))
            flip = dict(_OPEN_TO_CLOSE)
            flip.update(_CLOSE_TO_OPEN)
            s[i] = flip[s[i]]
        candidate = "".join(s)
        if not is_balanced(candidate):
            return candidate


def make_bracket_dataset(seed: int, n_total: int = 2000,
                         length_min: int = 512, length_max: int = 1024,
                         train_fraction: float = 0.8):
    """Equal-class dataset of (string, label) pairs, split train/validation.

    Lengths are drawn uniformly from the even values in [length_min,
    length_max]; labels: 1 balanced, 0 unbalanced. Same seed, same bytes.
    """
    rng = np.random.default_rng(seed)
    lengths = np.arange(length_min + length_min % 2, length_max + 1, 2)

    def build(count):
        examples = []
        for i in range(count):
            L = int(lengths[int(rng.integers(len(lengths)))])
            if i % 2 == 0:
                examples.append((gen_balanced(rng, L), 1))
            else:
                examples.append((gen_unbalanced(rng, L), 0))
        return examples

    n_train = int(n_total * train_fraction)
    return build(n_train), build(n_total - n_train)


def save_bracket_dataset(path, examples):
    with open(path, "w", encoding="utf-8") as f:
        for tokens, label in examples:
            f.write(f"{label}\t{tokens}\n")


def load_bracket_dataset(path):
    examples = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            label, _, tokens = line.rstrip("\n").partition("\t")
            examples.append((tokens, int(label)))
    return examples


def bracket_batches(examples, vocab: Vocab, batch_size: int,
                    rng: np.random.Generator | None = None):
    """Yield (tokens [B, Lmax], mask [B, Lmax], labels [B]) with right
    padding to the batch maximum."""
    order = np.arange(len(examples))
    if rng is not None:
        order = rng.permutation(order)
    for i in range(0, len(order), batch_size):
        batch = [examples[int(j)] for j in order[i:i + batch_size]]
        longest = max(len(s) for s, _ in batch)
        tokens = np.full((len(batch), longest), vocab.pad_id, np.int64)
        mask = np.zeros((len(batch), longest), bool)
        labels = np.zeros(len(batch), np.int64)
        for r, (s, label) in enumerate(batch):
            ids = vocab.encode(s)
            tokens[r, :len(ids)] = ids
            mask[r, :len(ids)] = True
            labels[r] = label
        yield tokens, mask, labels


# ---------------------------------------------------------------------------
# synthetic corpus (offline stand-in)

_SYLLABLES = ["ba", "be", "bo", "ca", "ce", "co", "da", "de", "do", "fa",
              "fe", "ga", "go", "ha", "he", "hi", "ho", "la", "le", "li",
              "lo", "ma", "me", "mi", "mo", "na", "ne", "no", "pa", "pe",
              "ra", "re", "ri", "ro", "sa", "se", "si", "so", "ta", "te",
              "ti", "to", "va", "ve", "vi", "wa", "we", "wi"]

_FUNCTION_WORDS = ["the", "and", "of", "to", "a", "in", "is", "that", "for",
                   "it", "as", "with", "his", "be", "on", "not", "he", "by",
                   "but", "at", "from", "this", "my", "thou", "thy", "shall",
                   "what", "so", "all", "do", "we", "our", "you", "will"]

_SPEAKERS = ["DUKE", "QUEEN", "SERVANT", "HERALD", "CAPTAIN", "FOOL",
             "JUDGE", "KNIGHT", "EXILE", "GHOST", "ZEALOT", "XERXES"]

_QUIRKS = ["'tis", "o'er", "ne'er", "e'en", "half-mad", "new-found",
           "jove-sent", "quick-quiz'd", "vex'd", "exlex"]

_DIRECTIONS = ["Exit.", "Exeunt.", "Exit, vex'd.", "Flourish; exeunt."]


def _lexicon(rng: np.random.Generator):
    words = []
    for _ in range(110):
        n = int(rng.integers(1, 4))
        words.append("".join(_SYLLABLES[int(rng.integers(len(_SYLLABLES)))]
                             for _ in range(n)))
    return words


def synthetic_corpus(n_chars: int = 120_000, seed: int = 42) -> str:
    """Deterministic play-shaped text over a 65-character alphabet.

    Zipf-weighted word reuse keeps next-character entropy low enough for a
    small model to learn real structure (chance level is 1/65).
    """
    rng = np.random.default_rng(seed)
    content = _lexicon(rng)
    weights = 1.0 / np.arange(1, len(content) + 1)
    weights /= weights.sum()
    parts = []
    size = 0
    act = 1
    while size < n_chars:
        if rng.random() < 0.04:
            header = f"ACT {1 + int(rng.integers(3))}, SCENE {1 + int(rng.integers(3))}:\n"
            parts.append(header)
            size += len(header)
            act += 1
        speaker = _SPEAKERS[int(rng.integers(len(_SPEAKERS)))]
        parts.append(speaker + ":\n")
        size += len(speaker) + 2
        for _ in range(int(rng.integers(1, 4))):
            words = []
            for w in range(int(rng.integers(4, 10))):
                roll = rng.random()
                if roll < 0.55:
                    words.append(_FUNCTION_WORDS[int(rng.integers(len(_FUNCTION_WORDS)))])
                elif roll < 0.95:
                    words.append(content[int(rng.choice(len(content), p=weights))])
                else:
                    words.append(_QUIRKS[int(rng.integers(len(_QUIRKS)))])
            if len(words) > 4 and rng.random() < 0.5:
                words[2] += [",", ";", ":"][int(rng.integers(3))]
            sentence = " ".join(words)
            sentence = sentence[0].upper() + sentence[1:]
            sentence += [".", "!", "?"][int(rng.integers(3))] + "\n"
            parts.append(sentence)
            size += len(sentence)
        if rng.random() < 0.12:
            direction = _DIRECTIONS[int(rng.integers(len(_DIRECTIONS)))] + "\n"
            parts.append(direction)
            size += len(direction)
    text = "".join(parts)[:n_chars]
    return text


def synthetic_charset() -> str:
    """The 65 characters the synthetic generator draws from."""
    letters = "abcdefghijklmnopqrstuvwxyz"
    return letters + letters.upper() + " \n.,:;!?'-123"


def load_corpus(spec: str) -> CharCorpus:
    """Resolve a corpus spec: a file path, or ``synthetic[:n_chars]``."""
    if spec.startswith("synthetic"):
        _, _, arg = spec.partition(":")
        return CharCorpus(synthetic_corpus(int(arg) if arg else 120_000))
    return CharCorpus(fetch_corpus(spec))
