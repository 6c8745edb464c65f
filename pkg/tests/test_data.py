import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from treelab import data
from treelab.errors import DataError


# --- vocab --------------------------------------------------------------------

def test_char_vocab_from_tiny_text():
    v = data.build_char_vocab("aba")
    assert len(v) == 2
    assert v.token_to_id == {"a": 0, "b": 1}


def test_char_vocab_rejects_empty():
    with pytest.raises(DataError):
        data.build_char_vocab("")


def test_vocab_round_trip():
    text = data.synthetic_corpus(5000, seed=1)
    v = data.build_char_vocab(text)
    snippet = text[100:400]
    assert v.decode(v.encode(snippet)) == snippet


def test_bracket_vocab_has_seven_tokens():
    v = data.bracket_vocab()
    assert len(v) == 7
    assert v.pad_id == 6
    assert v.decode(v.encode("()[]{}")) == "()[]{}"


# --- splits ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus():
    return data.CharCorpus(data.synthetic_corpus(120_000, seed=42))


def test_full_split_counts(corpus):
    train, test = data.lm_splits(corpus, seq_len=512)
    assert len(train) == 50_000
    assert len(test) == 5_000
    assert train.min() == 0 and train.max() == 49_999
    assert test.min() == 50_512 and test.max() == 55_511


def test_split_gap_prevents_overlap(corpus):
    train, test = data.lm_splits(corpus, seq_len=512)
    assert test.min() - train.max() == 513
    # no test window [t, t+512) intersects any train window [s, s+512)
    assert train.max() + 512 <= test.min()


def test_subsampled_splits_stay_in_range(corpus):
    train, test = data.lm_splits(corpus, seq_len=128, train_windows=5000,
                                 test_windows=1000)
    assert len(train) == 5000 and len(test) == 1000
    assert train.max() < 50_000
    assert test.min() >= 50_512 and test.max() <= 55_511


def test_split_requires_long_corpus():
    short = data.CharCorpus(data.synthetic_corpus(10_000, seed=1))
    with pytest.raises(DataError):
        data.lm_splits(short, seq_len=128)


def test_window_batches_shapes(corpus):
    train, _ = data.lm_splits(corpus, seq_len=32, train_windows=100)
    batches = list(data.window_batches(corpus.ids, train, window=33, batch_size=16))
    assert [b.shape for b in batches] == [(16, 33)] * 6 + [(4, 33)]
    flat = corpus.ids[train[0]:train[0] + 33]
    assert np.array_equal(batches[0][0], flat)


def test_window_batches_seeded_shuffle_is_reproducible(corpus):
    train, _ = data.lm_splits(corpus, seq_len=32, train_windows=64)
    a = list(data.window_batches(corpus.ids, train, 33, 8, np.random.default_rng(5)))
    b = list(data.window_batches(corpus.ids, train, 33, 8, np.random.default_rng(5)))
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


# --- bracket oracle -------------------------------------------------------------

def recursive_descent_balanced(s: str) -> bool:
    """Independent second oracle: grammar B -> '' | (B)B | [B]B | {B}B."""
    def parse(i):
        # parses a maximal balanced prefix starting at i, returns end index
        while i < len(s) and s[i] in "([{":
            close = {"(": ")", "[": "]", "{": "}"}[s[i]]
            j = parse(i + 1)
            if j >= len(s) or s[j] != close:
                return -1 if j == -1 else i  # unmatched open: stop before it
            i = j + 1
        return i

    import sys
    old = sys.getrecursionlimit()
    sys.setrecursionlimit(10000)
    try:
        return parse(0) == len(s)
    finally:
        sys.setrecursionlimit(old)


@pytest.mark.parametrize("s,expected", [
    ("()", True),
    ("([)]", False),
    ("{[()()]}", True),
    ("(((", False),
    ("", True),
    ("]", False),
    ("()[]{}", True),
])
def test_is_balanced_cases(s, expected):
    assert data.is_balanced(s) is expected


def test_is_balanced_rejects_foreign_tokens():
    with pytest.raises(DataError):
        data.is_balanced("(a)")


@settings(max_examples=500, deadline=None)
@given(st.text(alphabet="()[]{}", max_size=40))
def test_two_oracles_agree(s):
    assert data.is_balanced(s) == recursive_descent_balanced(s)


def test_two_oracles_agree_on_bulk_random_strings():
    rng = np.random.default_rng(99)
    alphabet = np.array(list("()[]{}"))
    for _ in range(10_000):
        n = int(rng.integers(0, 24))
        s = "".join(alphabet[rng.integers(0, 6, n)])
        assert data.is_balanced(s) == recursive_descent_balanced(s)


# --- generators -----------------------------------------------------------------

def test_gen_balanced_always_passes_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        L = int(rng.integers(1, 40)) * 2
        s = data.gen_balanced(rng, L)
        assert len(s) == L
        assert data.is_balanced(s)


def test_gen_balanced_rejects_odd_length():
    with pytest.raises(DataError):
        data.gen_balanced(np.random.default_rng(0), 7)


def test_gen_balanced_nesting_depth_at_length_512():
    rng = np.random.default_rng(1)
    depths = [data.max_nesting_depth(data.gen_balanced(rng, 512))
              for _ in range(200)]
    print(f"max nesting depth over 200 samples at length 512: {max(depths)}")
    assert max(depths) >= 10


def test_gen_unbalanced_properties():
    rng = np.random.default_rng(2)
    for _ in range(200):
        L = int(rng.integers(1, 40)) * 2
        s = data.gen_unbalanced(rng, L)
        assert len(s) == L and L % 2 == 0
        assert not data.is_balanced(s)


def test_unbalanced_stays_close_to_some_balanced_string():
    # corruption edits at most two positions of its balanced source
    rng = np.random.default_rng(3)
    for _ in range(50):
        src_rng = np.random.default_rng(int(rng.integers(1 << 30)))
        probe = np.random.default_rng(int(rng.integers(1 << 30)))
        # regenerate pairwise: same sub-seed gives the same balanced base
        state = src_rng.bit_generator.state
        base = data.gen_balanced(src_rng, 64)
        src_rng.bit_generator.state = state
        corrupted = data.gen_unbalanced(src_rng, 64)
        hamming = sum(a != b for a, b in zip(base, corrupted))
        assert hamming <= 2


# --- dataset --------------------------------------------------------------------

def test_bracket_dataset_counts_and_balance():
    train, val = data.make_bracket_dataset(seed=42, n_total=200,
                                           length_min=16, length_max=32)
    assert len(train) == 160 and len(val) == 40
    assert sum(lbl for _, lbl in train) == 80
    assert sum(lbl for _, lbl in val) == 20
    for s, lbl in train + val:
        assert len(s) % 2 == 0 and 16 <= len(s) <= 32
        assert data.is_balanced(s) == bool(lbl)


def test_bracket_dataset_deterministic():
    a = data.make_bracket_dataset(seed=7, n_total=60, length_min=8, length_max=16)
    b = data.make_bracket_dataset(seed=7, n_total=60, length_min=8, length_max=16)
    assert a == b


def test_bracket_dataset_cache_round_trip(tmp_path):
    train, _ = data.make_bracket_dataset(seed=5, n_total=40, length_min=8,
                                         length_max=12)
    path = tmp_path / "brackets.tsv"
    data.save_bracket_dataset(path, train)
    assert data.load_bracket_dataset(path) == train


def test_bracket_batches_padding_and_mask():
    train, _ = data.make_bracket_dataset(seed=5, n_total=40, length_min=8,
                                         length_max=16)
    v = data.bracket_vocab()
    for tokens, mask, labels in data.bracket_batches(train, v, batch_size=8):
        assert tokens.shape == mask.shape
        assert labels.shape == (tokens.shape[0],)
        assert ((tokens == v.pad_id) == ~mask).all()
        real_lengths = mask.sum(axis=1)
        assert tokens.shape[1] == real_lengths.max()


# --- synthetic corpus -------------------------------------------------------------

def test_synthetic_corpus_covers_65_chars():
    text = data.synthetic_corpus(120_000, seed=42)
    assert set(text) == set(data.synthetic_charset())
    assert len(set(text)) == 65


def test_synthetic_corpus_deterministic():
    assert data.synthetic_corpus(20_000, seed=9) == data.synthetic_corpus(20_000, seed=9)


def test_load_corpus_synthetic_spec():
    c = data.load_corpus("synthetic:30000")
    assert len(c) == 30_000
    assert len(c.vocab) <= 65
