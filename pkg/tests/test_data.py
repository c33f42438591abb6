
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnp.data import (MAX_LEN, PLACES, UNK_ID, DatasetError, Instance, Vocabulary, build_vocab,
                        generate_babi_like, load_dataset, load_embeddings, load_splits,
                        replay_answer, split_paths, tokenize, write_dataset)


# ----------------------------------------------------------------- tokenizer

@pytest.mark.parametrize("text, expected", [
    ("The movie, in 1984!", ["the", "movie", ",", "in", "qqq", "!"]),
    ("", []),
    ("hello hello", ["hello", "hello"]),
    ("  Tabs\tand\nnewlines ", ["tabs", "and", "newlines"]),
    ("(quoted)", ["(", "quoted", ")"]),
    ("3.14 and 2nd", ["qqq", "and", "qqq"]),
    ("...", [".", ".", "."]),
    ("don't", ["don't"]),
])
def test_tokenize_examples(text, expected):
    assert tokenize(text) == expected


@settings(max_examples=300, deadline=None)
@given(st.text(alphabet=st.characters(codec="ascii", exclude_categories=("Cc",)), max_size=60))
def test_tokenize_is_a_fixed_point(text):
    once = tokenize(text)
    assert tokenize(" ".join(once)) == once


# ---------------------------------------------------------------- vocabulary

def test_vocab_threshold_and_unknown():
    train = [Instance(0, tokens=("a", "a", "b"))]
    v = build_vocab(train, min_count=2)
    assert "a" in v and "b" not in v
    assert v.encode(["b"]) == [UNK_ID]
    v1 = build_vocab(train, min_count=1)
    assert v1.tokens == ["<pad>", "<unk>", "a", "b"]
    assert v1.encode(["zebra"]) == [1]


def test_vocab_empty_corpus():
    with pytest.raises(ValueError):
        build_vocab([])


def test_vocab_encoding_never_mutates():
    v = build_vocab([Instance(0, tokens=("x", "y"))])
    before = v.to_list()
    v.encode(["new", "words", "x"])
    assert v.to_list() == before
    assert Vocabulary.from_list(before) == v


def test_vocab_truncates_long_sequences():
    v = build_vocab([Instance(0, tokens=("x",))])
    with pytest.warns(UserWarning, match="truncated"):
        ids = v.encode(["x"] * (MAX_LEN + 5))
    assert len(ids) == MAX_LEN


def test_vocab_pair_mode_covers_both_sequences():
    v = build_vocab([Instance(1, p_tokens=("p",), q_tokens=("q",))])
    assert "p" in v and "q" in v


# -------------------------------------------------------------------- loader

def _write(tmp_path, lines, name="d.jsonl"):
    p = tmp_path / name
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return p


def test_load_single_and_pair(tmp_path):
    single = load_dataset(_write(tmp_path, ['{"tokens": ["good"], "label": 1}']), "single")
    assert single == [Instance(1, tokens=("good",))]
    pair = load_dataset(_write(tmp_path, ['{"p_tokens": ["a", "b"], "q_tokens": ["c"], "label": 2}']),
                        "pair")
    assert pair[0].p_tokens == ("a", "b") and pair[0].label == 2 and pair[0].mode == "pair"


@pytest.mark.parametrize("lines, pattern", [
    (['{"tokens": ["a"], "label": 0}', '{"label": 0}'], "line 2: missing field 'tokens'"),
    (['{"tokens": ["a"]}'], "line 1: missing field 'label'"),
    (['{"tokens": ["a"], "label": 0}', "not json"], "line 2: invalid JSON"),
    (['{"tokens": ["a"], "label": 5}'], "line 1: label 5 out of range"),
    (['{"tokens": [], "label": 0}'], "line 1: field 'tokens' is empty"),
])
def test_load_errors(tmp_path, lines, pattern):
    with pytest.raises(DatasetError, match=pattern):
        load_dataset(_write(tmp_path, lines), "single", n_classes=2)


def test_load_pair_missing_question(tmp_path):
    with pytest.raises(DatasetError, match="'q_tokens'"):
        load_dataset(_write(tmp_path, ['{"p_tokens": ["a"], "label": 0}']), "pair")


def test_roundtrip_splits(tmp_path):
    splits = generate_babi_like(1, (5, 3, 2), seed=1)
    prefix = tmp_path / "t"
    for name, items in zip(("train", "valid", "test"), splits):
        write_dataset(split_paths(prefix)[name], items)
    loaded = load_splits(prefix, "pair", 6)
    assert loaded["train"] == list(splits[0]) and len(loaded["test"]) == 2


# ---------------------------------------------------------------- embeddings

def test_embeddings_format_and_fallback(tmp_path):
    vocab = Vocabulary(["hello", "world"])
    path = _write(tmp_path, ["hello 0.1 0.2", "other 1 1"], "e.txt")
    table, rows = load_embeddings(path, vocab, seed=3)
    assert table.dim == 2
    assert rows[vocab.id("hello")].tolist() == [0.1, 0.2]
    _, again = load_embeddings(path, vocab, seed=3)
    assert np.array_equal(rows[vocab.id("world")], again[vocab.id("world")])
    assert np.all(rows[0] == 0.0)


def test_embeddings_dimension_error(tmp_path):
    path = _write(tmp_path, ["a 0.1 0.2", "b 0.1 0.2 0.3"], "e.txt")
    with pytest.raises(DatasetError, match="line 2"):
        load_embeddings(path, Vocabulary(["a", "b"]))


def test_embeddings_fixture_file():
    from importlib.resources import files
    path = files("attnp") / "fixtures" / "tiny_embeddings.txt"
    splits = generate_babi_like(1, (20, 2, 2), seed=0)
    vocab = build_vocab(splits[0])
    table, rows = load_embeddings(str(path), vocab)
    assert rows.shape == (len(vocab), table.dim)
    assert table.dim == 8


# ----------------------------------------------------------------- generator

@pytest.mark.parametrize("task", [1, 2, 3])
def test_generator_matches_replay_oracle(task):
    splits = generate_babi_like(task, (400, 100, 100), seed=task)
    for split in splits:
        for inst in split:
            assert PLACES[inst.label] == replay_answer(inst.p_tokens, inst.q_tokens)


@pytest.mark.parametrize("task", [1, 2, 3])
def test_generator_is_deterministic_and_small(task, tmp_path):
    a = generate_babi_like(task, (50, 10, 10), seed=9)
    b = generate_babi_like(task, (50, 10, 10), seed=9)
    assert a == b
    write_dataset(tmp_path / "a.jsonl", a[0])
    write_dataset(tmp_path / "b.jsonl", b[0])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_babi_like(task, (50, 10, 10), seed=10) != a
    vocab = build_vocab(a[0] + a[1] + a[2])
    assert len(vocab) - 2 <= 40
    assert {i.label for s in a for i in s} <= set(range(6))


def test_task1_answer_is_latest_move_of_queried_actor():
    for inst in generate_babi_like(1, (200, 1, 1), seed=4)[0]:
        actor = inst.q_tokens[2]
        text = " ".join(inst.p_tokens).split(" . ")
        last = [s for s in text if s.startswith(actor + " ")][-1]
        assert last.rstrip(" .").split()[-1] == PLACES[inst.label]


def test_generator_sizes_and_errors():
    tr, va, te = generate_babi_like(1, (7, 3, 2), seed=0)
    assert (len(tr), len(va), len(te)) == (7, 3, 2)
    with pytest.raises(ValueError):
        generate_babi_like(4)
    with pytest.raises(ValueError):
        generate_babi_like(1, (0, 1, 1))


def test_task1_statistics_mirror_babi():
    tr, _, _ = generate_babi_like(1, (2000, 1, 1), seed=0)
    vocab = build_vocab(tr)
    mean_len = np.mean([len(i.p_tokens) for i in tr])
    assert len(vocab) - 2 == 20  # 22 with the two reserved entries
    assert 30 <= mean_len <= 45
