import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnmi.analysis import mutual_information
from attnmi.data import (PAD_ID, UNK_ID, Example, Vocabulary, analytic_distractor_mi, batches, binary_entropy,
                         export_split, generate_distractor_task, generate_planted_token, generate_symmetric_task,
                         load_jsonl, load_split_dir, make_batch, make_dataset, split_indices)
from attnmi.errors import ConfigurationError, IngestionError


def write_lines(path, rows):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in rows) + "\n")
    return path


def all_examples(ds):
    return ds.train + ds.validation + ds.test


def test_two_line_file_counts(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [{"text": "a b", "label": 0}, {"text": "b c", "label": 1}])
    ds = load_jsonl(p)
    counts = ds.class_counts()
    assert sum(sum(v) for v in counts.values()) == 2


def test_unseen_word_maps_to_unk(tmp_path):
    rows = [{"text": "Good movie good", "label": 1}, {"text": "bad MOVIE bad", "label": 0}] * 10
    rows.append({"text": "zebra good", "label": 1})
    ds = load_jsonl(write_lines(tmp_path / "d.jsonl", rows), seed=1)
    vocab = ds.vocabulary
    assert "good" in vocab and "movie" in vocab
    assert "Good" not in vocab
    assert vocab.encode(["zebra"]) == [UNK_ID]
    for e in all_examples(ds):
        assert PAD_ID not in e.tokens


def test_min_frequency_two(tmp_path):
    rows = [{"text": "common rare%d" % i, "label": i % 2} for i in range(40)]
    ds = load_jsonl(write_lines(tmp_path / "d.jsonl", rows))
    assert "common" in ds.vocabulary
    assert not any(f"rare{i}" in ds.vocabulary for i in range(40))


def test_vocabulary_from_train_split_only(tmp_path):
    rows = [{"text": "x y", "label": i % 2} for i in range(30)]
    rows += [{"text": "only%d only%d" % (i, i), "label": 0} for i in range(10)]
    ds = load_jsonl(write_lines(tmp_path / "d.jsonl", rows), seed=3)
    train_words = set()
    for e in ds.train:
        train_words.update(ds.vocabulary.itos[t] for t in e.tokens)
    for e in ds.test:
        for t in e.tokens:
            if t != UNK_ID:
                assert ds.vocabulary.itos[t] in train_words


def test_reload_same_seed_identical(tmp_path):
    rows = [{"tokens": ["w%d" % (i % 7), "w%d" % (i % 5)], "label": i % 2, "query": "w1"} for i in range(50)]
    p = write_lines(tmp_path / "d.jsonl", rows)
    a, b = load_jsonl(p, seed=4), load_jsonl(p, seed=4)
    assert [e.to_dict() for e in all_examples(a)] == [e.to_dict() for e in all_examples(b)]
    assert a.vocabulary.itos == b.vocabulary.itos


def test_malformed_line_reports_line_number(tmp_path):
    p = write_lines(tmp_path / "d.jsonl", [{"text": "a", "label": 0}, "{not json", {"text": "b", "label": 1}])
    with pytest.raises(IngestionError, match=":2:"):
        load_jsonl(p)
    p = write_lines(tmp_path / "e.jsonl", [{"text": "a", "label": 0}, {"text": "b"}])
    with pytest.raises(IngestionError, match=":2:"):
        load_jsonl(p)


def test_empty_dataset(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("\n")
    with pytest.raises(IngestionError):
        load_jsonl(p)


def test_vocabulary_ids_stable_and_bijective():
    sents = [["b", "a", "a"], ["c", "b", "a"], ["c", "d"]]
    v1 = Vocabulary.build(sents, min_freq=1)
    v2 = Vocabulary.build(list(reversed(sents)), min_freq=1)
    assert v1.itos == v2.itos
    assert v1.itos[:2] == ["<pad>", "<unk>"] or (v1.stoi[v1.itos[0]] == 0 and v1.stoi[v1.itos[1]] == 1)
    assert len(set(v1.stoi.values())) == len(v1.stoi)


@pytest.mark.parametrize("n", [100, 1000, 4321])
def test_split_fractions(n):
    tr, va, te = split_indices(n, np.random.default_rng(0))
    assert abs(len(tr) / n - 0.8) <= 0.01 and abs(len(va) / n - 0.1) <= 0.01 and abs(len(te) / n - 0.1) <= 0.01
    assert len(set(tr) | set(va) | set(te)) == n


def test_planted_token_construction():
    ds = generate_planted_token(1000, 10, 40, seed=0)
    signal = {t for row in ds.meta["signal_tokens"] for t in row}
    cls_of = {t: c for c, row in enumerate(ds.meta["signal_tokens"]) for t in row}
    for split in ("train", "validation", "test"):
        for e, pos in zip(getattr(ds, split), ds.meta["signal_positions"][split]):
            planted = [t for t in e.tokens if t in signal]
            assert len(planted) == 1 and e.tokens[pos] == planted[0]
            assert cls_of[planted[0]] == e.label  # Bayes classifier is exact
            assert len(e.tokens) == 10 and min(e.tokens) >= 2 and max(e.tokens) < 40
    # label is a deterministic function of the signal class: MI = H(label) = 1 bit when balanced
    ex = all_examples(ds)
    labels = [e.label for e in ex]
    signal_class = [cls_of[next(t for t in e.tokens if t in signal)] for e in ex]
    assert mutual_information(signal_class, labels) == pytest.approx(binary_entropy(np.mean(labels)), abs=1e-12)


@pytest.mark.parametrize("kw", [dict(n=19, T=10, vocab_size=40), dict(n=100, T=2, vocab_size=40),
                                dict(n=100, T=10, vocab_size=9)])
def test_planted_token_rejects(kw):
    with pytest.raises(ConfigurationError):
        generate_planted_token(**kw)


def test_distractor_noise_zero_matches_planted():
    a = generate_distractor_task(500, 8, 30, 0.0, seed=5)
    b = generate_planted_token(500, 8, 30, seed=5)
    assert [e.to_dict() for e in all_examples(a)] == [e.to_dict() for e in all_examples(b)]


def test_distractor_noise_half_independent():
    assert analytic_distractor_mi(0.5) == 0.0
    ds = generate_distractor_task(20000, 5, 20, 0.5, seed=0)
    cls = np.concatenate([ds.meta["signal_classes"][s] for s in ("train", "validation", "test")])
    labels = [e.label for e in all_examples(ds)]
    assert mutual_information(cls, labels) < 0.01


def test_distractor_noise_011_estimated_mi():
    assert analytic_distractor_mi(0.11) == pytest.approx(0.5, abs=0.001)
    ds = generate_distractor_task(10000, 5, 20, 0.11, seed=0)
    cls = np.concatenate([ds.meta["signal_classes"][s] for s in ("train", "validation", "test")])
    labels = [e.label for e in all_examples(ds)]
    assert abs(mutual_information(cls, labels) - analytic_distractor_mi(0.11)) <= 0.05


@pytest.mark.parametrize("noise", [-0.1, 0.51])
def test_distractor_noise_range(noise):
    with pytest.raises(ConfigurationError):
        generate_distractor_task(100, 5, 20, noise)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.11, 0.3, 0.5]), st.integers(1000, 3000))
def test_distractor_label_balance(seed, noise, n):
    ds = generate_distractor_task(n, 5, 20, noise, seed=seed)
    assert abs(np.mean([e.label for e in all_examples(ds)]) - 0.5) <= 0.02


def test_generators_reproducible():
    for spec in ({"generator": "planted_token", "params": {"n": 200, "T": 6, "vocab_size": 20}, "seed": 3},
                 {"generator": "distractor", "params": {"n": 200, "T": 6, "vocab_size": 20, "noise_rate": 0.2},
                  "seed": 3},
                 {"generator": "symmetric", "params": {"n": 200, "T": 6, "vocab_size": 20}, "seed": 3}):
        a, b = make_dataset(spec), make_dataset(spec)
        assert [e.to_dict() for e in all_examples(a)] == [e.to_dict() for e in all_examples(b)]
    with pytest.raises(ConfigurationError):
        make_dataset({"generator": "nope"})


def test_symmetric_task_repeats_one_token():
    ds = generate_symmetric_task(100, 6, 20, seed=0)
    assert all(len(set(e.tokens)) == 1 and len(e.tokens) == 6 for e in all_examples(ds))


def test_export_and_reload(tmp_path):
    ds = generate_planted_token(300, 6, 20, seed=2, num_classes=3)
    export_split(ds, tmp_path / "d")
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert manifest["seed"] == 2 and manifest["sizes"] == ds.sizes() and manifest["class_counts"] == ds.class_counts()
    back = load_split_dir(tmp_path / "d")
    assert [e.to_dict() for e in all_examples(back)] == [e.to_dict() for e in all_examples(ds)]
    assert back.vocab_size == 20 and back.num_classes == 3
    # the exported JSONL also loads through the generic reader (integer tokens are used as ids)
    flat = load_jsonl(tmp_path / "d" / "train.jsonl")
    assert sum(flat.sizes().values()) == len(ds.train)


def test_batch_padding():
    b = make_batch([Example([5, 6, 7], 0), Example([1, 2, 3, 4, 5], 1)])
    assert b.tokens.shape == (2, 5)
    assert list(b.tokens[0, 3:]) == [PAD_ID, PAD_ID]
    assert b.mask.sum() == 8
    assert b.labels.tolist() == [0, 1]


def test_shuffled_batches_reproducible():
    ex = [Example([i + 2], i % 2) for i in range(50)]
    a = [b.indices.tolist() for b in batches(ex, 8, np.random.default_rng(1))]
    b = [b.indices.tolist() for b in batches(ex, 8, np.random.default_rng(1))]
    assert a == b and sorted(sum(a, [])) == list(range(50))
    with pytest.raises(ConfigurationError):
        list(batches(ex, 0))


def test_generator_split_fractions():
    ds = generate_planted_token(1000, 6, 20, seed=0, fractions=[0.4, 0.1, 0.5])
    assert ds.sizes() == {"train": 400, "validation": 100, "test": 500}
    assert make_dataset({"generator": "distractor", "params": {"n": 200, "T": 5, "vocab_size": 20, "noise_rate": 0.1,
                                                               "fractions": [0.5, 0.25, 0.25]}}).sizes()["test"] == 50
    with pytest.raises(ConfigurationError):
        generate_symmetric_task(100, 4, 20, fractions=(0.5, 0.5, 0.5))
