import numpy as np
import pytest

from emma.tasks import EOS, N_SPECIAL, SyntheticTask, read_lexicon, read_split, write_lexicon, write_split


def small(kind, **kw):
    return SyntheticTask(kind=kind, train_size=50, valid_size=10, test_size=10, **kw)


def test_copy_targets_equal_sources():
    for src, tgt in small("copy").splits()["train"]:
        assert src == tgt


def test_lexicon_map_is_a_token_permutation():
    task = small("lexicon-map")
    table = task.lexicon()
    assert sorted(table[N_SPECIAL:]) == list(range(N_SPECIAL, task.vocab))
    for src, tgt in task.splits()["test"]:
        assert tgt == [int(table[s]) for s in src]
        assert task.min_len <= len(src) <= task.max_len
        assert EOS not in src


def test_local_shuffle_only_swaps_neighbours():
    task = small("local-shuffle-map", swap_rate=0.5)
    table = task.lexicon()
    swapped = 0
    for src, tgt in task.splits()["train"]:
        mapped = [int(table[s]) for s in src]
        assert sorted(mapped) == sorted(tgt)
        k = 0
        while k < len(tgt):
            if tgt[k] == mapped[k]:
                k += 1
            else:
                assert tgt[k] == mapped[k + 1] and tgt[k + 1] == mapped[k]
                swapped += 1
                k += 2
    assert swapped > 0


def test_splits_are_deterministic():
    assert small("lexicon-map").splits() == small("lexicon-map").splits()
    assert small("lexicon-map", seed=1).splits() != small("lexicon-map").splits()


def test_split_sizes_are_independent():
    a = SyntheticTask(train_size=10, test_size=5).splits()
    b = SyntheticTask(train_size=20, test_size=5).splits()
    assert a["test"] == b["test"]


def test_round_trip_files(tmp_path):
    task = small("lexicon-map")
    train = task.splits()["train"]
    write_split(tmp_path / "train.tsv", train)
    assert read_split(tmp_path / "train.tsv") == train
    write_lexicon(tmp_path / "lexicon.tsv", task.lexicon())
    mapping = read_lexicon(tmp_path / "lexicon.tsv")
    for src, tgt in train:
        assert [mapping[s] for s in src] == tgt


def test_malformed_split_reports_line(tmp_path):
    (tmp_path / "bad.tsv").write_text("1 2\t3 4\noops\n")
    with pytest.raises(ValueError, match="bad.tsv:2"):
        read_split(tmp_path / "bad.tsv")


def test_rejects_bad_parameters():
    with pytest.raises(ValueError):
        SyntheticTask(kind="reverse")
    with pytest.raises(ValueError):
        SyntheticTask(min_len=10, max_len=5)
    with pytest.raises(ValueError):
        SyntheticTask(vocab=3)


def test_train_sources_cover_vocabulary():
    counts = np.zeros(64)
    for src, _ in SyntheticTask(train_size=500).splits()["train"]:
        np.add.at(counts, src, 1)
    assert np.all(counts[N_SPECIAL:] > 0)
    assert np.all(counts[:N_SPECIAL] == 0)
