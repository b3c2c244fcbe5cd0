import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posit import dataset
from posit.dataset import RawEvent, SplitSpec
from posit.exceptions import EmptyDatasetError, ParseError, SplitError

from conftest import as_matrix, random_binary


def write(tmp_path, text, name="r.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_threshold_keeps_and_drops(tmp_path):
    p = write(tmp_path, "userId,movieId,rating,timestamp\n1,10,4.0,5\n1,11,3.0,6\n2,10,3.5,7\n")
    events = dataset.ingest_csv(p, rating_threshold=3.5)
    assert [(e.user_id, e.item_id) for e in events] == [("1", "10"), ("2", "10")]
    assert events[0].rating == 4.0 and events[0].timestamp == 5


def test_rows_without_rating_are_kept(tmp_path):
    p = write(tmp_path, "a,x\nb,y\n")
    events = dataset.ingest_csv(p, rating_threshold=100)
    assert len(events) == 2 and events[0].rating is None


def test_malformed_row_names_line(tmp_path):
    p = write(tmp_path, "u,i,r\n1,2,4\n1,2,oops\n")
    with pytest.raises(ParseError, match=":3:"):
        dataset.ingest_csv(p)


def test_too_many_columns(tmp_path):
    p = write(tmp_path, "1,2,4,5,6\n")
    with pytest.raises(ParseError, match=":1:"):
        dataset.ingest_csv(p)


def test_empty_after_threshold(tmp_path):
    p = write(tmp_path, "1,2,1.0\n")
    with pytest.raises(EmptyDatasetError):
        dataset.ingest_csv(p, 3.5)


def test_build_small_matrix_by_hand():
    events = [RawEvent("u1", "a"), RawEvent("u1", "b"), RawEvent("u2", "b"),
              RawEvent("u3", "b"), RawEvent("u3", "c"), RawEvent("u2", "c")]
    m = dataset.build_matrix(events, min_user_interactions=1)
    assert (m.n_users, m.n_items) == (3, 3)
    # b (3) > c (2) > a (1)
    assert m.item_ids == ("b", "c", "a")
    assert m.user_ids == ("u1", "u2", "u3")
    np.testing.assert_array_equal(m.item_freq, [3, 2, 1])
    np.testing.assert_array_equal(m.data.toarray(), [[1, 0, 1], [1, 1, 0], [1, 1, 0]])


def test_min_user_filter_removes_user():
    events = [RawEvent("u1", "a"), RawEvent("u1", "b"), RawEvent("u2", "a")]
    m = dataset.build_matrix(events, min_user_interactions=2)
    assert m.user_ids == ("u1",)


def test_iterative_filtering_until_stable():
    # dropping u2 leaves item c with a single interaction, which then drops u3 below 2
    events = [RawEvent("u1", "a"), RawEvent("u1", "b"), RawEvent("u2", "c"),
              RawEvent("u3", "c"), RawEvent("u3", "a"), RawEvent("u4", "a"), RawEvent("u4", "b")]
    m = dataset.build_matrix(events, min_user_interactions=2, min_item_interactions=2)
    assert set(m.user_ids) == {"u1", "u4"}
    assert set(m.item_ids) == {"a", "b"}


def test_duplicates_collapse():
    events = [RawEvent("u", "a"), RawEvent("u", "a"), RawEvent("u", "b")]
    m = dataset.build_matrix(events, min_user_interactions=1)
    assert m.nnz == 2


def test_everything_filtered():
    with pytest.raises(EmptyDatasetError):
        dataset.build_matrix([RawEvent("u", "a")], min_user_interactions=2)


def test_split_sizes_and_determinism(rng):
    m = as_matrix(random_binary(rng, 100, 30, 0.3, min_per_row=5))
    spec = SplitSpec(10, 10, 0.2, seed=4)
    train, val, test = dataset.split_users(m, spec)
    assert train.n_users == 80
    assert val.n_users == 10 and test.n_users == 10
    train2, val2, test2 = dataset.split_users(m, spec)
    assert (train.data != train2.data).nnz == 0
    np.testing.assert_array_equal(val.users, val2.users)
    assert (test.heldout != test2.heldout).nnz == 0
    eval_users = set(val.users) | set(test.users)
    assert not eval_users & {int(u) for u in train.user_ids}


def test_split_partitions_each_eval_row(rng):
    m = as_matrix(random_binary(rng, 60, 25, 0.4, min_per_row=3))
    _, val, test = dataset.split_users(m, SplitSpec(15, 15, 0.3, seed=1))
    for split in (val, test):
        for r, u in enumerate(split.users):
            f = set(split.foldin[r].indices)
            h = set(split.heldout[r].indices)
            assert not f & h
            assert f | h == set(m.row(u))
            assert f and h


def test_heldout_size_rule():
    assert dataset.heldout_size(10, 0.2) == 2
    assert dataset.heldout_size(3, 0.2) == 1


def test_ten_item_user_gets_eight_and_two():
    m = as_matrix(np.ones((3, 10)))
    _, val, _ = dataset.split_users(m, SplitSpec(1, 1, 0.2, seed=0))
    assert val.foldin[0].nnz == 8 and val.heldout[0].nnz == 2


def test_split_rejects_too_few_users(rng):
    m = as_matrix(random_binary(rng, 10, 5, 0.5))
    with pytest.raises(SplitError):
        dataset.split_users(m, SplitSpec(5, 5))


def test_save_load_roundtrip_and_bytes(tmp_path, rng):
    m = as_matrix(random_binary(rng, 20, 9, 0.3))
    dataset.save_matrix(tmp_path / "a.npz", m)
    dataset.save_matrix(tmp_path / "b.npz", m)
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    back = dataset.load_matrix(tmp_path / "a.npz")
    assert (back.data != m.data).nnz == 0
    assert back.item_ids == m.item_ids and back.user_ids == m.user_ids
    assert back.content_hash() == m.content_hash()


def test_pipeline_is_reproducible(synth_dir, tmp_path):
    hashes = []
    for name in ("x.npz", "y.npz"):
        time.sleep(1.1 if name == "y.npz" else 0)
        m = dataset.build_matrix(dataset.ingest_csv(synth_dir / "ratings.csv"))
        train, _, _ = dataset.split_users(m, SplitSpec(30, 30, 0.2, seed=9))
        dataset.save_matrix(tmp_path / name, train)
        hashes.append((tmp_path / name).read_bytes())
    assert hashes[0] == hashes[1]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_item_freq_matches_rows(seed):
    rng = np.random.default_rng(seed)
    m = as_matrix(random_binary(rng, 12, 7, 0.4))
    recount = np.zeros(m.n_items, dtype=int)
    for row in m.rows():
        assert len(set(row)) == len(row)
        assert all(0 <= j < m.n_items for j in row)
        recount[row] += 1
    np.testing.assert_array_equal(recount, m.item_freq)
