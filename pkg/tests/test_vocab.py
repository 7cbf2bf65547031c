import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canonical_fixture import fixture_dataset
from triplab.vocab import (
    CANONICAL_INSTRUMENT_COUNTS,
    CANONICAL_IT_COUNTS,
    CANONICAL_IV_COUNTS,
    CANONICAL_VERB_COUNTS,
    AnnotationError,
    ClassIndex,
    Dataset,
    FrameAnnotation,
    Vocabulary,
    build_validity_mask,
    canonical_class_list,
    canonical_triplet_weights,
    cooccurrence_table,
    format_annotations,
    frequency_table,
    load_class_list,
    parse_annotations,
    parse_vocabulary,
    save_class_list,
    split_by_video,
    split_dataset,
)

HEAD = "video_id,frame_index,instrument,verb,target\n"
CANON = Vocabulary.canonical()


def test_canonical_sizes():
    assert CANON.shape == (6, 8, 19)
    assert CANON.verbs[0] == CANON.targets[0] == "null"


def test_vocabulary_rejects_duplicates_and_missing_null():
    with pytest.raises(ValueError):
        Vocabulary(("a", "a"), ("null",), ("null",))
    with pytest.raises(ValueError):
        Vocabulary(("a",), ("go",), ("null",))


def test_vocabulary_text_round_trip(small_vocab):
    assert parse_vocabulary(small_vocab.to_text()) == small_vocab
    assert small_vocab.digest() != CANON.digest()


def test_vocabulary_parse_errors():
    with pytest.raises(AnnotationError, match="line 1"):
        parse_vocabulary("grasper\ninstrument:\n")
    with pytest.raises(AnnotationError, match="missing"):
        parse_vocabulary("instrument:\na\nverb:\nnull\n")


def test_parse_single_line():
    ds = parse_annotations(HEAD + "vid01,452,grasper,grasp/retract,gallbladder\n", CANON)
    assert ds.annotations == (FrameAnnotation("vid01", 452, frozenset({(0, 2, 2)})),)


def test_parse_background_frame():
    ds = parse_annotations(HEAD + "vid01,10,\n", CANON)
    assert ds.annotations == (FrameAnnotation("vid01", 10, frozenset()),)


def test_duplicate_triplet_is_one_entry():
    row = "vid01,3,hook,dissect,gallbladder\n"
    ds = parse_annotations(HEAD + row + row, CANON)
    assert len(ds) == 1 and len(ds.annotations[0].triplets) == 1


@pytest.mark.parametrize("body, line", [
    ("vid01,3,hook,dissect,gallbladder\nvid01,4,spoon,dissect,liver\n", 3),
    ("vid01,x,hook,dissect,liver\n", 2),
    ("vid01,3,hook,,liver\n", 2),
])
def test_parse_errors_carry_line_numbers(body, line):
    with pytest.raises(AnnotationError) as err:
        parse_annotations(HEAD + body, CANON)
    assert err.value.line == line


def test_missing_header_rejected():
    with pytest.raises(AnnotationError, match="header"):
        parse_annotations("vid01,3,hook,dissect,liver\n", CANON)


def test_canonical_mask_has_128_of_912():
    mask = build_validity_mask(canonical_class_list(128), CANON)
    assert mask.count == 128 and mask.grid.sum() == 128
    assert mask.grid.size == 912


def test_single_triplet_mask(small_vocab):
    ds = Dataset((FrameAnnotation("v", 0, frozenset({(0, 0, 0)})),), small_vocab)
    mask = build_validity_mask(ds, small_vocab)
    assert mask.count == 1 and mask.grid[0, 0, 0]


def test_empty_mask_source_rejected(small_vocab):
    with pytest.raises(ValueError):
        build_validity_mask(Dataset((), small_vocab), small_vocab)


def test_mask_equals_set_union(small_data, small_vocab):
    ds = small_data.dataset
    union = set()
    for ann in ds:
        union |= set(ann.triplets)
    mask = build_validity_mask(ds, small_vocab)
    assert set(mask.triplets()) == union
    assert mask.count == len(union)


def test_class_ids_are_lexicographic_bijection():
    classes = ClassIndex([(2, 1, 0), (0, 3, 3), (0, 1, 5)], CANON)
    assert classes.triplets == [(0, 1, 5), (0, 3, 3), (2, 1, 0)]
    for cls in classes:
        assert classes.decode(classes.encode(cls.triplet)) == cls.triplet
    flat = classes.flat_indices()
    assert [np.unravel_index(k, CANON.shape) for k in flat] == classes.triplets


def test_class_list_round_trip(tmp_path):
    classes = canonical_class_list(20)
    save_class_list(classes, CANON, tmp_path / "c.csv")
    assert load_class_list(tmp_path / "c.csv", CANON) == classes


def test_canonical_weights_reproduce_pair_tables():
    # the grasper target row has two more instances than its verb row
    w = canonical_triplet_weights()
    assert np.allclose(w.sum(axis=2), np.array(CANONICAL_IV_COUNTS), rtol=1e-4)
    assert np.allclose(w.sum(axis=1)[:, 1:], np.array(CANONICAL_IT_COUNTS)[:, 1:], rtol=1e-4, atol=0.01)


def _tally(ds, a, b):
    sizes = dict(zip(("instrument", "verb", "target"), ds.vocab.shape))
    ax = ("instrument", "verb", "target")
    out = np.zeros((sizes[a], sizes[b]), dtype=int)
    for x in range(sizes[a]):
        for y in range(sizes[b]):
            for ann in ds:
                for trip in ann.triplets:
                    if trip[ax.index(a)] == x and trip[ax.index(b)] == y:
                        out[x, y] += 1
    return out


def test_cooccurrence_matches_hand_tally(small_data):
    ds = Dataset(small_data.dataset.annotations[:5], small_data.dataset.vocab)
    for axes in itertools.permutations(("instrument", "verb", "target"), 2):
        assert np.array_equal(cooccurrence_table(ds, axes), _tally(ds, *axes))


def test_cooccurrence_empty_dataset(small_vocab):
    table = cooccurrence_table(Dataset((), small_vocab), ("instrument", "verb"))
    assert table.shape == (3, 3) and not table.any()


def test_cooccurrence_rejects_equal_axes(small_vocab):
    with pytest.raises(ValueError):
        cooccurrence_table(Dataset((), small_vocab), ("verb", "verb"))


def test_canonical_fixture_counts():
    ds = fixture_dataset()
    iv = cooccurrence_table(ds, ("instrument", "verb"))
    assert iv[CANON.index("instrument", "grasper"), CANON.index("verb", "grasp/retract")] == 72394
    assert tuple(frequency_table(ds, "instrument")) == CANONICAL_INSTRUMENT_COUNTS
    assert tuple(frequency_table(ds, "verb")) == CANONICAL_VERB_COUNTS


def test_pair_tables_share_total(small_data):
    ds = small_data.dataset
    total = ds.triplet_instances()
    assert cooccurrence_table(ds, ("instrument", "verb")).sum() == total
    assert cooccurrence_table(ds, ("instrument", "target")).sum() == total


def test_split_40_videos():
    videos = [f"v{k:02d}" for k in range(40)]
    for seed in range(5):
        tr, va, te = split_by_video(videos, (0.625, 0.125, 0.25), seed)
        assert (len(tr), len(va), len(te)) == (25, 5, 10)
        assert sorted(tr + va + te) == videos


def test_split_three_videos():
    tr, va, te = split_by_video(["a", "b", "c"], (1 / 3, 1 / 3, 1 / 3), 0)
    assert sorted(len(x) for x in (tr, va, te)) == [1, 1, 1]


def test_split_is_deterministic():
    videos = [f"v{k}" for k in range(12)]
    assert split_by_video(videos, (0.5, 0.25, 0.25), 7) == split_by_video(videos, (0.5, 0.25, 0.25), 7)


def test_split_errors():
    with pytest.raises(ValueError, match="at least 3"):
        split_by_video(["a", "b"], (0.5, 0.25, 0.25), 0)
    with pytest.raises(ValueError):
        split_by_video(["a", "b", "c"], (0.5, 0.5, 0.5), 0)


def test_split_dataset_keeps_videos_whole(small_data):
    parts = split_dataset(small_data.dataset, (0.5, 0.25, 0.25), 0)
    seen = [set(p.videos) for p in parts]
    assert not (seen[0] & seen[1] or seen[0] & seen[2] or seen[1] & seen[2])
    assert sum(len(p) for p in parts) == len(small_data.dataset)



@st.composite
def datasets(draw):
    n = draw(st.integers(0, 12))
    anns = []
    for k in range(n):
        trips = draw(st.frozensets(st.tuples(st.integers(0, 5), st.integers(0, 7), st.integers(0, 18)),
                                   max_size=3))
        anns.append(FrameAnnotation(f"vid{k // 3}", k, trips))
    return Dataset(tuple(anns), CANON)


@settings(max_examples=100, deadline=None)
@given(datasets())
def test_save_load_round_trip(ds):
    text = format_annotations(ds)
    again = parse_annotations(text, CANON)
    assert again.annotations == ds.annotations
    assert format_annotations(again) == text
