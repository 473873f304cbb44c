"""Long-tail statistics and per-iteration sampling draws."""

import logging
import math

import numpy as np
import pytest

from dspseg.domains import SOURCE_STYLE, DatasetItem, SceneSpec, generate
from dspseg.errors import ConfigError, DataError
from dspseg.sampling import (
    IterationSample,
    build_index,
    compute_stats,
    draw_iteration,
    stats_table,
)


def _item(label, idx=0):
    label = np.asarray(label, dtype=np.uint8)
    image = np.zeros(label.shape + (3,), dtype=np.float32)
    return DatasetItem(f"item-{idx:03d}", "source", image, label)


def test_stats_always_present_class_has_frequency_one():
    labels = [np.zeros((4, 4), dtype=np.uint8) for _ in range(5)]
    stats = compute_stats(labels, class_count=3)
    assert stats.p[0] == 1.0
    assert stats.p[1] == 0.0 and stats.p[2] == 0.0


def test_stats_count_containment_not_area():
    a = np.zeros((4, 4), dtype=np.uint8)
    a[0, 0] = 1  # a single pixel counts the same as
    b = np.ones((4, 4), dtype=np.uint8)  # a full image
    stats = compute_stats([a, b], class_count=2)
    assert stats.p[1] == 1.0
    assert stats.p[0] == 0.5


def test_stats_match_counting_oracle():
    rng = np.random.default_rng(0)
    labels = [rng.integers(0, 6, size=(8, 8)).astype(np.uint8) for _ in range(30)]
    labels[3][:] = 0  # one degenerate image
    stats = compute_stats(labels, class_count=6)
    for c in range(6):
        count = sum(1 for lbl in labels if (lbl == c).any())
        assert stats.p[c] == count / len(labels)
        assert stats.occurrence[c].sum() == count


def test_stats_ignore_label_not_a_class():
    label = np.full((4, 4), 255, dtype=np.uint8)
    label[0, 0] = 1
    stats = compute_stats([label], class_count=3)
    assert list(stats.p) == [0.0, 1.0, 0.0]


def test_stats_error_paths():
    with pytest.raises(DataError, match="at least one"):
        compute_stats([], class_count=3)
    with pytest.raises(DataError, match="class_count"):
        compute_stats([np.full((2, 2), 7, dtype=np.uint8)], class_count=3)


def test_build_index_orders_by_frequency():
    labels = []
    rng = np.random.default_rng(1)
    for _ in range(20):
        lbl = np.zeros((4, 4), dtype=np.uint8)
        if rng.random() < 0.9:
            lbl[0, 1] = 1
        if rng.random() < 0.3:
            lbl[1, 1] = 2
        if rng.random() < 0.05:
            lbl[2, 2] = 3
        labels.append(lbl)
    stats = compute_stats(labels, class_count=4)
    index = build_index(stats, K=2)
    order = np.argsort(stats.p, kind="stable")
    assert set(index.tail_classes) == set(int(c) for c in order[:2])
    for c in index.tail_classes:
        assert index.D[c] == tuple(int(j) for j in np.flatnonzero(stats.occurrence[c]))


def test_build_index_breaks_ties_by_smaller_id():
    stats = compute_stats([np.zeros((2, 2), dtype=np.uint8)], class_count=4)
    # classes 1..3 all have frequency zero; the tie resolves to smaller ids
    index = build_index(stats, K=2)
    assert index.tail_classes == (1, 2)
    all_equal = compute_stats(
        [np.arange(4, dtype=np.uint8).reshape(2, 2)], class_count=4
    )
    assert build_index(all_equal, K=2).tail_classes == (0, 1)


def test_build_index_on_toy_benchmark_finds_rare_shapes():
    items = generate(SceneSpec(), SOURCE_STYLE, 250, seed=0)
    stats = compute_stats([it.label for it in items])
    index = build_index(stats, K=3)
    assert set(index.tail_classes) == {5, 6, 7}
    # D lists must enumerate exactly the images containing the class
    for c in index.tail_classes:
        want = tuple(j for j, it in enumerate(items) if (it.label == c).any())
        assert index.D[c] == want


def test_build_index_validates_K():
    stats = compute_stats([np.zeros((2, 2), dtype=np.uint8)], class_count=4)
    with pytest.raises(ConfigError, match="K"):
        build_index(stats, K=0)
    with pytest.raises(ConfigError, match="K"):
        build_index(stats, K=4)


def _tiny_source():
    items = [
        _item([[0, 0], [0, 1]], 0),  # classes {0,1}
        _item([[0, 2], [3, 1]], 1),  # classes {0,1,2,3}
        _item([[2, 2], [2, 2]], 2),  # classes {2}
        _item([[0, 3], [3, 3]], 3),  # classes {0,3}
    ]
    stats = compute_stats([it.label for it in items], class_count=4)
    return items, build_index(stats, K=2)


def test_draw_iteration_fields_are_consistent():
    items, index = _tiny_source()
    rng = np.random.default_rng(2)
    for _ in range(20):
        s = draw_iteration(index, items, k=2, rng=rng)
        assert isinstance(s, IterationSample)
        template = items[s.template_index]
        assert np.array_equal(s.template_label, template.label)
        present = set(np.unique(template.label).tolist())
        assert set(s.chosen_classes) <= present
        assert len(s.chosen_classes) == max(1, math.ceil(len(present) / 2))
        assert len(s.tail_classes) == 2
        for c, j, lbl in zip(s.tail_classes, s.tail_indices, s.tail_labels):
            assert c in index.tail_classes
            assert j in index.D[c]
            assert (lbl == c).any()


def test_draw_iteration_k_zero_pastes_nothing():
    items, index = _tiny_source()
    s = draw_iteration(index, items, k=0, rng=np.random.default_rng(3))
    assert s.tail_classes == ()
    assert s.tail_indices == ()


def test_draw_iteration_skips_empty_class_with_warning(caplog):
    items, index = _tiny_source()
    hollow = {c: (index.D[c] if c == index.tail_classes[0] else ()) for c in index.D}
    index = type(index)(K=index.K, tail_classes=index.tail_classes, D=hollow)
    with caplog.at_level(logging.WARNING):
        s = draw_iteration(index, items, k=2, rng=np.random.default_rng(4))
    assert len(s.tail_classes) == 1
    assert "tail classes" in caplog.text


def test_draw_iteration_template_frequencies_are_uniform():
    items, index = _tiny_source()
    rng = np.random.default_rng(5)
    counts = np.zeros(len(items))
    n = 8000
    for _ in range(n):
        counts[draw_iteration(index, items, k=0, rng=rng).template_index] += 1
    p = 1.0 / len(items)
    sigma = math.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) < 3 * sigma)


def test_draw_iteration_tail_frequencies_within_three_sigma():
    """Each tail class should be selected with probability k/K over many draws."""
    items, index = _tiny_source()
    assert index.K == 2
    rng = np.random.default_rng(6)
    n = 10_000
    k = 1
    counts = {c: 0 for c in index.tail_classes}
    for _ in range(n):
        s = draw_iteration(index, items, k=k, rng=rng)
        for c in s.tail_classes:
            counts[c] += 1
    p = k / index.K
    sigma = math.sqrt(n * p * (1 - p))
    for c, cnt in counts.items():
        assert abs(cnt - n * p) < 3 * sigma, f"class {c}: {cnt} vs {n * p:.0f}"


def test_draw_iteration_error_paths():
    items, index = _tiny_source()
    with pytest.raises(DataError, match="empty"):
        draw_iteration(index, [], k=1, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError, match="exceeds"):
        draw_iteration(index, items, k=3, rng=np.random.default_rng(0))
    unlabeled = [DatasetItem("x", "source", items[0].image, None)]
    with pytest.raises(DataError, match="label"):
        draw_iteration(index, unlabeled, k=0, rng=np.random.default_rng(0))


def test_stats_table_lists_all_classes():
    items, index = _tiny_source()
    stats = compute_stats([it.label for it in items], class_count=4)
    text = stats_table(stats, index, names=("a", "b", "c", "d"))
    lines = text.splitlines()
    assert len(lines) == 5
    assert "yes" in text and "no" in text
