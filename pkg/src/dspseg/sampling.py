"""Class-frequency statistics and long-tail-first template selection.

Frequencies count image-level containment, not pixel area: p_c is the share
of labeled source images in which class c occupies at least one pixel.  The
K least frequent classes form the long-tail set; each training iteration
pastes content for k of them, drawn from the per-class occurrence lists.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domains import CLASS_COUNT, CLASS_NAMES, IGNORE_LABEL, DatasetItem
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClassStats:
    p: np.ndarray  # (C,) containment frequency per class
    n_images: int
    occurrence: np.ndarray  # (C, N) bool, class i present in image j


@dataclass(frozen=True)
class LongTailIndex:
    K: int
    tail_classes: tuple[int, ...]
    D: dict[int, tuple[int, ...]]  # tail class -> indices of source items containing it


@dataclass
class IterationSample:
    template_index: int
    template_image: np.ndarray
    template_label: np.ndarray
    chosen_classes: tuple[int, ...]  # ceil(present/2) classes from the template
    tail_classes: tuple[int, ...]
    tail_indices: tuple[int, ...]
    tail_images: tuple[np.ndarray, ...]
    tail_labels: tuple[np.ndarray, ...]


def compute_stats(labels: Sequence[np.ndarray], class_count: int = CLASS_COUNT) -> ClassStats:
    if len(labels) == 0:
        raise DataError("compute_stats: need at least one labeled source item")
    occurrence = np.zeros((class_count, len(labels)), dtype=bool)
    for j, label in enumerate(labels):
        present = np.unique(label)
        present = present[present != IGNORE_LABEL]
        if present.size and present.max() >= class_count:
            raise DataError(
                f"compute_stats: item {j} has label {int(present.max())} >= class_count {class_count}"
            )
        occurrence[present, j] = True
    p = occurrence.sum(axis=1) / len(labels)
    return ClassStats(p=p, n_images=len(labels), occurrence=occurrence)


def build_index(stats: ClassStats, K: int) -> LongTailIndex:
    class_count = stats.p.shape[0]
    if not 1 <= K < class_count:
        raise ConfigError(f"build_index: K must satisfy 1 <= K < {class_count}, got {K}")
    # smallest frequency first, ties by smaller class id
    order = np.lexsort((np.arange(class_count), stats.p))
    tail = tuple(int(c) for c in order[:K])
    D = {c: tuple(int(j) for j in np.flatnonzero(stats.occurrence[c])) for c in tail}
    return LongTailIndex(K=K, tail_classes=tail, D=D)


def draw_iteration(
    index: LongTailIndex,
    source: Sequence[DatasetItem],
    k: int,
    rng: np.random.Generator,
) -> IterationSample:
    """One template draw plus one source item per selected tail class.

    Tail classes are drawn without replacement; a class with no occurrences
    is skipped in favor of the next candidate, and the draw proceeds with
    fewer than k classes only when the whole tail set is exhausted.
    """
    if not source:
        raise DataError("draw_iteration: source split is empty")
    if k > index.K:
        raise ConfigError(f"draw_iteration: k={k} exceeds K={index.K}")

    template_index = int(rng.integers(len(source)))
    template = source[template_index]
    if template.label is None:
        raise DataError(f"draw_iteration: source item {template.item_id} has no label")
    present = np.unique(template.label)
    present = present[present != IGNORE_LABEL]
    if present.size == 0:
        raise DataError(f"draw_iteration: source item {template.item_id} is fully ignored")
    n_choose = max(1, math.ceil(present.size / 2))
    chosen = tuple(sorted(int(c) for c in rng.choice(present, size=n_choose, replace=False)))

    picked_classes: list[int] = []
    picked_indices: list[int] = []
    for c in rng.permutation(np.asarray(index.tail_classes)):
        if len(picked_classes) == k:
            break
        pool = index.D[int(c)]
        if not pool:
            continue
        picked_classes.append(int(c))
        picked_indices.append(pool[int(rng.integers(len(pool)))])
    if len(picked_classes) < k:
        log.warning(
            "draw_iteration: only %d of %d tail classes have source items", len(picked_classes), k
        )

    tail_items = [source[j] for j in picked_indices]
    return IterationSample(
        template_index=template_index,
        template_image=template.image,
        template_label=template.label,
        chosen_classes=chosen,
        tail_classes=tuple(picked_classes),
        tail_indices=tuple(picked_indices),
        tail_images=tuple(it.image for it in tail_items),
        tail_labels=tuple(it.label for it in tail_items),
    )


def stats_table(stats: ClassStats, index: LongTailIndex, names: Sequence[str] = CLASS_NAMES) -> str:
    lines = [f"{'class':>5}  {'name':<12} {'frequency':>10}  tail"]
    for c in range(stats.p.shape[0]):
        name = names[c] if c < len(names) else f"class{c}"
        flag = "yes" if c in index.tail_classes else "no"
        lines.append(f"{c:>5}  {name:<12} {stats.p[c]:>10.6f}  {flag}")
    return "\n".join(lines)
