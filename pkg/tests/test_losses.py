"""Loss functions: CE oracles, soft-paste weighting, MMD, feature alignment."""

import logging
import math

import numpy as np
import pytest

import dspseg.losses as L
from conftest import check_gradients
from dspseg.errors import ShapeError
from dspseg.losses import (
    MmdConfig,
    consistency_loss,
    feature_alignment,
    median_bandwidth,
    mmd2,
    pool_mask,
    seg_loss,
    seg_soft_loss,
)
from dspseg.paste import PasteMask
from dspseg.tensor import IGNORE_LABEL, Tensor, backward, log_softmax


@pytest.fixture(autouse=True)
def reset_warn_dedup():
    L._warned.clear()
    yield
    L._warned.clear()


def _log_probs(rng, n, c, h, w, scale=1.0):
    return log_softmax(Tensor(rng.normal(size=(n, c, h, w)) * scale), axis=1)


def _mask(support, beta):
    return PasteMask(m=np.where(np.asarray(support, dtype=bool), float(beta), 0.0), beta=beta)


# ---------------------------------------------------------------------------
# segmentation CE
# ---------------------------------------------------------------------------


def test_seg_loss_uniform_prediction_is_log_c():
    lp = log_softmax(Tensor(np.zeros((1, 8, 4, 4))), axis=1)
    labels = np.random.default_rng(0).integers(0, 8, size=(1, 4, 4)).astype(np.uint8)
    loss = seg_loss(lp, labels)
    assert abs(loss.data - math.log(8.0)) < 1e-12


def test_seg_loss_confident_correct_prediction_vanishes():
    labels = np.random.default_rng(1).integers(0, 8, size=(1, 4, 4)).astype(np.uint8)
    logits = np.zeros((1, 8, 4, 4))
    for i in range(4):
        for j in range(4):
            logits[0, labels[0, i, j], i, j] = 40.0
    loss = seg_loss(log_softmax(Tensor(logits), axis=1), labels)
    assert loss.data < 1e-9


def test_seg_loss_matches_scalar_loop_oracle():
    rng = np.random.default_rng(2)
    lp = _log_probs(rng, 2, 5, 4, 4, scale=2.0)
    labels = rng.integers(0, 5, size=(2, 4, 4)).astype(np.uint8)
    labels[0, 0, :2] = IGNORE_LABEL
    total, count = 0.0, 0
    for n in range(2):
        for i in range(4):
            for j in range(4):
                y = labels[n, i, j]
                if y == IGNORE_LABEL:
                    continue
                total += -lp.data[n, y, i, j]
                count += 1
    assert abs(seg_loss(lp, labels).data - total / count) < 1e-12


def test_seg_loss_all_ignored_is_zero_with_warning(caplog):
    lp = _log_probs(np.random.default_rng(3), 1, 3, 2, 2)
    labels = np.full((1, 2, 2), IGNORE_LABEL, dtype=np.uint8)
    with caplog.at_level(logging.WARNING):
        loss = seg_loss(lp, labels)
    assert loss.data == 0.0
    assert "ignored" in caplog.text


def test_seg_loss_warning_fires_once(caplog):
    lp = _log_probs(np.random.default_rng(3), 1, 3, 2, 2)
    labels = np.full((1, 2, 2), IGNORE_LABEL, dtype=np.uint8)
    with caplog.at_level(logging.WARNING):
        seg_loss(lp, labels)
        seg_loss(lp, labels)
    assert caplog.text.count("ignored") == 1


def test_seg_loss_shape_mismatch():
    lp = _log_probs(np.random.default_rng(4), 1, 3, 4, 4)
    with pytest.raises(ShapeError, match="seg_loss"):
        seg_loss(lp, np.zeros((1, 2, 2), dtype=np.uint8))


# ---------------------------------------------------------------------------
# soft paste losses
# ---------------------------------------------------------------------------


def test_soft_loss_zero_mask_equals_seg_loss():
    rng = np.random.default_rng(5)
    lp = _log_probs(rng, 1, 4, 4, 4)
    y_comp = rng.integers(0, 4, size=(1, 4, 4)).astype(np.uint8)
    y_s = rng.integers(0, 4, size=(1, 4, 4)).astype(np.uint8)
    mask = _mask(np.zeros((4, 4)), beta=0.0)
    got = seg_soft_loss(lp, y_comp, y_s, mask)
    assert got.data == seg_loss(lp, y_s).data


def test_soft_loss_full_hard_mask_equals_seg_on_composite():
    rng = np.random.default_rng(6)
    lp = _log_probs(rng, 1, 4, 4, 4)
    y_comp = rng.integers(0, 4, size=(1, 4, 4)).astype(np.uint8)
    y_s = rng.integers(0, 4, size=(1, 4, 4)).astype(np.uint8)
    mask = _mask(np.ones((4, 4)), beta=1.0)
    got = seg_soft_loss(lp, y_comp, y_s, mask)
    assert got.data == seg_loss(lp, y_comp).data


def test_soft_loss_single_pixel_weighted_average():
    """beta=0.8 with per-pixel CE 1.0 (composite) and 2.0 (source) gives 1.2."""
    p_comp, p_src = math.exp(-1.0), math.exp(-2.0)
    other = (1.0 - p_comp - p_src) / 2.0
    probs = np.array([p_comp, p_src, other, other]).reshape(1, 4, 1, 1)
    lp = Tensor(np.log(probs))
    y_comp = np.zeros((1, 1, 1), dtype=np.uint8)
    y_s = np.ones((1, 1, 1), dtype=np.uint8)
    got = seg_soft_loss(lp, y_comp, y_s, _mask(np.ones((1, 1)), beta=0.8))
    assert abs(got.data - 1.2) < 1e-12


def test_soft_loss_matches_scalar_loop_oracle():
    rng = np.random.default_rng(7)
    lp = _log_probs(rng, 2, 4, 4, 4, scale=1.5)
    y_comp = rng.integers(0, 4, size=(2, 4, 4)).astype(np.uint8)
    y_s = rng.integers(0, 4, size=(2, 4, 4)).astype(np.uint8)
    support = rng.random(size=(4, 4)) < 0.5
    beta = 0.6
    mask = _mask(support, beta)
    paste_sum = base_sum = 0.0
    for n in range(2):
        for i in range(4):
            for j in range(4):
                m = beta if support[i, j] else 0.0
                paste_sum += m * -lp.data[n, y_comp[n, i, j], i, j]
                base_sum += (1.0 - m) * -lp.data[n, y_s[n, i, j], i, j]
    want = paste_sum / 32 + base_sum / 32
    assert abs(seg_soft_loss(lp, y_comp, y_s, mask).data - want) < 1e-12


def test_consistency_loss_self_labels_at_zero_mask():
    rng = np.random.default_rng(8)
    lp = _log_probs(rng, 1, 5, 4, 4, scale=2.0)
    pseudo = np.argmax(lp.data, axis=1).astype(np.uint8)
    y_comp = rng.integers(0, 5, size=(1, 4, 4)).astype(np.uint8)
    got = consistency_loss(lp, y_comp, pseudo, _mask(np.zeros((4, 4)), 0.0))
    want = -np.mean(np.max(lp.data, axis=1))
    assert abs(got.data - want) < 1e-12


def test_consistency_loss_hard_mask_uses_composite_only():
    rng = np.random.default_rng(9)
    lp = _log_probs(rng, 1, 5, 4, 4)
    y_comp = rng.integers(0, 5, size=(1, 4, 4)).astype(np.uint8)
    pseudo = rng.integers(0, 5, size=(1, 4, 4)).astype(np.uint8)
    got = consistency_loss(lp, y_comp, pseudo, _mask(np.ones((4, 4)), 1.0))
    assert got.data == seg_loss(lp, y_comp).data


def test_soft_losses_are_lipschitz_in_beta():
    rng = np.random.default_rng(10)
    lp = _log_probs(rng, 1, 4, 6, 6, scale=2.0)
    y_comp = rng.integers(0, 4, size=(1, 6, 6)).astype(np.uint8)
    y_s = rng.integers(0, 4, size=(1, 6, 6)).astype(np.uint8)
    support = rng.random(size=(6, 6)) < 0.6
    max_ce = float(np.max(-lp.data))
    for b1, b2 in ((0.0, 0.3), (0.3, 0.8), (0.8, 1.0), (0.0, 1.0)):
        l1 = seg_soft_loss(lp, y_comp, y_s, _mask(support, b1)).data
        l2 = seg_soft_loss(lp, y_comp, y_s, _mask(support, b2)).data
        assert abs(l1 - l2) <= max_ce * abs(b1 - b2) + 1e-12


def test_pair_loss_shape_errors():
    lp = _log_probs(np.random.default_rng(11), 1, 4, 4, 4)
    y = np.zeros((1, 4, 4), dtype=np.uint8)
    with pytest.raises(ShapeError, match="label shapes"):
        seg_soft_loss(lp, y, np.zeros((1, 2, 2), dtype=np.uint8), _mask(np.ones((4, 4)), 0.5))
    with pytest.raises(ShapeError, match="mask"):
        seg_soft_loss(lp, y, y, _mask(np.ones((2, 2)), 0.5))


# ---------------------------------------------------------------------------
# MMD
# ---------------------------------------------------------------------------


def _mmd_oracle(a, b, bw):
    def kmat(x, y):
        d2 = ((x[:, None, :] - y[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-d2 / (2.0 * bw * bw))

    return kmat(a, a).mean() + kmat(b, b).mean() - 2.0 * kmat(a, b).mean()


def test_mmd2_identical_sets_is_zero():
    x = np.random.default_rng(12).normal(size=(6, 4))
    got = mmd2(Tensor(x), Tensor(x.copy()))
    assert abs(got.data) < 1e-10


def test_mmd2_permuted_multiset_is_zero():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(7, 3))
    got = mmd2(Tensor(x), Tensor(x[::-1].copy()))
    assert abs(got.data) < 1e-10


def test_mmd2_symmetry_is_bitwise():
    rng = np.random.default_rng(14)
    for _ in range(50):
        a = Tensor(rng.normal(size=(rng.integers(2, 9), 3)))
        b = Tensor(rng.normal(size=(rng.integers(2, 9), 3)))
        assert mmd2(a, b).data == mmd2(b, a).data


def test_mmd2_nonnegative_on_random_inputs():
    rng = np.random.default_rng(15)
    for _ in range(200):
        a = rng.normal(size=(rng.integers(1, 7), 2))
        b = a + rng.normal(scale=1e-9, size=a.shape) if rng.random() < 0.5 else rng.normal(
            size=(rng.integers(1, 7), 2)
        )
        assert mmd2(Tensor(a), Tensor(b)).data >= 0.0


def test_mmd2_three_point_sets_match_kernel_matrix_oracle():
    a = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0]])
    b = np.array([[0.5, 0.5], [-1.0, 1.0], [2.0, -0.5]])
    got = mmd2(Tensor(a), Tensor(b), MmdConfig(bandwidth=1.0))
    assert abs(got.data - _mmd_oracle(a, b, 1.0)) < 1e-12


def test_mmd2_separated_sets_are_far_apart():
    rng = np.random.default_rng(16)
    a = rng.normal(size=(8, 2))
    b = rng.normal(size=(8, 2)) + 50.0
    # the median-heuristic bandwidth adapts to the separation, so the value
    # saturates well below the kernel-range bound of 2 but stays clearly positive
    assert mmd2(Tensor(a), Tensor(b)).data > 0.1


def test_mmd2_empty_set_contributes_zero(caplog):
    with caplog.at_level(logging.WARNING):
        got = mmd2(Tensor(np.zeros((0, 3))), Tensor(np.ones((2, 3))))
    assert got.data == 0.0
    assert "empty" in caplog.text


def test_median_bandwidth_two_points():
    pts = np.array([[0.0, 0.0], [3.0, 4.0]])
    assert abs(median_bandwidth(pts, fallback=1.0) - 5.0) < 1e-12


def test_median_bandwidth_fallbacks():
    assert median_bandwidth(np.zeros((1, 3)), fallback=0.7) == 0.7
    assert median_bandwidth(np.ones((5, 3)), fallback=0.7) == 0.7  # coincident points


def test_median_bandwidth_matches_explicit_median():
    rng = np.random.default_rng(17)
    pts = rng.normal(size=(9, 4))
    dists = [
        np.linalg.norm(pts[i] - pts[j]) for i in range(9) for j in range(i + 1, 9)
    ]
    assert abs(median_bandwidth(pts, 1.0) - np.median(dists)) < 1e-12


# ---------------------------------------------------------------------------
# feature alignment
# ---------------------------------------------------------------------------


def test_pool_mask_averages_windows():
    m = np.arange(16, dtype=np.float64).reshape(4, 4)
    pooled = pool_mask(m, 2)
    assert pooled.shape == (2, 2)
    assert pooled[0, 0] == m[:2, :2].mean()
    assert pooled[1, 1] == m[2:, 2:].mean()
    with pytest.raises(ShapeError, match="pool_mask"):
        pool_mask(np.zeros((5, 4)), 2)


def test_feature_alignment_identical_maps_are_zero():
    f = Tensor(np.random.default_rng(18).normal(size=(6, 2, 2)))
    mask = _mask(np.random.default_rng(19).random(size=(8, 8)) < 0.5, beta=0.8)
    paste, globl = feature_alignment(f, Tensor(f.data.copy()), mask)
    assert paste.data == 0.0
    assert globl.data == 0.0


def test_feature_alignment_empty_support_skips_paste_term(caplog):
    rng = np.random.default_rng(20)
    f_ps = Tensor(rng.normal(size=(4, 2, 2)))
    f_pt = Tensor(rng.normal(size=(4, 2, 2)))
    mask = _mask(np.zeros((8, 8)), beta=0.8)
    with caplog.at_level(logging.WARNING):
        paste, globl = feature_alignment(f_ps, f_pt, mask)
    assert paste.data == 0.0
    assert globl.data > 0.0
    assert "support" in caplog.text


def test_feature_alignment_matches_composed_oracle():
    rng = np.random.default_rng(21)
    f_ps = rng.normal(size=(3, 2, 2))
    f_pt = rng.normal(size=(3, 2, 2))
    support = np.zeros((4, 4))
    support[0:2, 0:2] = 1.0  # pools to a single positive feature cell
    support[2, 1] = 1.0  # quarter-covered cell
    beta = 0.8
    mask = _mask(support, beta)
    cfg = MmdConfig(bandwidth=0.9)
    paste, globl = feature_alignment(Tensor(f_ps), Tensor(f_pt), mask, cfg)

    rows_ps = f_ps.reshape(3, 4).T
    rows_pt = f_pt.reshape(3, 4).T
    assert abs(globl.data - _mmd_oracle(rows_ps, rows_pt, 0.9)) < 1e-12

    pooled = pool_mask(mask.m, 2).reshape(-1)
    sel = pooled > 0
    a = rows_ps[sel] * pooled[sel][:, None]
    b = rows_pt[sel] * pooled[sel][:, None]
    assert abs(paste.data - _mmd_oracle(a, b, 0.9)) < 1e-12


def test_feature_alignment_shape_errors():
    f = Tensor(np.zeros((3, 2, 2)))
    with pytest.raises(ShapeError, match="feature_alignment"):
        feature_alignment(f, Tensor(np.zeros((3, 2, 3))), _mask(np.ones((4, 4)), 0.5))
    with pytest.raises(ShapeError, match="feature_alignment"):
        feature_alignment(f, f, _mask(np.ones((5, 4)), 0.5))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def test_grad_seg_loss():
    rng = np.random.default_rng(22)
    logits = Tensor(rng.normal(size=(1, 4, 3, 3)), requires_grad=True)
    labels = rng.integers(0, 4, size=(1, 3, 3)).astype(np.uint8)
    labels[0, 0, 0] = IGNORE_LABEL
    check_gradients(lambda: seg_loss(log_softmax(logits, axis=1), labels), (logits,))


def test_grad_soft_losses():
    rng = np.random.default_rng(23)
    logits = Tensor(rng.normal(size=(1, 4, 4, 4)), requires_grad=True)
    y_comp = rng.integers(0, 4, size=(1, 4, 4)).astype(np.uint8)
    y_s = rng.integers(0, 4, size=(1, 4, 4)).astype(np.uint8)
    mask = _mask(rng.random(size=(4, 4)) < 0.5, beta=0.7)
    check_gradients(
        lambda: seg_soft_loss(log_softmax(logits, axis=1), y_comp, y_s, mask), (logits,)
    )
    check_gradients(
        lambda: consistency_loss(log_softmax(logits, axis=1), y_comp, y_s, mask), (logits,)
    )


def test_grad_mmd2_wrapper_fixed_bandwidth():
    rng = np.random.default_rng(24)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
    check_gradients(lambda: mmd2(a, b, MmdConfig(bandwidth=1.1)), (a, b))


def test_grad_feature_alignment_both_terms():
    rng = np.random.default_rng(25)
    f_ps = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    f_pt = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    support = np.zeros((4, 4))
    support[:2, :2] = 1.0
    mask = _mask(support, beta=0.8)
    cfg = MmdConfig(bandwidth=0.9)

    def build_paste():
        return feature_alignment(f_ps, f_pt, mask, cfg)[0]

    def build_global():
        return feature_alignment(f_ps, f_pt, mask, cfg)[1]

    check_gradients(build_paste, (f_ps, f_pt))
    check_gradients(build_global, (f_ps, f_pt))


def test_loss_breakdown_row_matches_columns():
    from dspseg.losses import LOSS_CSV_COLUMNS, LossBreakdown

    br = LossBreakdown(
        seg=1.0, seg_soft=0.5, cons=0.25, paste_mmd=0.1, global_mmd=0.2, total=1.7515,
        lambda_feature=0.005,
    )
    row = br.row(iteration=7, lr=2.5e-3)
    assert len(row) == len(LOSS_CSV_COLUMNS)
    assert row[0] == "7"
    assert float(row[-2]) == 1.7515
    assert float(row[-1]) == 2.5e-3


def test_grad_backward_accumulates_to_zero_for_clamped_mmd():
    """A clamped-negative MMD must contribute zero gradient."""
    x = np.random.default_rng(26).normal(size=(3, 2))
    a = Tensor(x, requires_grad=True)
    b = Tensor(x.copy(), requires_grad=True)
    out = mmd2(a, b)
    if out.data == 0.0 and out._parents:  # clamped path multiplies by zero
        backward(out, params=(a, b))
        assert np.all(a.grad == 0.0) and np.all(b.grad == 0.0)
