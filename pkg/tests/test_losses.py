import numpy as np
import pytest

from codistill.errors import ContractError, DimensionError, RegistryError
from codistill.losses import (
    ShareStrategy,
    build_share_mask,
    cosine_loss,
    distillation_loss,
    smooth_l1_loss,
    teacher_drop,
    token_loss,
    token_terms,
)
from codistill.tensor import Tape, Tensor
from codistill.vit import TokenSet


def ts(a, grid=(2, 2)):
    return TokenSet(Tensor(np.asarray(a, dtype=float)), grid)


def test_cosine_of_zero_vector_is_one():
    assert cosine_loss(np.zeros(4), np.ones(4)).item() == 1.0


def test_cosine_shape_mismatch():
    with pytest.raises(DimensionError):
        cosine_loss(np.ones(3), np.ones(4))


def test_smooth_l1_hand_values():
    assert smooth_l1_loss(np.array([0.5]), np.zeros(1)).item() == 0.125
    assert smooth_l1_loss(np.array([2.0]), np.zeros(1)).item() == 1.5
    assert smooth_l1_loss(np.array([0.5, -2.0]), np.zeros(2)).item() == 0.8125


def test_token_loss_is_per_sample_mean_over_all_tokens():
    rng = np.random.default_rng(0)
    s, t = rng.standard_normal((3, 5, 6)), rng.standard_normal((3, 5, 6))
    got = token_loss(ts(s), ts(t)).data
    cos = 1 - (s * t).sum(-1) / (np.linalg.norm(s, axis=-1) * np.linalg.norm(t, axis=-1))
    d = np.abs(s - t)
    hub = np.where(d < 1, 0.5 * d * d, d - 0.5).mean(-1)
    np.testing.assert_allclose(got, (cos + hub).mean(-1), rtol=1e-12)


def test_token_terms_need_aligned_grids():
    with pytest.raises(ContractError, match="align_token_grid"):
        token_terms(ts(np.ones((1, 5, 3))), ts(np.ones((1, 10, 3)), (3, 3)))
    with pytest.raises(DimensionError):
        token_terms(ts(np.ones((1, 5, 3))), ts(np.ones((1, 5, 4))))


def test_mask_strategies_small_example():
    groups = [["a"], ["b", "g"], ["c"]]
    ids = ["a", "b", "c", "g"]
    none = build_share_mask(ids, groups, "none", ["g"])
    gen = build_share_mask(ids, groups, "generic", ["g"])
    full = build_share_mask(ids, groups, "full", ["g"])
    np.testing.assert_array_equal(none, [[1, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 0]])
    np.testing.assert_array_equal(gen, [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]])
    assert full.all()


def test_mask_rejects_unknown_dataset():
    with pytest.raises(RegistryError):
        build_share_mask(["zz"], [["a"]], "full")


def test_share_parse_aliases():
    assert ShareStrategy.parse("NoSharing") is ShareStrategy.NONE
    assert ShareStrategy.parse("full_sharing") is ShareStrategy.FULL
    with pytest.raises(ContractError):
        ShareStrategy.parse("half")


def test_teacher_drop_keeps_max_and_consumes_n_uniforms():
    rng = np.random.default_rng(1)
    for _ in range(200):
        keep = teacher_drop([0.1, 5.0, 0.3], 0.01, rng)
        assert keep[1]
    a, b = np.random.default_rng(4), np.random.default_rng(4)
    teacher_drop([1, 2, 3], 0.5, a)
    b.random(3)
    assert a.random() == b.random()
    with pytest.raises(ContractError):
        teacher_drop([1.0], 0.0, rng)


def test_distillation_loss_masks_and_drops():
    rng = np.random.default_rng(2)
    s = [ts(rng.standard_normal((3, 5, 4))) for _ in range(2)]
    t = [ts(rng.standard_normal((3, 5, 4))) for _ in range(2)]
    mask = np.array([[1, 0], [1, 1], [0, 0]], dtype=bool)
    rep = distillation_loss(s, t, mask, [True, True], ["x", "y"])
    l0 = token_loss(s[0], t[0]).data[:2].mean()
    l1 = token_loss(s[1], t[1]).data[1]
    assert rep.active == [2, 1]
    assert rep.total == pytest.approx(l0 + l1, rel=1e-14)
    dropped = distillation_loss(s, t, mask, [True, False], ["x", "y"])
    assert dropped.total == pytest.approx(l0, rel=1e-14)
    assert set(rep.as_row()) == {"total", "x_cos", "x_sl1", "x_active", "y_cos", "y_sl1", "y_active"}


def test_gradient_only_reaches_active_rows():
    rng = np.random.default_rng(3)
    s_arr = Tensor(rng.standard_normal((3, 5, 4)), requires_grad=True)
    t = ts(rng.standard_normal((3, 5, 4)))
    mask = np.array([[True], [False], [True]])
    with Tape() as tape:
        rep = distillation_loss([TokenSet(s_arr, (2, 2))], [t], mask)
        tape.backward(rep.loss)
    assert np.all(s_arr.grad[1] == 0) and np.any(s_arr.grad[0] != 0)
