import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tgcfa.alignhead import (
    FeatureGrid,
    FeatureLevelMask,
    ProjectionHead,
    alignment_loss,
    cosine_similarity,
    derive_feature_masks,
    negative_alignment_loss,
    positive_alignment_loss,
    positive_negative_sets,
    project_features,
)
from tgcfa.errors import DegenerateVectorError, ValidationError


def random_instance(rng, p=None, n=None, k=None, batch=None):
    p = p or int(rng.integers(1, 17))
    n = n or int(rng.integers(2, 6))
    k = k or int(rng.integers(2, 9))
    shape = (p, k) if batch is None else (batch, p, k)
    feats = rng.standard_normal(shape)
    text = rng.standard_normal((n, k))
    pres = rng.random(shape[:-1] + (n,)) < 0.4
    return feats, text, pres


def mask_of(pres, h=None, w=1):
    pres = torch.as_tensor(pres)
    return FeatureLevelMask(pres, h or pres.shape[-2], w)


# ---------------------------------------------------------------- masks


def test_mask_example_top_left_patch():
    labels = np.zeros((4, 4), int)
    labels[:2, :2] = 1
    mask = derive_feature_masks(labels, (2, 2), 2)
    assert mask.presence.tolist() == [[False, True], [True, False], [True, False], [True, False]]


def test_mask_uniform_map():
    mask = derive_feature_masks(np.zeros((7, 5), int), (3, 2), 4)
    assert (mask.presence[:, 0]).all() and not mask.presence[:, 1:].any()


def test_mask_identity_pooling():
    labels = np.random.default_rng(0).integers(0, 3, (5, 6))
    mask = derive_feature_masks(labels, (5, 6), 3)
    expect = np.eye(3, dtype=bool)[labels.ravel()]
    assert np.array_equal(mask.presence.numpy(), expect)


@pytest.mark.parametrize("H,W,hf,wf", [(8, 8, 2, 2), (7, 5, 3, 2), (9, 10, 4, 3), (6, 6, 6, 1)])
def test_mask_matches_pixel_scan(H, W, hf, wf):
    rng = np.random.default_rng(H * 100 + W)
    labels = rng.integers(0, 4, (H, W))
    mask = derive_feature_masks(labels, (hf, wf), 4)
    assert mask.presence.tolist() == oracles.mask_presence(labels.tolist(), hf, wf, 4)


def test_mask_batched_equals_per_image():
    labels = np.random.default_rng(1).integers(0, 3, (4, 10, 10))
    batched = derive_feature_masks(labels, (3, 3), 3).presence
    for b in range(4):
        assert torch.equal(batched[b], derive_feature_masks(labels[b], (3, 3), 3).presence)


def test_mask_errors():
    with pytest.raises(ValidationError):
        derive_feature_masks(np.full((4, 4), 3), (2, 2), 3)
    with pytest.raises(ValidationError):
        derive_feature_masks(np.zeros((4, 4), int), (5, 2), 3)


def test_positive_negative_sets():
    mask = mask_of([[True, False, True], [True, True, True], [False, True, False]])
    assert positive_negative_sets(mask, 0) == ({0, 2}, {1})
    assert positive_negative_sets(mask, 1) == ({0, 1, 2}, set())
    pos, neg = positive_negative_sets(mask, 2)
    assert len(pos) == 1 and len(neg) == 2
    with pytest.raises(IndexError):
        positive_negative_sets(mask, 3)


# ---------------------------------------------------------------- projection


def test_identity_projection():
    head = ProjectionHead(3, 3)
    with torch.no_grad():
        head.weight.copy_(torch.eye(3))
    x = torch.randn(4, 3)
    out = project_features(FeatureGrid(x, 2, 2), head)
    assert torch.equal(out.features, x)
    assert (out.height, out.width) == (2, 2)


def test_zero_weight_projection_gives_bias():
    head = ProjectionHead(3, 2)
    with torch.no_grad():
        head.weight.zero_()
        head.bias.copy_(torch.tensor([0.5, -1.0]))
    out = project_features(FeatureGrid(torch.randn(4, 3), 4, 1), head)
    assert torch.equal(out.features, torch.tensor([[0.5, -1.0]] * 4))


def test_projection_matches_matmul():
    gen = torch.Generator().manual_seed(3)
    head = ProjectionHead(3, 2, generator=gen)
    with torch.no_grad():
        head.bias.copy_(torch.tensor([0.1, 0.2]))
    x = torch.randn(4, 3, generator=gen)
    out = project_features(FeatureGrid(x, 2, 2), head).features.detach().numpy()
    W, b, X = head.weight.detach().numpy(), head.bias.detach().numpy(), x.numpy()
    expect = [[sum(W[r, c] * X[j, c] for c in range(3)) + b[r] for r in range(2)] for j in range(4)]
    np.testing.assert_allclose(out, expect, rtol=1e-6)


def test_projection_init_range_and_shape_check():
    head = ProjectionHead(16, 4)
    assert head.weight.abs().max() <= 0.25 and torch.equal(head.bias, torch.zeros(4))
    with pytest.raises(ValidationError):
        project_features(FeatureGrid(torch.randn(4, 8), 2, 2), head)


# ---------------------------------------------------------------- cosine


def test_cosine_examples():
    assert cosine_similarity([1, 0], [1, 0]) == 1.0
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [-1, 0]) == -1.0
    with pytest.raises(DegenerateVectorError):
        cosine_similarity([0, 0], [1, 0])


# ---------------------------------------------------------------- losses


def test_perfect_alignment_is_zero():
    text = torch.eye(3)
    labels = torch.tensor([0, 2, 1, 1])
    pres = torch.nn.functional.one_hot(labels, 3).bool()
    out = alignment_loss(text[labels] * 2.5, text, mask_of(pres), margin=1.0)
    assert (float(out.l_pos), float(out.l_neg), float(out.l_align)) == (0.0, 0.0, 0.0)


def test_orthogonal_single_positive_is_one():
    l_pos = positive_alignment_loss(torch.tensor([[1.0, 0.0]]), torch.tensor([[0.0, 1.0]]), mask_of([[True]]))
    assert float(l_pos) == pytest.approx(1.0)


def test_negative_examples():
    feat = torch.tensor([[1.0, 0.0]])
    text = torch.tensor([[1.0, 0.0], [0.0, 1.0]])
    # label 1 is the single negative
    mask = mask_of([[True, False]])
    assert float(negative_alignment_loss(feat, text, mask, margin=0.0)) == 0.0
    parallel = torch.tensor([[0.0, 3.0]])
    assert float(negative_alignment_loss(parallel, text, mask, margin=0.0)) == pytest.approx(1.0)


def test_literal_margin_is_null():
    rng = np.random.default_rng(11)
    for _ in range(20):
        f, t, pr = random_instance(rng)
        assert float(negative_alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pr), margin=1.0)) < 1e-6


def test_two_cell_oracle():
    rng = np.random.default_rng(5)
    f = rng.standard_normal((2, 4))
    t = rng.standard_normal((3, 4))
    pres = [[True, False, False], [True, False, True]]
    got = float(positive_alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pres)))
    assert got == pytest.approx(oracles.alignment_terms(f, t, pres, 0.0)[0], abs=1e-9)


@pytest.mark.parametrize("margin", [1.0, 0.0, -0.5])
@pytest.mark.parametrize("reduce", ["mean", "sum"])
def test_loss_matches_loop_oracle(margin, reduce):
    rng = np.random.default_rng(int(margin * 10) + 7)
    for _ in range(10):
        f, t, pr = random_instance(rng, p=4, n=3)
        out = alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pr), margin, reduce)
        ref = oracles.alignment_terms(f, t, pr.tolist(), margin, reduce)
        np.testing.assert_allclose([float(out.l_pos), float(out.l_neg), float(out.l_align)], ref, atol=1e-6)


def test_batched_loss_is_batch_mean():
    rng = np.random.default_rng(9)
    f, t, pr = random_instance(rng, p=6, n=4, k=5, batch=3)
    out = alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pr, 6), 0.0)
    refs = [oracles.alignment_terms(f[b], t, pr[b].tolist(), 0.0)[2] for b in range(3)]
    assert float(out.l_align) == pytest.approx(np.mean(refs), abs=1e-9)


def test_l_align_is_exact_sum():
    rng = np.random.default_rng(2)
    f, t, pr = random_instance(rng)
    out = alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pr), 0.0)
    assert torch.equal(out.l_align, out.l_pos + out.l_neg)


def test_empty_positive_set_is_skipped():
    text = torch.eye(3)
    feats = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    pres = [[False, False, False], [False, True, False]]
    out = positive_alignment_loss(feats, text, mask_of(pres), reduce="sum")
    assert float(out) == 0.0


def test_exclude_background_label():
    rng = np.random.default_rng(4)
    f, t, pr = random_instance(rng, p=5, n=4)
    out = alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pr), 0.0, exclude=(0,))
    ref = oracles.alignment_terms(f, t[1:], pr[:, 1:].tolist(), 0.0)
    assert float(out.l_align) == pytest.approx(ref[2], abs=1e-9)


def test_degenerate_cells():
    text = torch.eye(2)
    feats = torch.tensor([[0.0, 0.0], [1.0, 0.0]], requires_grad=True)
    mask = mask_of([[True, False], [True, False]])
    with pytest.raises(DegenerateVectorError):
        alignment_loss(feats, text, mask, strict=True)
    out = alignment_loss(feats, text, mask, strict=False)
    assert out.skipped_cells == 1
    out.l_align.backward()
    assert torch.isfinite(feats.grad).all()
    with pytest.raises(DegenerateVectorError):
        alignment_loss(torch.ones(2, 2), torch.tensor([[0.0, 0.0], [1.0, 0.0]]), mask)


def test_dimension_mismatch():
    with pytest.raises(ValidationError):
        alignment_loss(torch.ones(2, 3), torch.eye(2), mask_of([[True, False], [True, False]]))
    with pytest.raises(ValidationError):
        alignment_loss(torch.ones(2, 2), torch.eye(2), mask_of([[True, False, True]] * 2))


def test_margin_out_of_range():
    with pytest.raises(ValidationError):
        alignment_loss(torch.ones(1, 2), torch.eye(2), mask_of([[True, False]]), margin=1.5)


def test_gradient_against_finite_differences():
    rng = np.random.default_rng(0)
    f, t, pr = random_instance(rng, p=6, n=4, k=5)
    mask = mask_of(pr)

    def loss_np(x):
        return float(alignment_loss(torch.tensor(x), torch.tensor(t), mask, 0.0).l_align)

    x = torch.tensor(f, requires_grad=True)
    alignment_loss(x, torch.tensor(t), mask, 0.0).l_align.backward()
    fd = oracles.central_difference(loss_np, f)
    rel = np.linalg.norm(x.grad.numpy() - fd) / np.linalg.norm(fd)
    assert rel < 1e-3


def test_table_receives_no_gradient():
    text = torch.randn(3, 4, requires_grad=True)
    feats = torch.randn(5, 4, requires_grad=True)
    pres = torch.rand(5, 3) < 0.5
    out = alignment_loss(feats, text, mask_of(pres), 0.0)
    (g,) = torch.autograd.grad(out.l_align, text, allow_unused=True)
    assert g is None


# ---------------------------------------------------------------- properties


instance = st.tuples(st.integers(1, 16), st.integers(2, 5), st.integers(2, 8), st.integers(0, 2**31))


@settings(max_examples=40, deadline=None)
@given(instance, st.sampled_from([1.0, 0.0, -0.5]))
def test_property_oracle_and_bounds(spec, margin):
    p, n, k, seed = spec
    f, t, pr = random_instance(np.random.default_rng(seed), p, n, k)
    out = alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pr), margin, reduce="sum")
    ref = oracles.alignment_terms(f, t, pr.tolist(), margin, reduce="sum")
    assert abs(float(out.l_align) - ref[2]) < 1e-6
    assert 0.0 <= float(out.l_pos) <= 2.0 * p + 1e-9
    assert 0.0 <= float(out.l_neg) <= (1.0 - margin) * p + 1e-9
    assert (out.per_cell >= 0).all()


@settings(max_examples=30, deadline=None)
@given(instance, st.floats(0.01, 100.0))
def test_property_row_scale_invariance(spec, alpha):
    p, n, k, seed = spec
    rng = np.random.default_rng(seed)
    f, t, pr = random_instance(rng, p, n, k)
    before = float(alignment_loss(torch.tensor(f), torch.tensor(t), mask_of(pr), 0.0).l_align)
    f2 = f.copy()
    f2[int(rng.integers(0, p))] *= alpha
    after = float(alignment_loss(torch.tensor(f2), torch.tensor(t), mask_of(pr), 0.0).l_align)
    assert abs(before - after) < 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31))
def test_property_partition(H, W, n, seed):
    rng = np.random.default_rng(seed)
    hf, wf = int(rng.integers(1, H + 1)), int(rng.integers(1, W + 1))
    labels = rng.integers(0, n, (H, W))
    mask = derive_feature_masks(labels, (hf, wf), n)
    assert mask.presence.tolist() == oracles.mask_presence(labels.tolist(), hf, wf, n)
    for j in range(hf * wf):
        pos, neg = positive_negative_sets(mask, j)
        assert not pos & neg and pos | neg == set(range(n)) and pos
