import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regionvqa.numerics import Tensor, ops
from regionvqa.region_features import Box, iou, nms_per_category, pairwise_iou
from regionvqa.training import ensemble_predict

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, max_size=20, categories=3):
    n = draw(st.integers(0, max_size))
    out = []
    for _ in range(n):
        x1, y1 = draw(st.floats(0, 30)), draw(st.floats(0, 30))
        w, h = draw(st.floats(0.5, 15)), draw(st.floats(0.5, 15))
        out.append(Box(x1, y1, x1 + w, y1 + h, score=draw(st.floats(0, 1)),
                       category=draw(st.integers(0, categories - 1))))
    return out


class Member:
    def __init__(self, p):
        self.p = p
        self.classes_ = list(range(p.shape[1]))

    def predict_proba(self, X):
        return self.p


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_on_simplex(x):
    p = ops.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@given(boxes(max_size=2))
def test_iou_symmetric_and_bounded(bs):
    if len(bs) == 2:
        a, b = bs
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0
        arr = np.array([bx.coords() for bx in bs])
        np.testing.assert_allclose(pairwise_iou(arr, arr)[0, 1], iou(a, b), atol=1e-12)


@settings(max_examples=200)
@given(boxes(), st.sampled_from([0.3, 0.5, 0.7]))
def test_nms_invariants(bs, thr):
    keep = nms_per_category(bs, thr)
    assert len(set(keep)) == len(keep)
    for i, a in enumerate(keep):
        for b in keep[i + 1:]:
            if bs[a].category == bs[b].category:
                assert iou(bs[a], bs[b]) <= thr
    # every suppressed box overlaps a kept same-category box that outranks it
    for j in set(range(len(bs))) - set(keep):
        assert any(bs[k].category == bs[j].category and iou(bs[k], bs[j]) > thr and bs[k].score >= bs[j].score
                   for k in keep)


@given(st.integers(1, 6), st.integers(2, 5), st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_ensemble_stays_on_simplex(m, a, n, seed):
    rng = np.random.default_rng(seed)
    members = [Member(rng.dirichlet(np.ones(a), size=n)) for _ in range(m)]
    out = ensemble_predict(members, [None] * n)
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3),
       st.floats(0.5, 5), st.floats(0.5, 5), st.floats(0.2, 6), st.floats(0.2, 6))
def test_roi_align_exact_on_planes(a, b, c, x1, y1, w, h):
    size = 14
    ys, xs = np.mgrid[0:size, 0:size]
    fmap = Tensor((a * (xs + 0.5) + b * (ys + 0.5) + c)[None])
    box = np.array([[x1, y1, x1 + w, y1 + h]])
    out = ops.roi_align(fmap, box, (3, 2), 2).data[0, 0]
    cx = x1 + (np.arange(2) + 0.5) * w / 2
    cy = y1 + (np.arange(3) + 0.5) * h / 3
    np.testing.assert_allclose(out, a * cx[None, :] + b * cy[:, None] + c, atol=1e-9)
