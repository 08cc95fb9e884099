import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from xraft import fileio
from xraft.evaluation import (
    AnnotatedPair,
    DeformRecipe,
    EvalSet,
    apply_deformation,
    eval_keypoints,
    eval_mask_iou,
    eval_report,
    eval_synthetic,
    eval_synthetic_batch,
    evaluate_predictor,
    format_report,
    gen_deformation,
    parse_report,
    read_keypoints,
    render_registration,
    write_keypoints,
)
from xraft.flow import discrepancy_mask
from xraft.imaging import HsiCube, Modality
from xraft.synth import SynthConfig, make_annotated, make_case

CFG = SynthConfig(size=32, seed=4)


def cube(rng, h=12, w=10, modality=Modality.WHITE):
    return HsiCube(torch.from_numpy(rng.random((10, h, w)).astype(np.float32)), modality)


def zero_predictor(srcs, tgts):
    return torch.zeros(len(srcs), 2, srcs[0].height, srcs[0].width, dtype=torch.float64)


def table_predictor(table):
    """Look flows up by the identity of the (unmodified) target cube."""

    def predict(srcs, tgts):
        return torch.stack([table[id(t)] for t in tgts])

    return predict


def gt_predictor(cases):
    table = {}
    for c in cases:
        gt = c.ground_truth()
        table[id(c.blue)] = gt  # wb: target is blue
        table[id(c.white)] = gt  # bw: target is white
    return table_predictor(table)


# -- deformation ---------------------------------------------------------------------


def test_gen_deformation_examples():
    assert not gen_deformation(16, 12, DeformRecipe(1, 4.0, 0.0)).any()
    f = gen_deformation(16, 12, DeformRecipe(1, 4.0, 7.5))
    assert f.shape == (2, 12, 16)
    assert abs(torch.linalg.vector_norm(f, dim=0).max().item() - 7.5) <= 1e-6
    assert torch.equal(f, gen_deformation(16, 12, DeformRecipe(1, 4.0, 7.5)))
    assert not torch.equal(f, gen_deformation(16, 12, DeformRecipe(2, 4.0, 7.5)))
    with pytest.raises(ValueError):
        DeformRecipe(sigma=0)
    with pytest.raises(ValueError):
        DeformRecipe(amplitude=-1)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.5, 10), st.floats(0.1, 20))
def test_gen_deformation_peak(seed, sigma, amp):
    f = gen_deformation(20, 14, DeformRecipe(seed, sigma, amp))
    assert abs(torch.linalg.vector_norm(f, dim=0).max().item() - amp) <= 1e-6


def test_apply_deformation_examples(rng):
    c = cube(rng)
    assert torch.equal(apply_deformation(c, torch.zeros(2, 12, 10)).values, c.values)
    shift = torch.zeros(2, 12, 10, dtype=torch.float64)
    shift[0] = 2.0
    out = apply_deformation(c, shift).values.numpy()
    want = oracles.warp(c.values.numpy().astype(np.float64), shift.numpy())
    assert np.abs(out - want).max() <= 1e-6
    assert np.array_equal(out[:, :, :-2], c.values.numpy()[:, :, 2:])
    assert not out[:, :, -2:].any()
    # Bands are warped independently.
    f = gen_deformation(10, 12, DeformRecipe(3, 3.0, 2.0))
    one = apply_deformation(HsiCube(c.values[3:4]), f).values
    assert torch.equal(one[0], apply_deformation(c, f).values[3])


# -- synthetic EPE -------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cases():
    return [make_case(CFG, i, "val") for i in range(3)]


def test_synthetic_oracle_and_zero(cases):
    for d in ("wb", "bw", "both"):
        assert eval_synthetic_batch(gt_predictor(cases), cases, d) < 1e-3
    mean_norm = np.mean([torch.linalg.vector_norm(c.ground_truth(), dim=0).mean().item() for c in cases])
    assert abs(eval_synthetic_batch(zero_predictor, cases, "wb") - mean_norm) <= 1e-3


def test_synthetic_both_is_mean(cases):
    def noisy(srcs, tgts):
        g = torch.Generator().manual_seed(len(srcs) + int(srcs[0].modality))
        return torch.randn(len(srcs), 2, srcs[0].height, srcs[0].width, generator=g, dtype=torch.float64)

    wb = eval_synthetic_batch(noisy, cases, "wb")
    bw = eval_synthetic_batch(noisy, cases, "bw")
    assert wb != bw
    assert abs(eval_synthetic_batch(noisy, cases, "both") - 0.5 * (wb + bw)) <= 1e-9
    assert eval_synthetic(noisy, cases[0], direction="wb") == eval_synthetic_batch(noisy, cases[:1], "wb")


def test_synthetic_sources_are_deformed(cases):
    src, tgt, gt = cases[0].sources_targets("wb")
    assert src.modality == Modality.WHITE and tgt is cases[0].blue
    assert torch.equal(src.values, apply_deformation(cases[0].white, gt).values)
    src, tgt, _ = cases[0].sources_targets("bw")
    assert src.modality == Modality.BLUE and tgt is cases[0].white
    with pytest.raises(ValueError):
        cases[0].sources_targets("ww")


# -- keypoints -------------------------------------------------------------------------------------------


def test_keypoint_examples():
    flow = torch.zeros(2, 12, 12)
    flow[0], flow[1] = 2.0, 3.0
    assert eval_keypoints(flow, [[5, 5, 7, 8]]) == pytest.approx(0.0)
    assert eval_keypoints(flow, [[5, 5, 10, 12]]) == pytest.approx(5.0)
    assert eval_keypoints(flow, [[5.5, 4.25, 7.5, 7.25], [1, 1, 3, 4]]) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        eval_keypoints(flow, np.zeros((0, 4)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_keypoints_order_invariant(seed):
    rng = np.random.default_rng(seed)
    flow = torch.from_numpy(rng.normal(size=(2, 10, 10)))
    pts = rng.uniform(0, 9, size=(6, 4))
    perm = rng.permutation(6)
    assert eval_keypoints(flow, pts) == pytest.approx(eval_keypoints(flow, pts[perm]), abs=1e-12)


def test_keypoint_io(tmp_path, rng):
    pts = rng.uniform(0, 30, size=(5, 4))
    write_keypoints(tmp_path / "k.txt", pts)
    assert np.array_equal(read_keypoints(tmp_path / "k.txt"), pts)
    (tmp_path / "bad.txt").write_text("1 2 3\n")
    with pytest.raises(fileio.FormatError, match="bad.txt:1"):
        read_keypoints(tmp_path / "bad.txt")


# -- masks ------------------------------------------------------------------------------------------------


def box(h=12, w=12, y0=3, y1=7, x0=3, x1=7):
    m = np.zeros((h, w), dtype=bool)
    m[y0:y1, x0:x1] = True
    return m


def test_mask_iou_examples():
    zero = torch.zeros(2, 12, 12)
    assert eval_mask_iou(zero, box(), box()) == 0.0
    assert eval_mask_iou(zero, box(), box(x0=8, x1=11)) == 1.0
    assert eval_mask_iou(zero, np.zeros((12, 12), bool), np.zeros((12, 12), bool)) == 0.0
    # Source box sits 3 px right of the reference; pulling it back by flow +3 aligns them.
    shift = torch.zeros(2, 12, 12)
    shift[0] = 3.0
    assert eval_mask_iou(shift, box(x0=6, x1=10), box()) == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_mask_iou_matches_oracle_and_range(seed):
    rng = np.random.default_rng(seed)
    flow = torch.from_numpy(rng.normal(0, 2, size=(2, 10, 10)))
    a, b = rng.random((10, 10)) < 0.5, rng.random((10, 10)) < 0.5
    got = eval_mask_iou(flow, a, b)
    assert 0.0 <= got <= 1.0
    assert got == pytest.approx(oracles.mask_iou_error(flow.numpy(), a, b))


def test_mask_iou_monotone_under_erosion():
    zero = torch.zeros(2, 12, 12)
    ref = box()
    errs = [eval_mask_iou(zero, box(y1=y1), ref) for y1 in (7, 6, 5, 4)]
    assert errs == sorted(errs)


# -- annotated pairs ------------------------------------------------------------------------------------


def test_generated_keypoints_replay_to_zero():
    for i in range(3):
        pair, flow_bw = make_annotated(CFG, i)
        assert eval_keypoints(flow_bw, pair.keypoints_for("bw")) <= 1e-9
        assert eval_mask_iou(flow_bw, *pair.masks_for("bw")) == 0.0


def test_evaluate_predictor_absent_and_both(cases):
    pair, flow_bw = make_annotated(CFG, 0)
    only_kp = AnnotatedPair(pair.white, pair.blue, pair.keypoints)
    scores = evaluate_predictor(zero_predictor, EvalSet(cases, [only_kp]))
    assert scores["wb"]["mask_1-iou"] is None and scores["both"]["mask_1-iou"] is None
    for m in ("synthetic_epe", "keypoint_epe"):
        assert abs(scores["both"][m] - 0.5 * (scores["wb"][m] + scores["bw"][m])) <= 1e-9
    none = evaluate_predictor(zero_predictor, EvalSet())
    assert all(v is None for d in none.values() for v in d.values())


# -- report ------------------------------------------------------------------------------------------


def scaled(k):
    def predict(srcs, tgts):
        return torch.full((len(srcs), 2, srcs[0].height, srcs[0].width), float(k), dtype=torch.float64)

    return predict


def test_report_single_and_multi(cases):
    es = EvalSet(cases[:2])
    summary, _ = eval_report({"one": [scaled(0)]}, es)
    assert all(r.std is None for r in summary)
    text = format_report(summary)
    assert "one\tboth\tkeypoint_epe\tabsent" in text
    assert parse_report(text) == summary

    summary, per_run = eval_report({"five": [scaled(k) for k in range(5)]}, es)
    for row in summary:
        if row.value is None:
            continue
        vals = [r.value for r in per_run if r.direction == row.direction and r.metric == row.metric]
        assert len(vals) == 5
        assert row.value == pytest.approx(sum(vals) / 5, abs=1e-12)
        mu = sum(vals) / 5
        assert row.std == pytest.approx((sum((v - mu) ** 2 for v in vals) / 4) ** 0.5, abs=1e-12)
    both = {r.metric: r.value for r in summary if r.direction == "both" and r.value is not None}
    wb = {r.metric: r.value for r in summary if r.direction == "wb" and r.value is not None}
    bw = {r.metric: r.value for r in summary if r.direction == "bw" and r.value is not None}
    for m in both:
        assert abs(both[m] - 0.5 * (wb[m] + bw[m])) <= 1e-9
    assert parse_report(format_report(per_run)) == per_run


def test_parse_report_rejects_short_lines():
    with pytest.raises(ValueError):
        parse_report("a\tb\n")


# -- rendering ---------------------------------------------------------------------------------------------


def test_render_consistent_and_inconsistent(tmp_path, rng, q):
    src, tgt = cube(rng, 16, 16), cube(rng, 16, 16, Modality.BLUE)
    zero = torch.zeros(2, 16, 16)
    img, keep = render_registration(src, tgt, zero, zero, q, path=tmp_path / "r.ppm")
    assert keep.all() and not (img == 0.5).all(axis=0).all()
    assert fileio.read_ppm(tmp_path / "r.ppm").shape == (16, 16, 3)
    far = torch.full((2, 16, 16), 4.0)
    img, keep = render_registration(src, tgt, far, far, q)
    assert not keep.any() and (img == 0.5).all()


def test_render_grey_set_is_discrepancy_complement(rng, q):
    src, tgt = cube(rng, 16, 16), cube(rng, 16, 16)
    f_st = torch.from_numpy(rng.normal(0, 2, size=(2, 16, 16)))
    f_ts = torch.from_numpy(rng.normal(0, 2, size=(2, 16, 16)))
    img, keep = render_registration(src, tgt, f_st, f_ts, q)
    want = discrepancy_mask(f_ts[None], f_st[None], 3.0)[0, 0].numpy()
    assert np.array_equal(keep, want)
    assert (img[:, ~keep] == 0.5).all()
