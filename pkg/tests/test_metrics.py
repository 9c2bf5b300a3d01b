import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from signseg.core import Segment, TagSequence, ValidationError, segments_from_tags
from signseg.metrics import (EvalReport, MetricConfig, boundary_f1, evaluate, frame_f1,
                             frame_iou, mf1b, mf1s, segment_ratio)

from oracles import (boundary_f1_bruteforce, frame_f1_bruteforce, frame_iou_bruteforce,
                     mf1s_bruteforce, spans_bruteforce)

TAUS = MetricConfig().iou_thresholds


def T(text):
    return TagSequence.from_string(text)


def test_default_thresholds():
    cfg = MetricConfig()
    assert cfg.boundary_thresholds == (1, 2, 3, 4)
    assert cfg.iou_thresholds == (0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75)
    with pytest.raises(ValueError):
        MetricConfig(boundary_thresholds=(2, 1))
    with pytest.raises(ValueError):
        MetricConfig(iou_thresholds=())


# -- frame F1 -------------------------------------------------------------------

def test_frame_f1_identity():
    assert frame_f1(T("OBIIOBI"), T("OBIIOBI")) == 1.0


def test_frame_f1_all_wrong():
    macro, per = frame_f1(T("OOOO"), T("BIII"), return_per_class=True)
    assert macro == 0.0
    assert [per[c]["f1"] for c in "OIB"] == [0.0, 0.0, 0.0]


def test_frame_f1_hand_counted():
    macro, per = frame_f1(T("OBIO"), T("OBII"), return_per_class=True)
    assert per["O"]["precision"] == 0.5 and per["O"]["recall"] == 1.0
    assert per["I"]["precision"] == 1.0 and per["I"]["recall"] == 0.5
    assert per["B"]["f1"] == 1.0
    assert macro == pytest.approx(7 / 9, abs=1e-12)


def test_frame_f1_absent_class_convention():
    # B absent from both sides scores 1
    assert frame_f1(T("OIIO"), T("OIIO")) == 1.0


def test_frame_metrics_length_mismatch():
    with pytest.raises(ValidationError):
        frame_f1(T("OB"), T("OBI"))
    with pytest.raises(ValidationError):
        frame_iou(T("OB"), T("OBI"))


# -- IoU ------------------------------------------------------------------------

def test_frame_iou_cases():
    assert frame_iou(T("OBIIO"), T("OBIIO")) == 1.0
    assert frame_iou(T("BIOOO"), T("OOOBI")) == 0.0
    assert frame_iou(T("OBIIOO"), T("OOBIIO")) == 0.5
    assert frame_iou(T("OOO"), T("OOO")) == 1.0


# -- segment ratio --------------------------------------------------------------

def test_segment_ratio_cases():
    segs = [Segment(0, 2), Segment(5, 6)]
    assert segment_ratio(segs, segs) == 1.0
    assert segment_ratio(segs + [Segment(8, 8), Segment(9, 9)], segs) == 2.0
    pred = [[Segment(i, i)] for i in range(98)]
    gt = [[Segment(i, i)] for i in range(100)]
    assert segment_ratio(pred, gt) == pytest.approx(0.98)
    with pytest.raises(ValidationError):
        segment_ratio(segs, [])


# -- boundaries -----------------------------------------------------------------

def test_boundary_f1_cases():
    same = [Segment(3, 5), Segment(8, 9)]
    assert all(boundary_f1(same, same, t) == 1.0 for t in range(5))
    pred, gt = [Segment(12, 14)], [Segment(10, 14)]
    assert boundary_f1(pred, gt, 1) == 0.0
    assert boundary_f1(pred, gt, 2) == 1.0
    pred, gt = [Segment(5, 5), Segment(7, 8)], [Segment(6, 8)]
    assert boundary_f1(pred, gt, 1) == pytest.approx(2 / 3)
    assert boundary_f1_bruteforce([(5, 5), (7, 8)], [(6, 8)], 1) == pytest.approx(2 / 3)


def test_boundary_starts_and_ends():
    pred, gt = [Segment(0, 4)], [Segment(0, 9)]
    assert boundary_f1(pred, gt, 1, "starts_only") == 1.0
    assert boundary_f1(pred, gt, 1, "starts_and_ends") == 0.5


def test_mf1b_cases():
    segs = [Segment(0, 3)]
    assert mf1b(segs, segs) == 1.0
    assert mf1b([Segment(12, 14)], [Segment(10, 14)]) == 0.75


# -- segment F1 -----------------------------------------------------------------

def test_mf1s_cases():
    segs = [Segment(0, 4), Segment(7, 9)]
    assert mf1s(segs, segs) == 1.0
    assert mf1s([Segment(0, 9)], [Segment(0, 4)]) == pytest.approx(0.25)
    assert mf1s([Segment(0, 4), Segment(6, 9)], [Segment(0, 4)]) == pytest.approx(2 / 3)


def test_mf1s_tie_break_prefers_earlier_start():
    # both predictions overlap the target with IoU 1/3; only one may match
    pred = [Segment(0, 3), Segment(4, 7)]
    gt = [Segment(2, 5)]
    assert mf1s(pred, gt, MetricConfig(iou_thresholds=(0.3,))) == pytest.approx(2 / 3)


# -- evaluate -------------------------------------------------------------------

def test_evaluate_perfect():
    gt = {"a": T("OBIIOBIO"), "b": T("BIIIOOBI")}
    rep = evaluate(gt, gt)
    assert (rep.frame_f1, rep.iou, rep.segment_ratio, rep.mf1b, rep.mf1s) == (1, 1, 1, 1, 1)
    assert rep.counts == {"matched": 2, "over": 0, "under": 0}


def test_evaluate_all_outside():
    gt = {"a": T("OBIIOBIO"), "b": T("BIIIOOBI")}
    pred = {k: T("O" * len(v)) for k, v in gt.items()}
    rep = evaluate(pred, gt)
    assert rep.segment_ratio == 0.0
    assert rep.counts["under"] == 2
    o_f1 = rep.per_class["O"]["f1"]
    assert 0 < o_f1 < 1 and rep.per_class["I"]["f1"] == 0 and rep.per_class["B"]["f1"] == 0
    assert rep.frame_f1 == pytest.approx(o_f1 / 3)


def test_evaluate_two_sample_hand_computed():
    gt = {"a": T("OBIIO"), "b": T("BIOBI")}
    pred = {"a": T("OBIBI"), "b": T("BIIII")}
    rep = evaluate(pred, gt)
    # pooled confusion over 10 frames, rows gt / cols pred (O, I, B):
    #   gt O frames: a0 (O), a4 (I), b2 (I)          -> O:1, I:2
    #   gt I frames: a2 (I), a3 (B), b1 (I), b4 (I)  -> I:3, B:1
    #   gt B frames: a1 (B), b0 (B), b3 (I)          -> B:2, I:1
    f1_o = 2 * 1 / (2 * 1 + 0 + 2)
    f1_i = 2 * 3 / (2 * 3 + 3 + 1)
    f1_b = 2 * 2 / (2 * 2 + 1 + 1)
    assert rep.frame_f1 == pytest.approx((f1_o + f1_i + f1_b) / 3, abs=1e-12)
    # in-sign frames: a pred {1,2,3,4} gt {1,2,3}; b pred {0..4} gt {0,1,3,4}
    assert rep.iou == pytest.approx((3 + 4) / (4 + 5), abs=1e-12)
    # segments: a pred [1,2],[3,4] gt [1,3]; b pred [0,4] gt [0,1],[3,4]
    assert rep.segment_ratio == 1.0
    assert rep.counts == {"matched": 0, "over": 1, "under": 1}
    # boundaries: a pred {1,3} gt {1}; b pred {0} gt {0,3}
    # t=1: a 1 match, b 1 match -> tp 2, P=3, G=3; t>=2: a still 1 (3 vs nothing left), b: 0 matched, 3 unmatched
    assert rep.mf1b == pytest.approx(2 / 3, abs=1e-12)
    # segment IoU: a [1,2]~[1,3]=2/3, [3,4]~[1,3]=1/4 ; b [0,4]~[0,1]=2/5, ~[3,4]=2/5
    # greedy: a matches 2/3 ; b matches [0,1] (earlier gt start) with 2/5
    taus = MetricConfig().iou_thresholds
    tps = [(1 if 2 / 3 > t else 0) + (1 if 0.4 > t else 0) for t in taus]
    expected = np.mean([2 * tp / (3 + 3) for tp in tps])
    assert rep.mf1s == pytest.approx(expected, abs=1e-12)


def test_evaluate_id_mismatch():
    with pytest.raises(ValidationError):
        evaluate({"a": T("OB")}, {"b": T("OB")})


def test_report_json_round_trip():
    gt = {"a": T("OBIIO"), "b": T("BIOBI")}
    rep = evaluate({"a": T("OBIBI"), "b": T("BIIII")}, gt)
    back = EvalReport.from_json(rep.to_json())
    assert back == rep
    assert {"frame_f1", "iou", "segment_ratio", "mf1b", "mf1s", "counts"} <= set(rep.to_json())


# -- properties -----------------------------------------------------------------

pairs = st.integers(1, 50).flatmap(lambda n: st.tuples(
    st.lists(st.sampled_from([0, 1, 2]), min_size=n, max_size=n),
    st.lists(st.sampled_from([0, 1, 2]), min_size=n, max_size=n)))


@settings(max_examples=200, deadline=None)
@given(pairs)
def test_metrics_match_oracles(pair):
    p, g = pair
    assert abs(frame_f1(p, g) - frame_f1_bruteforce(p, g)) <= 1e-9
    assert abs(frame_iou(p, g) - frame_iou_bruteforce(p, g)) <= 1e-9
    ps, gs = segments_from_tags(p), segments_from_tags(g)
    psp, gsp = spans_bruteforce(p), spans_bruteforce(g)
    prev = -1.0
    for t in range(6):
        f = boundary_f1(ps, gs, t)
        assert abs(f - boundary_f1_bruteforce(psp, gsp, t)) <= 1e-9
        assert f >= prev
        prev = f
    assert abs(mf1s(ps, gs) - mf1s_bruteforce(psp, gsp, TAUS)) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(pairs)
def test_symmetric_ratio_and_self_scores(pair):
    p, g = pair
    ps, gs = segments_from_tags(p), segments_from_tags(g)
    if ps and gs:
        assert segment_ratio(ps, gs) * segment_ratio(gs, ps) == pytest.approx(1.0)
    if any(c != 0 for c in p):
        assert frame_f1(p, p) == 1.0 and frame_iou(p, p) == 1.0


@settings(max_examples=100, deadline=None)
@given(pairs, st.floats(0.0, 0.9), st.floats(0.0, 0.09))
def test_mf1s_non_increasing_in_threshold(pair, tau, bump):
    p, g = pair
    ps, gs = segments_from_tags(p), segments_from_tags(g)
    lo = mf1s(ps, gs, MetricConfig(iou_thresholds=(tau,)))
    hi = mf1s(ps, gs, MetricConfig(iou_thresholds=(tau + bump + 1e-6,)))
    assert hi <= lo


@settings(max_examples=50, deadline=None)
@given(st.lists(pairs, min_size=2, max_size=5), st.randoms())
def test_evaluate_order_invariant(pair_list, rnd):
    gt = {f"s{i}": g for i, (_, g) in enumerate(pair_list)}
    pred = {f"s{i}": p for i, (p, _) in enumerate(pair_list)}
    if not any(segments_from_tags(g) for g in gt.values()):
        return
    keys = list(gt)
    rnd.shuffle(keys)
    a = evaluate(pred, gt)
    b = evaluate({k: pred[k] for k in keys}, {k: gt[k] for k in keys})
    assert a == b
