import itertools
import json
import math

import numpy as np
import pytest
from sklearn.metrics import average_precision_score

from triplab.metrics import (
    average_precision,
    box_iou,
    component_scores,
    dataset_localization_score,
    decode_triplets,
    evaluate,
    localization_score,
    match_boxes,
    pr_curve,
    scatter_to_volume,
)
from triplab.vocab import ClassIndex, Dataset, FrameAnnotation, Vocabulary, build_validity_mask


def ap_oracle(scores, labels):
    """Enumerate every distinct threshold and integrate P dR directly."""
    npos = sum(labels)
    ap, prev_r = 0.0, 0.0
    for tau in sorted(set(scores), reverse=True):
        kept = [y for s, y in zip(scores, labels) if s >= tau]
        tp = sum(kept)
        r = tp / npos
        ap += (r - prev_r) * (tp / len(kept))
        prev_r = r
    return ap


def test_ap_examples():
    assert average_precision([0.9, 0.1], [1, 0]) == 1.0
    assert average_precision([0.1, 0.9], [1, 0]) == 0.5
    assert math.isnan(average_precision([0.3, 0.2], [0, 0]))
    with pytest.raises(ValueError):
        average_precision([0.1], [1, 0])


def test_ap_matches_oracle_on_random_instances(rng):
    for _ in range(300):
        n = int(rng.integers(1, 21))
        labels = list((rng.random(n) < 0.4).astype(int))
        if not any(labels):
            labels[0] = 1
        scores = list(np.round(rng.random(n), int(rng.integers(1, 3))))
        assert abs(average_precision(scores, labels) - ap_oracle(scores, labels)) <= 1e-12


def test_ap_agrees_with_sklearn(rng):
    for _ in range(100):
        labels = (rng.random(30) < 0.3).astype(int)
        labels[0] = 1
        scores = np.round(rng.random(30), 1)
        assert average_precision(scores, labels) == pytest.approx(average_precision_score(labels, scores), abs=1e-12)


def test_pr_curve_shape(rng):
    curve = pr_curve(rng.random(25), rng.random(25) < 0.5)
    assert np.all(np.diff(curve.recall) >= 0)
    assert np.all((curve.precision >= 0) & (curve.precision <= 1))
    assert np.all(np.diff(curve.thresholds) < 0)


def test_ap_rank_statistic(rng):
    scores = rng.random(40)
    labels = (rng.random(40) < 0.3).astype(int)
    labels[3] = 1
    base = average_precision(scores, labels)
    assert average_precision(np.exp(3 * scores) - 7, labels) == pytest.approx(base, abs=1e-15)
    perm = rng.permutation(40)
    assert average_precision(scores[perm], labels[perm]) == pytest.approx(base, abs=1e-15)


def test_component_scores_singleton():
    vol = np.zeros((6, 8, 19))
    vol[2, 3, 1] = 0.7
    assert component_scores(vol, "IV")[2, 3] == 0.7
    assert component_scores(vol, "IT")[2, 1] == 0.7
    assert component_scores(vol, "I")[2] == 0.7
    assert component_scores(vol, "IVT") is vol
    assert not component_scores(np.zeros((6, 8, 19)), "I").any()


def test_component_scores_match_loops(rng):
    vol = rng.random((3, 4, 5))
    iv, it, i_ = (component_scores(vol, g) for g in ("IV", "IT", "I"))
    for a, b in itertools.product(range(3), range(4)):
        assert iv[a, b] == max(vol[a, b, t] for t in range(5))
    for a, c in itertools.product(range(3), range(5)):
        assert it[a, c] == max(vol[a, v, c] for v in range(4))
    for a in range(3):
        assert i_[a] == max(vol[a, v, t] for v in range(4) for t in range(5))


VOCAB = Vocabulary(("a", "b", "c"), ("null", "v1", "v2"), ("null", "t1", "t2", "t3"))


def _random_truth(rng, n=10):
    cells = [(i, v, t) for i in range(3) for v in range(3) for t in range(4)]
    anns = []
    for k in range(n):
        pick = rng.choice(len(cells), size=int(rng.integers(0, 4)), replace=False)
        anns.append(FrameAnnotation("v", k, frozenset(cells[j] for j in pick)))
    return Dataset(tuple(anns), VOCAB)


def _reference_report(probs, truth):
    """Second implementation: explicit loops plus sklearn AP."""
    n = len(truth)
    m, nv, p = VOCAB.shape
    lab = np.zeros((n, m, nv, p))
    for k, ann in enumerate(truth):
        for trip in ann.triplets:
            lab[k][trip] = 1
    groups = {
        "I": [((i,), lambda x, i=i: x[:, i].max(axis=(1, 2))) for i in range(m)],
        "IV": [((i, v), lambda x, i=i, v=v: x[:, i, v].max(axis=1)) for i in range(m) for v in range(nv)],
        "IT": [((i, t), lambda x, i=i, t=t: x[:, i, :, t].max(axis=1)) for i in range(m) for t in range(p)],
        "IVT": [((i, v, t), lambda x, i=i, v=v, t=t: x[:, i, v, t])
                for i in range(m) for v in range(nv) for t in range(p)],
    }
    out = {}
    for g, cols in groups.items():
        aps = []
        for _, f in cols:
            y = f(lab)
            if y.sum() > 0:
                aps.append(average_precision_score(y, f(probs)))
        out[g] = float(np.mean(aps))
    return out


def test_report_matches_reference(rng):
    truth = _random_truth(rng)
    probs = np.round(rng.random((10, 3, 3, 4)), 2)
    got = evaluate(probs, truth).summary()
    ref = _reference_report(probs, truth)
    assert got["AP_I"] == pytest.approx(ref["I"], abs=1e-12)
    assert got["AP_IV"] == pytest.approx(ref["IV"], abs=1e-12)
    assert got["AP_IT"] == pytest.approx(ref["IT"], abs=1e-12)
    assert got["AP_IVT"] == pytest.approx(ref["IVT"], abs=1e-12)


def test_perfect_predictor(rng):
    truth = _random_truth(rng, 12)
    vol = truth.multi_hot()["volume"]
    rep = evaluate(vol, truth)
    assert rep.summary() == {"AP_I": 1.0, "AP_IV": 1.0, "AP_IT": 1.0, "AP_IVT": 1.0}


def test_constant_predictor_scores_prevalence(rng):
    truth = _random_truth(rng, 15)
    rep = evaluate(np.full((15, 3, 3, 4), 0.5), truth)
    lab = truth.multi_hot()["volume"].reshape(15, -1)
    names = [f"{i}|{v}|{t}" for i in VOCAB.instruments for v in VOCAB.verbs for t in VOCAB.targets]
    for k, name in enumerate(names):
        if lab[:, k].any():
            assert rep.per_class["IVT"][name] == pytest.approx(lab[:, k].mean())


def test_corrupting_target_axis(rng):
    truth = _random_truth(rng, 20)
    vol = truth.multi_hot()["volume"].astype(np.float64)
    bad = vol.copy()
    for k, ann in enumerate(truth):
        for i, v, t in ann.triplets:
            bad[k, i, v, t] = 0.0
            bad[k, i, v, (t + 1) % 4] = 1.0
    base, worse = evaluate(vol, truth).summary(), evaluate(bad, truth).summary()
    assert worse["AP_IV"] == base["AP_IV"] == 1.0
    assert worse["AP_IT"] < 1.0 and worse["AP_IVT"] < 1.0


def test_frame_shuffle_invariance(rng):
    truth = _random_truth(rng, 12)
    probs = rng.random((12, 3, 3, 4))
    perm = rng.permutation(12)
    shuffled = Dataset(tuple(truth.annotations[k] for k in perm), VOCAB)
    a, b = evaluate(probs, truth).summary(), evaluate(probs[perm], shuffled).summary()
    assert a == pytest.approx(b, abs=1e-15)


def test_class_vectors_share_the_volume_path(rng):
    truth = _random_truth(rng, 10)
    classes = ClassIndex([(0, 0, 0), (0, 1, 2), (2, 2, 3)], VOCAB)
    scores = rng.random((10, 3))
    vol = scatter_to_volume(scores, classes)
    assert vol[4, 0, 1, 2] == scores[4, 1] and vol.sum() == pytest.approx(scores.sum())
    assert evaluate(scores, truth, classes).summary() == evaluate(vol, truth).summary()
    with pytest.raises(ValueError):
        evaluate(scores, truth)


def test_frame_misalignment_rejected(rng):
    truth = _random_truth(rng, 10)
    with pytest.raises(ValueError):
        evaluate(rng.random((9, 3, 3, 4)), truth)


def test_branch_instrument_scores(rng):
    truth = _random_truth(rng, 10)
    inst = truth.multi_hot()["I"]
    rep = evaluate(np.zeros((10, 3, 3, 4)), truth, instrument_scores=inst)
    assert rep.mean_ap_i == 1.0 and rep.metadata["instrument_source"] == "branch"


def test_report_serialization(rng):
    truth = _random_truth(rng, 10)
    rep = evaluate(rng.random((10, 3, 3, 4)), truth)
    data = json.loads(rep.to_json())
    assert data["schema_version"] == 1 and data["n_frames"] == 10
    header, row = rep.to_csv("tripnet").splitlines()
    assert header.split(",")[:4] == ["Model", "a", "b", "c"]
    assert header.endswith("Mean AP_I,AP_IV,AP_IT,AP_IVT,Mean")
    assert row.startswith("tripnet,")


def test_decode_triplets(rng):
    mask = build_validity_mask([(0, 1, 1), (1, 2, 3)], VOCAB)
    vol = np.full((3, 3, 4), 0.2)
    assert decode_triplets(vol, 0.5, mask) == set()
    vol[2, 2, 2] = 0.99
    vol[0, 1, 1] = 0.8
    assert decode_triplets(vol, 0.5, mask) == {(0, 1, 1)}
    for _ in range(20):
        vol = rng.random((3, 3, 4))
        want = {c for c in itertools.product(range(3), range(3), range(4)) if vol[c] > 0.5}
        assert decode_triplets(vol) == want
    with pytest.raises(ValueError):
        decode_triplets(vol, 1.0)


def test_localization_examples():
    box = (3, 4, 20, 30)
    assert localization_score([(0, box, 0.9)], [(0, box)]) == 1.0
    assert localization_score([(0, (50, 50, 60, 60), 0.9)], [(0, box)]) == 0.0
    assert localization_score([(1, box, 0.9)], [(0, box)]) == 0.0
    assert math.isnan(localization_score([], []))


def test_box_iou():
    assert box_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0


def _greedy_oracle(pred, gt, thresh):
    free = set(range(len(gt)))
    hits = 0
    for inst, box, _ in sorted(pred, key=lambda r: -r[2]):
        cands = [(box_iou(box, gt[k][1]), -k) for k in free if gt[k][0] == inst]
        cands = [c for c in cands if c[0] >= thresh]
        if cands:
            free.remove(-max(cands)[1])
            hits += 1
    return hits


def _best_matching(pred, gt, thresh):
    best = 0
    r = min(len(pred), len(gt))
    for rows in itertools.permutations(range(len(pred)), r):
        for perm in itertools.permutations(range(len(gt)), r):
            ok = sum(1 for j, k in zip(rows, perm)
                     if gt[k][0] == pred[j][0] and box_iou(pred[j][1], gt[k][1]) >= thresh)
            best = max(best, ok)
    return best


def _rand_box(rng):
    x0, y0 = rng.integers(0, 30, 2)
    w, h = rng.integers(4, 20, 2)
    return (int(x0), int(y0), int(x0 + w), int(y0 + h))


def test_matching_equals_greedy_oracle(rng):
    for _ in range(300):
        gt = [(int(rng.integers(0, 2)), _rand_box(rng)) for _ in range(int(rng.integers(1, 5)))]
        pred = [(int(rng.integers(0, 2)), _rand_box(rng), float(rng.random()))
                for _ in range(int(rng.integers(0, 5)))]
        hits = match_boxes(pred, gt, 0.3)
        assert hits == _greedy_oracle(pred, gt, 0.3)
        assert hits <= _best_matching(pred, gt, 0.3)


def test_dataset_localization_pools_instances():
    gts = [[(0, (0, 0, 10, 10))], [(0, (0, 0, 10, 10)), (1, (20, 20, 30, 30))]]
    preds = [[(0, (0, 0, 10, 10), 0.9)], [(1, (20, 20, 30, 30), 0.8)]]
    assert dataset_localization_score(preds, gts) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        dataset_localization_score(preds[:1], gts)
