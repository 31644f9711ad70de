"""Acceptance criteria, one test each.  Every test records a PASS/FAIL line that
is printed in the terminal summary (``criterion`` fixture in conftest)."""
import json
import shutil
import time
import warnings
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

import cbamseg.tensor as T
from cbamseg.augment import augment_manifest
from cbamseg.cbam import CbamParams, cbam_forward, channel_attention, spatial_attention
from cbamseg.cli import main
from cbamseg.dataset import read_manifest, select, split_dataset
from cbamseg.labels import LabelParseError, parse_labels, serialize_labels
from cbamseg.metrics import (average_precision, confidence_curves, evaluate_records, iou_box, iou_mask,
                             match_instances, miou, precision_recall)
from cbamseg.net import NetConfig, build_network, build_targets, compute_loss
from cbamseg.profile import LayerSpec, profile
from cbamseg.synth import SceneSpec, generate_dataset, generate_scene
from cbamseg.tensor import Parameter, Tensor

from oracles import ap_exact, box_iou_exact, curve_point, greedy_reference, random_scene


# ---------------------------------------------------------------- 1

def _grad_cases(seed):
    """(name, fn, point) triples covering every operator named by the criterion."""
    rng = np.random.default_rng(seed)
    c = int(rng.choice([2, 4]))
    h, w = (int(v) for v in rng.integers(3, 6, 2))
    x = Tensor(rng.normal(size=(c, h, w)))
    k = int(rng.choice([1, 3]))
    wt = Parameter(rng.normal(size=(3, c, k, k)))
    b = Parameter(rng.normal(size=3))
    stride = int(rng.integers(1, 3))
    yield "conv2d/x", lambda t: T.tsum(T.square(T.conv2d(t, wt, b, stride, k // 2))), x
    yield "conv2d/w", lambda t: T.tsum(T.square(T.conv2d(x, t, b, stride, k // 2))), wt

    v = Tensor(rng.normal(size=c))
    w1, w2 = Parameter(rng.normal(size=(c // 2, c))), Parameter(rng.normal(size=(c, c // 2)))
    yield "mlp_forward/x", lambda t: T.tsum(T.square(T.mlp_forward(t, w1, w2))), v
    yield "mlp_forward/w1", lambda t: T.tsum(T.square(T.mlp_forward(v, t, w2))), w1

    p = CbamParams.init(c, 2, 3, rng)
    f = Tensor(rng.normal(size=(c, h, w)))
    yield "channel_attention", lambda t: T.tsum(T.square(channel_attention(t, p))), f
    yield "spatial_attention", lambda t: T.tsum(T.square(spatial_attention(t, p))), f
    yield "cbam_forward/x", lambda t: T.tsum(T.square(cbam_forward(t, p)[0])), f
    for prm in p.parameters():
        yield "cbam_forward/" + prm.name, lambda _: T.tsum(T.square(cbam_forward(f, p)[0])), prm

    cfg = NetConfig(image_size=16, channels=(3, 4), proto_size=8, prototypes=2, head_hidden=4,
                    proto_hidden=3, cbam=True, cbam_reduction=1, cbam_kernel=3)
    net = build_network(cfg, seed)
    imgs = rng.random((2, 3, 16, 16))
    from cbamseg.labels import InstanceRecord

    def box(cl):
        x1, y1 = rng.uniform(0, 0.5, 2)
        x2, y2 = x1 + rng.uniform(0.2, 0.5), y1 + rng.uniform(0.2, 0.5)
        return InstanceRecord(cl, [[x1, y1], [x2, y1], [x2, y2], [x1, y2]])

    targets = build_targets([[box(0)], [box(1)]], cfg)

    def loss(_):
        head, protos = net.forward_batch(imgs)
        return compute_loss(head, protos, targets, cfg)

    for name, prm in net.params.items():
        yield "net_loss/" + name, loss, prm


def test_criterion_1_gradient_soundness(criterion):
    t0 = time.perf_counter()
    worst, where, n = 0.0, "", 0
    for seed in range(20):
        for name, fn, point in _grad_cases(seed):
            err = T.finite_diff_check(fn, point, 1e-5)
            n += 1
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed < 60
    criterion(ok, f"{n} checks over 20 seeds, worst rel err {worst:.2e} ({where}), {elapsed:.1f} s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_cbam_invariants(criterion):
    rng = np.random.default_rng(2)
    bad = Counter()
    for _ in range(100):
        c = int(rng.choice([1, 2, 4, 8]))
        h, w = (int(v) for v in rng.integers(1, 9, 2))
        p = CbamParams.init(c, 2 if c % 2 == 0 else 1, int(rng.choice([1, 3, 5, 7])), rng)
        f = rng.normal(0, float(rng.choice([0.1, 1, 10])), size=(c, h, w))
        out, att = cbam_forward(Tensor(f), p)
        bad["bounds"] += not all(np.all((a > 0) & (a < 1)) for a in (att.channel, att.spatial))
        bad["attenuation"] += not np.all(np.abs(out.data) <= np.abs(f))
        perm = rng.permutation(h * w)
        g = f.reshape(c, -1)[:, perm].reshape(c, h, w)
        a = channel_attention(Tensor(f), p).data
        b = channel_attention(Tensor(g), p).data
        bad["permutation"] += not np.allclose(a, b, rtol=0, atol=1e-15)
    ok = sum(bad.values()) == 0
    criterion(ok, "100 cases each; violations " + ", ".join(f"{k} {bad[k]}" for k in
                                                            ("bounds", "attenuation", "permutation")))
    assert ok


# ---------------------------------------------------------------- 3

def _mask_iou_exact(p, g):
    inter = int(np.count_nonzero(p.mask & g.mask))
    union = int(np.count_nonzero(p.mask | g.mask))
    return Fraction(inter, union) if union else Fraction(0)


def _scene_errors(preds, gts):
    """Largest deviation between the library and the exact oracles on one scene."""
    worst = 0.0
    mismatches = 0
    half = Fraction(1, 2)
    fams = {"box": (lambda p, g: iou_box(p.box, g.box), lambda p, g: box_iou_exact(p.box, g.box)),
            "mask": (lambda p, g: iou_mask(p.mask, g.mask), _mask_iou_exact)}
    classes = sorted({x.class_id for x in preds + gts})
    for fam, (fast, exact) in fams.items():
        m = match_instances(preds, gts, fast, 0.5)
        ref = greedy_reference(preds, gts, exact, half)
        got = [None] * len(preds)
        for pi, gi in m.pairs:
            got[pi] = gi
        mismatches += got != ref
        for c in classes:
            idx = [i for i, p in enumerate(preds) if p.class_id == c]
            flags = [ref[i] is not None for i in idx]
            n_gt = sum(g.class_id == c for g in gts)
            tp = sum(flags)
            p, r = precision_recall(m.tp[c], m.fp[c], m.fn[c])
            p_ref = Fraction(tp, len(idx)) if idx else Fraction(0)
            r_ref = Fraction(tp, n_gt) if n_gt else Fraction(0)
            worst = max(worst, abs(p - p_ref), abs(r - r_ref))
            scored = [(m.scored[i][0], m.scored[i][1]) for i in idx]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                ap = average_precision(scored, n_gt)
            worst = max(worst, abs(ap - ap_exact(flags, n_gt)))
            curve = confidence_curves({c: scored}, {c: n_gt}, samples=21)[c]
            conf_flags = [(preds[i].confidence, f) for i, f in zip(idx, flags)]
            for k, t in enumerate(curve.thresholds):
                pe, re, fe = curve_point(conf_flags, n_gt, t)
                worst = max(worst, abs(curve.precision[k] - pe), abs(curve.recall[k] - re),
                            abs(curve.f1[k] - fe))
        if fam == "mask":
            ious = [iou_mask(preds[pi].mask, gts[gi].mask) for pi, gi in m.pairs]
            exact = [_mask_iou_exact(preds[pi], gts[gi]) for pi, gi in enumerate(ref) if gi is not None]
            ref_miou = sum(exact, Fraction(0)) / len(exact) if exact else Fraction(0)
            worst = max(worst, abs(miou(ious) - ref_miou))
    return float(worst), mismatches


def test_criterion_3_metrics_oracle_equivalence(criterion):
    rng = np.random.default_rng(3)
    worst, mismatches = 0.0, 0
    for _ in range(500):
        preds, gts = random_scene(rng, max_items=4)
        err, mis = _scene_errors(preds, gts)
        worst, mismatches = max(worst, err), mismatches + mis
    ok = worst <= 1e-12 and mismatches == 0
    criterion(ok, f"500 scenes; matching mismatches {mismatches}, max deviation {worst:.1e}")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_identity_evaluation(criterion):
    gts = [generate_scene(SceneSpec(season="canopy" if s % 2 else "dormant"), s)[1] for s in range(12)]
    preds = [[type(r)(r.class_id, r.polygon, 1.0) for r in recs] for recs in gts]
    rep = evaluate_records(preds, gts)
    values = []
    for row in rep.rows:
        for fam in (row.box, row.mask):
            values += [fam.precision, fam.recall, fam.map50]
        values.append(row.miou)
    ok = all(v == 1.0 for v in values)
    criterion(ok, f"{len(values)} values over {len(rep.rows)} rows; min {min(values)!r}")
    assert ok


# ---------------------------------------------------------------- 5

def test_criterion_5_pipeline_counts(criterion, tmp_path):
    # 863 scenes split 8:1:1 leaves exactly 690 for training
    generate_dataset(863, 0.5, 5, out=tmp_path / "src")
    man = read_manifest(tmp_path / "src" / "manifest.json")
    n_train = len(select(man, "train"))
    out = augment_manifest(man, tmp_path / "aug", seed=5)
    n_aug = len(select(read_manifest(tmp_path / "aug" / "manifest.json"), "train"))
    on_disk = sum(1 for it in out["items"] if it["split"] == "train"
                  and (tmp_path / "aug" / it["path"]).exists())

    seasons = Counter(it["season"] for it in generate_dataset(859, 553 / 859, 0)["items"])

    rng = np.random.default_rng(5)
    partition_ok = True
    for n in list(range(10, 60)) + [int(v) for v in rng.integers(60, 5000, 150)]:
        tr, va, te = split_dataset(range(n), int(rng.integers(0, 2**32)))
        exact = sorted(tr + va + te) == list(range(n))
        sizes = len(tr) == (8 * n) // 10 and abs(len(va) - len(te)) <= 1
        partition_ok &= exact and sizes
    ok = (n_train, n_aug, on_disk) == (690, 2070, 2070) and \
        (seasons["canopy"], seasons["dormant"]) == (553, 306) and partition_ok
    criterion(ok, f"train {n_train} -> {n_aug} ({on_disk} on disk); seasons canopy {seasons['canopy']} "
                  f"dormant {seasons['dormant']}; 8:1:1 partitions {'exact' if partition_ok else 'BROKEN'}")
    assert ok


# ---------------------------------------------------------------- 6

DORMANT_MIN = 0.50
CBAM_SLACK = 0.05
BUDGET_S = 30 * 60


def _mask_map(report_dir):
    rows = json.loads((report_dir / "report.json").read_text())["rows"]
    return next(r for r in rows if r["class"] == "All")["mask"]["map50"]


@pytest.mark.slow
def test_criterion_6_two_season_experiment(criterion, tmp_path):
    t0 = time.perf_counter()
    data = tmp_path / "data"
    assert main(["generate", "--n", "200", "--canopy-fraction", "0.5", "--seed", "42", "--out", str(data)]) == 0
    manifest = str(data / "manifest.json")
    scores = {}
    for variant, flag in (("baseline", []), ("cbam", ["--cbam"])):
        run = tmp_path / variant
        assert main(["train", "--manifest", manifest, "--epochs", "300", "--patience", "30", "--seed", "42",
                     "--out", str(run), *flag]) == 0
        for season in ("dormant", "canopy"):
            out = tmp_path / f"{variant}_{season}"
            assert main(["eval", "--checkpoint", str(run / "model.ckpt"), "--manifest", manifest,
                         "--season", season, "--out", str(out)]) == 0
            scores[variant, season] = _mask_map(out)
    elapsed = time.perf_counter() - t0
    checks = {
        "baseline dormant >= 0.50": scores["baseline", "dormant"] >= DORMANT_MIN,
        "cbam >= baseline - 0.05": scores["cbam", "dormant"] >= scores["baseline", "dormant"] - CBAM_SLACK,
        "dormant >= canopy": all(scores[v, "dormant"] >= scores[v, "canopy"] for v in ("baseline", "cbam")),
        "runtime <= 30 min": elapsed <= BUDGET_S,
    }
    ok = all(checks.values())
    detail = ("mask mAP@50 " + ", ".join(f"{v}/{s} {scores[v, s]:.3f}" for v, s in scores)
              + f"; {elapsed / 60:.1f} min; failed: " + (", ".join(k for k, v in checks.items() if not v) or "none"))
    criterion(ok, detail)
    assert ok, detail


# ---------------------------------------------------------------- 7

def test_criterion_7_profiler_exactness(criterion):
    from test_profile import CONFIGS, _random_chain

    census_ok = all(profile(build_network(c, 0).layer_specs(), (3, c.image_size, c.image_size))["params"]
                    == build_network(c, 0).param_count() for c in CONFIGS)
    single = profile([LayerSpec("conv", c_in=3, c_out=16, kernel=3, stride=1, pad=1, bias=False)], (3, 64, 64))
    closed = single["flops"] == 2 * 3 * 3 * 3 * 16 * 64 * 64 and single["params"] == 432
    rng = np.random.default_rng(7)
    broken = 0
    for _ in range(100):
        start = (int(rng.integers(1, 5)), int(rng.integers(4, 17)), int(rng.integers(4, 17)))
        a, mid = _random_chain(rng, start)
        b, _ = _random_chain(rng, mid)
        pa, pb, pab = profile(a, start), profile(b, mid), profile(a + b, start)
        broken += any(pab[k] != pa[k] + pb[k] for k in ("layers", "params", "flops"))
    ok = census_ok and closed and broken == 0
    criterion(ok, f"census {len(CONFIGS)} configs {'equal' if census_ok else 'DIFFER'}; "
                  f"single conv {single['flops']} FLOPs; additivity failures {broken}/100")
    assert ok


# ---------------------------------------------------------------- 8

INVALID = [
    lambda r: "0 " + " ".join(f"{v:.4f}" for v in r.random(7)),  # odd coordinate count
    lambda r: "1 0.1 0.2 0.3 0.4",  # two vertices
    lambda r: "0 0.1 0.1 0.5 1.5 0.9 0.2",  # outside the unit square
    lambda r: "1 0.1 abc 0.5 0.5 0.9 0.2",
    lambda r: "x 0.1 0.1 0.5 0.5 0.9 0.2",
    lambda r: "-2 0.1 0.1 0.5 0.5 0.9 0.2",
    lambda r: "0 0.1 inf 0.5 0.5 0.9 0.2",
    lambda r: "1.5 0.1 0.1 0.5 0.5 0.9 0.2",  # non-integral class
]


def _valid_line(rng):
    coords = rng.random(2 * int(rng.integers(3, 9)))
    if rng.random() < 0.3:
        coords[rng.integers(len(coords))] = rng.choice([0.0, 1.0])
    sep = str(rng.choice([" ", "  ", "\t"]))
    return sep.join([str(int(rng.integers(0, 6)))] + [repr(float(v)) for v in coords]), coords


def test_criterion_8_parser_robustness(criterion):
    rng = np.random.default_rng(8)
    missed = wrong_line = 0
    drift = 0.0
    unstable = 0
    for case in range(1000):
        lines, coords = zip(*[_valid_line(rng) for _ in range(int(rng.integers(1, 6)))])
        lines = list(lines)
        if case % 2:
            pos = int(rng.integers(0, len(lines) + 1))
            lines.insert(pos, INVALID[int(rng.integers(len(INVALID)))](rng))
            try:
                parse_labels("\n".join(lines))
                missed += 1
            except LabelParseError as err:
                wrong_line += err.line_no != pos + 1 or f"line {pos + 1}" not in str(err)
            continue
        recs = parse_labels("\n".join(lines))
        text = serialize_labels(recs)
        again = parse_labels(text)
        for rec, orig in zip(again, coords):
            drift = max(drift, float(np.max(np.abs(rec.polygon.reshape(-1) - orig))))
        unstable += serialize_labels(again) != text
    ok = missed == 0 and wrong_line == 0 and drift <= 5e-7 and unstable == 0
    criterion(ok, f"500 invalid: missed {missed}, wrong line number {wrong_line}; "
                  f"500 valid: max round-trip drift {drift:.1e}, unstable {unstable}")
    assert ok


# ---------------------------------------------------------------- 9

TINY_NET = ["--net", "channels=[4,4,4,4]", "--net", "head_hidden=8", "--net", "batch_size=8"]


def _artifacts(root):
    """All files under ``root`` with timing fields removed."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        data = p.read_bytes()
        if p.name == "report.json":
            doc = json.loads(data)
            doc.pop("timing")
            data = json.dumps(doc, sort_keys=True).encode()
        elif p.name == "history.csv":
            data = b"\n".join(b",".join(line.split(b",")[:3]) for line in data.splitlines())
        out[p.relative_to(root).as_posix()] = data
    return out


def _pipeline(root):
    assert main(["generate", "--n", "20", "--seed", "9", "--out", str(root / "data")]) == 0
    assert main(["train", "--manifest", str(root / "data" / "manifest.json"), "--cbam", "--epochs", "3",
                 "--seed", "9", "--out", str(root / "run"), *TINY_NET]) == 0
    assert main(["eval", "--checkpoint", str(root / "run" / "model.ckpt"), "--manifest",
                 str(root / "data" / "manifest.json"), "--split", "train", "--out", str(root / "eval")]) == 0
    return _artifacts(root)


def test_criterion_9_determinism(criterion, tmp_path):
    first = _pipeline(tmp_path / "p")
    shutil.rmtree(tmp_path / "p")
    second = _pipeline(tmp_path / "p")
    differ = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = not differ
    criterion(ok, f"{len(first)} artifacts from generate/train/eval; differing: {differ[:5] or 'none'}")
    assert ok
