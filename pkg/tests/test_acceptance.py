"""Acceptance suite: one or more tests per criterion, summarized at the end of the run.

Criteria 9, 10 and 12 share a single desk-scale transfer experiment (about 25
minutes on one CPU core).
"""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
import yaml

from multisat.cli import main as cli_main
from multisat.datamodel import SceneMeta
from multisat.evaluation import read_delta_file, steps_to_peak
from multisat.experiment import DeskConfig, run_desk_experiment
from multisat.loss import LossConfig, loss_oracle, multimodal_nce
from multisat.model import EncoderSpec, SegmentationNet, SegmentationSpec, adapt_input_channels
from multisat.normalize import clip_linear_scale, log_scale, normalize_s1, normalize_s2
from multisat.datamodel import Tile
from multisat.pairing import (
    Anchor,
    build_pairs,
    build_pairs_scan,
    join_downstream,
    join_downstream_scan,
    make_subsample_splits,
    write_splits,
)
from multisat.synthetic import CLASS_NAMES, SceneRecipe, gen_dataset
from multisat.trainer import OptimState, cosine_lr, lars_step, polynomial_lr

DAY = 86400


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return torch.from_numpy(x / np.linalg.norm(x, axis=1, keepdims=True))


# ---------------------------------------------------------------- criteria 1-4: loss


@pytest.mark.criterion(1, "vectorized loss equals scalar oracle on 100 batches, |d| <= 1e-9, < 10 s")
def test_c1_loss_oracle(record_property):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for b in range(100):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        cfg = LossConfig([0.05, 0.1, 1.0][b % 3])
        x, y = unit_rows(rng, n, d), unit_rows(rng, n, d)
        loss, _ = multimodal_nce(x, y, cfg)
        worst = max(worst, abs(float(loss) - loss_oracle(x, y, cfg)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max |d| = {worst:.2e}, {elapsed:.2f} s")
    assert worst <= 1e-9 and elapsed < 10


@pytest.mark.criterion(2, "N=1 loss is 0 within 1e-12")
def test_c2_single_pair():
    rng = np.random.default_rng(1)
    for tau in (0.05, 0.1, 1.0):
        for _ in range(10):
            loss, per = multimodal_nce(unit_rows(rng, 1, 7), unit_rows(rng, 1, 7), LossConfig(tau))
            assert abs(float(loss)) <= 1e-12 and abs(float(per[0])) <= 1e-12


def central_difference(f, inputs, eps=1e-5):
    grads = []
    for t in inputs:
        g = torch.zeros_like(t)
        flat, gflat = t.view(-1), g.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + eps
            up = float(f(*inputs))
            flat[i] = orig - eps
            down = float(f(*inputs))
            flat[i] = orig
            gflat[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def central_difference_at(f, tensors, coords, eps=1e-5):
    """Central differences of ``f()`` with respect to selected ``(tensor, flat index)`` entries."""
    out = torch.zeros(len(coords), dtype=torch.float64)
    for k, (t, i) in enumerate(coords):
        flat = tensors[t].view(-1)
        orig = float(flat[i])
        flat[i] = orig + eps
        up = float(f())
        flat[i] = orig - eps
        down = float(f())
        flat[i] = orig
        out[k] = (up - down) / (2 * eps)
    return out


def relative_error(analytic, numeric):
    # max-norm error relative to the max-norm of the numeric gradient
    a = torch.cat([g.reshape(-1) for g in analytic])
    n = torch.cat([g.reshape(-1) for g in numeric])
    return float((a - n).abs().max() / max(float(n.abs().max()), 1e-300))


def random_segmentation_net():
    """Small double-precision net in eval mode with random normalization statistics.

    Freshly initialized batch-norm layers have zero offsets, which puts dead
    units exactly on the ReLU kink; random statistics stand in for a trained net.
    """
    spec = EncoderSpec("tiny", 2, widths=(4, 6, 6, 6))
    net = SegmentationNet(spec, SegmentationSpec(3, atrous_rates=(1, 2), aspp_dim=6, low_level_proj=3)).double()
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.weight.uniform_(0.5, 1.5)
                m.bias.normal_(0.0, 0.2)
                m.running_mean.normal_(0.0, 0.2)
                m.running_var.uniform_(0.5, 1.5)
    return net.eval()


@pytest.mark.criterion(3, "loss and segmentation cross-entropy gradients match central differences, rel < 1e-4")
def test_c3_gradients(record_property):
    rng = np.random.default_rng(3)
    worst_loss = 0.0
    for k in range(20):
        n, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        cfg = LossConfig([0.05, 0.1, 1.0][k % 3])
        x = unit_rows(rng, n, d).requires_grad_(True)
        y = unit_rows(rng, n, d).requires_grad_(True)
        loss, _ = multimodal_nce(x, y, cfg)
        analytic = torch.autograd.grad(loss, (x, y))
        with torch.no_grad():
            numeric = central_difference(lambda a, b: multimodal_nce(a, b, cfg)[0], [x.detach().clone(), y.detach().clone()])
        worst_loss = max(worst_loss, relative_error(analytic, numeric))

    # Segmentation: every input pixel plus 200 sampled weights; the loss depends on
    # the input only weakly, so the weights keep the check well conditioned.
    worst_seg = 0.0
    for k in range(20):
        torch.manual_seed(100 + k)
        net = random_segmentation_net()
        x = torch.rand(1, 2, 16, 16, dtype=torch.float64, requires_grad=True)
        labels = torch.randint(0, 3, (1, 16, 16))
        labels[0, 0, :3] = 255
        params = [p for p in net.parameters()]
        loss = F.cross_entropy(net(x), labels, ignore_index=255)
        grads = torch.autograd.grad(loss, [x, *params])
        coords = [(0, i) for i in range(x.numel())]
        flat_sizes = [p.numel() for p in params]
        picks = rng.choice(sum(flat_sizes), 200, replace=False)
        offsets = np.cumsum([0] + flat_sizes)
        for j in picks:
            t = int(np.searchsorted(offsets, j, side="right") - 1)
            coords.append((t + 1, int(j - offsets[t])))
        tensors = [x.detach(), *[p.detach() for p in params]]
        analytic = torch.tensor([float(grads[t].reshape(-1)[i]) for t, i in coords], dtype=torch.float64)
        with torch.no_grad():
            numeric = central_difference_at(lambda: F.cross_entropy(net(tensors[0]), labels, ignore_index=255),
                                            tensors, coords)
        worst_seg = max(worst_seg, relative_error([analytic], [numeric]))
    record_property("detail", f"max rel err loss {worst_loss:.1e}, segmentation {worst_seg:.1e}")
    assert worst_loss < 1e-4 and worst_seg < 1e-4


@pytest.mark.criterion(4, "modality swap invariance and permutation equivariance")
def test_c4_symmetry(record_property):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(1, 9)), int(rng.integers(1, 17))
        x, y = unit_rows(rng, n, d), unit_rows(rng, n, d)
        a, pa = multimodal_nce(x, y)
        b, _ = multimodal_nce(y, x)
        assert abs(float(a) - float(b)) <= 1e-12
        perm = torch.from_numpy(rng.permutation(n))
        _, pp = multimodal_nce(x[perm], y[perm])
        worst = max(worst, float((pp - pa[perm]).abs().max()))
    record_property("detail", f"max per-pair permutation difference {worst:.1e}")
    # equal up to the summation order inside logsumexp
    assert worst <= 1e-12


# ---------------------------------------------------------------- criterion 5: normalization


@pytest.mark.criterion(5, "normalization golden values and scalar S2 oracle within 1e-6")
def test_c5_normalization():
    assert list(clip_linear_scale(np.array([-20.0, 5.0, -7.5]), -20, 5)) == [0.0, 255.0, 127.5]
    s1 = normalize_s1(Tile("S1", np.array([[[-20.0, 5.0]], [[-7.5, -7.5]]], np.float32), 0, 0, 0)).pixels
    assert s1[0, 0, 0] == 0.0 and s1[0, 0, 1] == 255.0 and s1[1, 0, 0] == 127.5
    rng = np.random.default_rng(5)
    for _ in range(5):
        px = rng.uniform(-50, 12000, (16, 16, 3)).astype(np.float32)
        out = normalize_s2(Tile("S2", px, 0, 0, 0)).pixels
        ref = np.vectorize(lambda v: 255 * min(max(math.log1p(max(v, 0.0)) / math.log(10001), 0.0), 1.0))(
            px.astype(np.float64))
        assert np.max(np.abs(out - ref)) <= 1e-6
    assert log_scale(np.array([99.0]))[0][0] == pytest.approx(127.49, abs=0.01)


# ---------------------------------------------------------------- criterion 6: pairing


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n_scenes = int(rng.integers(200, 1001))
    grid = [(round(float(a), 6), round(float(b), 6)) for a, b in rng.uniform(-70, 70, (30, 2))]
    scenes = []
    for i in range(n_scenes):
        lat, lon = grid[rng.integers(len(grid))]
        mod = "S1" if rng.random() < 0.5 else "S2"
        t = float(rng.integers(0, 240) * DAY // 2)
        cloud = float(rng.choice([0.0, 0.15, rng.uniform(0, 0.4)])) if mod == "S2" else 0.0
        scenes.append(SceneMeta(f"{mod}_{rng.integers(10**6):06d}_{i}", mod, lat, lon, t, cloud, f"{i}.bin"))
    anchors = []
    for _ in range(int(rng.integers(50, 300))):
        lat, lon = grid[rng.integers(len(grid))]
        if rng.random() < 0.2:
            lat += float(rng.choice([-2e-6, -1e-6, -5e-7, 5e-7, 1e-6, 2e-6]))
        anchors.append(Anchor(lat, lon, float(rng.integers(0, 130) * DAY // 2 + rng.choice([0, 1, -1]))))
    return ([s for s in scenes if s.modality == "S1"], [s for s in scenes if s.modality == "S2"], anchors)


def pair_ids(pairs):
    return {(p.anchor, p.s1.scene_id, p.s2.scene_id) for p in pairs}


@pytest.mark.criterion(6, "pairing and downstream join equal brute force on 50 instances; adversarial rules")
def test_c6_pairing_oracle(record_property):
    total = 0
    for seed in range(50):
        s1, s2, anchors = random_instance(seed)
        fast, slow = build_pairs(s1, s2, anchors), build_pairs_scan(s1, s2, anchors)
        assert pair_ids(fast) == pair_ids(slow) and len(fast) == len(slow)
        jf, js = join_downstream(s2, s1), join_downstream_scan(s2, s1)
        assert {(j.s2.scene_id, j.s1.scene_id) for j in jf} == {(j.s2.scene_id, j.s1.scene_id) for j in js}
        total += len(fast)
    record_property("detail", f"{total} pairs matched")


def scene(sid, mod, t, cloud=0.0):
    return SceneMeta(sid, mod, 1.0, 2.0, float(t), cloud, sid)


ANCHOR = Anchor(1.0, 2.0, 100.0 * DAY)
S1_OK = [scene("s1", "S1", 95 * DAY)]
S2_OK = [scene("s2", "S2", 95 * DAY, 0.0)]


@pytest.mark.criterion(6, "pairing and downstream join equal brute force on 50 instances; adversarial rules")
def test_c6_thirty_day_rule():
    edge = [scene("edge", "S1", 70 * DAY)]
    late = [scene("old", "S1", 70 * DAY - 1)]
    assert [p.s1.scene_id for p in build_pairs(edge, S2_OK, [ANCHOR])] == ["edge"]
    assert build_pairs(late, S2_OK, [ANCHOR]) == []


@pytest.mark.criterion(6, "pairing and downstream join equal brute force on 50 instances; adversarial rules")
def test_c6_past_only_rule():
    s2 = [scene("future", "S2", 100 * DAY + 1), scene("past", "S2", 80 * DAY)]
    assert [p.s2.scene_id for p in build_pairs(S1_OK, s2, [ANCHOR])] == ["past"]
    assert build_pairs(S1_OK, [scene("future", "S2", 100 * DAY + 1)], [ANCHOR]) == []


@pytest.mark.criterion(6, "pairing and downstream join equal brute force on 50 instances; adversarial rules")
def test_c6_closest_rule():
    s1 = [scene("far", "S1", 75 * DAY), scene("near", "S1", 99 * DAY), scene("mid", "S1", 90 * DAY)]
    assert [p.s1.scene_id for p in build_pairs(s1, S2_OK, [ANCHOR])] == ["near"]


@pytest.mark.criterion(6, "pairing and downstream join equal brute force on 50 instances; adversarial rules")
def test_c6_cloud_rule():
    s2 = [scene("cloudy", "S2", 99 * DAY, 0.16), scene("clear", "S2", 80 * DAY, 0.15)]
    assert [p.s2.scene_id for p in build_pairs(S1_OK, s2, [ANCHOR])] == ["clear"]
    assert build_pairs(S1_OK, [scene("cloudy", "S2", 99 * DAY, 0.150001)], [ANCHOR]) == []


# ---------------------------------------------------------------- criterion 7: optimization


@pytest.mark.criterion(7, "schedules match closed forms; LARS without adaptation is GD; adapter is the exact mean")
def test_c7_schedules_and_optimizers():
    for base, total in ((2.0, 160_000), (0.48, 1000), (1.0, 7)):
        assert abs(cosine_lr(0, total, base) - base) <= 1e-12
        assert abs(cosine_lr(total, total, base)) <= 1e-12
        assert abs(cosine_lr(total / 2, total, base) - base / 2) <= 1e-12
        assert abs(polynomial_lr(0, total, base) - base) <= 1e-12
        assert abs(polynomial_lr(total, total, base)) <= 1e-12
        assert abs(polynomial_lr(total / 2, total, base) - base * 0.5 ** 0.9) <= 1e-12

    g = torch.Generator().manual_seed(7)
    w = {"conv": torch.randn(4, 3, 3, 3, generator=g, dtype=torch.float64),
         "bias": torch.randn(4, generator=g, dtype=torch.float64)}
    grads = {k: torch.randn(v.shape, generator=g, dtype=torch.float64) for k, v in w.items()}
    expected = {k: w[k] - 0.1 * grads[k] for k in w}
    lars_step(w, grads, OptimState(), 0.1, 0.0, momentum=0.0, adapt=False)
    for k in w:
        assert torch.equal(w[k], expected[k])

    src = torch.randn(8, 3, 3, 3, generator=g, dtype=torch.float64)
    out = adapt_input_channels(src, 2)
    assert torch.equal(out[:, 0], out[:, 1])
    assert torch.allclose(out[:, 0], (src[:, 0] + src[:, 1] + src[:, 2]) / 3, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- criterion 8: sub-sampling


SPLIT_SCRIPT = """
import sys
from multisat.pairing import make_subsample_splits, write_splits
ids = [f"scene{i:04d}" for i in range(1000)]
write_splits(make_subsample_splits(ids, {0.01: 5, 0.1: 5}, 11), sys.argv[1])
"""


@pytest.mark.criterion(8, "1%/10% sets are disjoint, sized and bitwise reproducible across runs")
def test_c8_subsampling(tmp_path):
    ids = [f"scene{i:04d}" for i in range(1000)]
    plans = make_subsample_splits(ids, {0.01: 5, 0.1: 5}, 11)
    for fraction, size in ((0.01, 10), (0.1, 100)):
        sets = [set(p.member_ids) for p in plans if p.fraction == fraction]
        assert len(sets) == 5 and all(len(s) == size for s in sets)
        assert all(not (a & b) for i, a in enumerate(sets) for b in sets[i + 1:])
    write_splits(plans, tmp_path / "here.tsv")
    for run in ("a", "b"):
        subprocess.run([sys.executable, "-c", SPLIT_SCRIPT, str(tmp_path / f"{run}.tsv")], check=True)
    here = (tmp_path / "here.tsv").read_bytes()
    assert here == (tmp_path / "a.tsv").read_bytes() == (tmp_path / "b.tsv").read_bytes()


# ---------------------------------------------------------------- criteria 9, 10, 12: desk experiment

DESK_PAIRS = 2000
DESK_BUDGET_S = 30 * 60


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    t0 = time.time()
    recipe = SceneRecipe(size=64)
    gen_dataset(recipe, DESK_PAIRS, 1.0, root / "data")
    report = run_desk_experiment(DeskConfig(), root / "data", root / "run", list(CLASS_NAMES),
                                 recipe.optical_distinct_only_classes())
    return report, root / "run", time.time() - t0, recipe


@pytest.mark.criterion(9, "desk transfer: multimodal >= SimCLR >= random, multimodal - random >= 5 mIoU points")
def test_c9_transfer_ordering(desk, record_property):
    report, run_dir, seconds, _ = desk
    mm = report.mean("multimodal_ckpt", 0.01)
    sc = report.mean("simclr_ckpt", 0.01)
    rnd = report.mean("random", 0.01)
    record_property("detail", f"val mIoU multimodal {mm * 100:.2f}, simclr {sc * 100:.2f}, random {rnd * 100:.2f}; "
                              f"{seconds / 60:.1f} min")
    print((run_dir / "table_mean_iou.tsv").read_text())
    assert mm >= sc >= rnd
    assert (mm - rnd) * 100 >= 5.0
    assert seconds <= DESK_BUDGET_S


@pytest.mark.criterion(10, "optical-distinct-only classes: mean IoU delta (multimodal - SimCLR) >= 0; report emitted")
def test_c10_complementary_classes(desk, record_property):
    report, run_dir, _, recipe = desk
    classes = recipe.optical_distinct_only_classes()
    delta = read_delta_file(run_dir / "class_delta.tsv")
    assert delta == report.delta and (run_dir / "class_delta.png").exists()
    mean_delta = float(np.mean([delta[c] for c in classes]))
    record_property("detail", "delta " + ", ".join(f"{CLASS_NAMES[c]} {delta[c] * 100:+.2f}" for c in classes))
    assert mean_delta >= 0


@pytest.mark.criterion(12, "steps_to_peak reported for every fine-tuning run")
def test_c12_steps_to_peak(desk, record_property):
    report, run_dir, _, _ = desk
    rows = [line.split("\t") for line in (run_dir / "steps_to_peak.tsv").read_text().splitlines()[1:]]
    assert len(rows) == len(report.records) == 9
    for row, rec in zip(rows, report.records):
        assert int(row[3]) == rec.steps_to_peak == steps_to_peak(rec.curve)
    by_init = {}
    for rec in report.records:
        by_init.setdefault(rec.init, []).append(rec.steps_to_peak)
    record_property("detail", ", ".join(f"{k} {np.mean(v):.0f}" for k, v in by_init.items()))


# ---------------------------------------------------------------- criterion 11: determinism

TINY = {
    "synthetic": {"n_pairs": 60, "recipe": {"size": 16}},
    "pretrain": {"batch_size": 8, "total_steps": 4, "crop_size": 12, "projection_dim": 16, "ckpt_every": 2,
                 "encoder": {"profile": "tiny", "widths": [8, 8, 16, 16]}},
    "finetune": {"batch_size": 2, "crop_size": 12, "total_steps": 4, "eval_every": 2,
                 "encoder": {"profile": "tiny", "widths": [8, 8, 16, 16]}},
    "eval": {"seeds": [0, 1], "fraction": 0.1},
}


@pytest.mark.criterion(11, "identical frozen configs give bitwise-identical checkpoints and result tables")
def test_c11_determinism(tmp_path):
    (tmp_path / "cfg.yaml").write_text(yaml.safe_dump(TINY))
    assert cli_main(["synth", "--config", str(tmp_path / "cfg.yaml"), "--out", str(tmp_path / "data")]) == 0
    data = ["--data-root", str(tmp_path / "data")]
    assert cli_main(["pretrain", "--config", str(tmp_path / "cfg.yaml"), *data, "--out", str(tmp_path / "pre")]) == 0
    first = tmp_path / "pre" / "pretrain-000"
    # the second run reads only the first run's frozen config
    assert cli_main(["pretrain", "--config", str(first / "config.yaml"), "--out", str(tmp_path / "pre")]) == 0
    second = tmp_path / "pre" / "pretrain-001"
    ckpts = sorted(p.name for p in first.glob("*.ckpt"))
    assert ckpts == sorted(p.name for p in second.glob("*.ckpt")) and len(ckpts) == 3
    for name in ckpts:
        assert (first / name).read_bytes() == (second / name).read_bytes()

    for _ in range(2):
        assert cli_main(["eval", "--config", str(tmp_path / "cfg.yaml"), *data, "--out", str(tmp_path / "ev")]) == 0
    a, b = tmp_path / "ev" / "eval-000", tmp_path / "ev" / "eval-001"
    for name in ("table_mean_iou.tsv", "table_overall_accuracy.tsv", "table_water_iou.tsv",
                 "class_delta.tsv", "steps_to_peak.tsv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
