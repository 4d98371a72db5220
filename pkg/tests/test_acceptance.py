"""Acceptance suite: one test per criterion, each at its stated tolerance.

Run with `pytest tests/test_acceptance.py -v -s` to see one pass/fail line
per criterion. The synthetic-overfit training pair runs once as a shared
fixture (two identical ~6-minute runs) and backs criteria 6 and 8.
"""

import os
import time

import numpy as np
import pytest

from hyattnet import ops
from hyattnet.attention import BiLevelRoutingAttention, BraConfig, dense_attention_reference
from hyattnet.checks import run_end_to_end_check, run_unit_checks
from hyattnet.data import DatasetManifest, ManifestSample, load_dataset, load_manifest, save_manifest
from hyattnet.flops import analytic_flops, verify_flop_claim
from hyattnet.heatmaps import (LandmarkSet, combined_loss, decode_heatmap,
                               encode_heatmap, mre, sdr)
from hyattnet.network import (HeatmapStack, HyattNet, load_checkpoint,
                              save_checkpoint, toy_config)
from hyattnet.synthetic import SyntheticSpec, generate_synthetic
from hyattnet.tensor import Tensor, default_dtype
from hyattnet.training import TrainConfig, _evaluate_arrays, train

OVERFIT_ITERATIONS = 300
OVERFIT_BATCH = 4
OVERFIT_SECONDS_LIMIT = 600.0


def _report(line):
    print(f"\n[acceptance] {line}")


@pytest.fixture(scope="module")
def overfit_runs(tmp_path_factory):
    """Two identical 300-iteration training runs on the synthetic toy set."""
    root = tmp_path_factory.mktemp("overfit")
    data_dir = root / "data"
    spec = SyntheticSpec(count=8, image_size=128, num_landmarks=4, noise=0.02, seed=7)
    generate_synthetic(spec, data_dir)

    runs = []
    for name in ("run1", "run2"):
        cfg = TrainConfig(
            model=toy_config(seed=3),
            manifest=str(data_dir / "manifest.json"),
            batch_size=OVERFIT_BATCH,
            iterations=OVERFIT_ITERATIONS,
        )
        started = time.monotonic()
        result = train(cfg, root / name)
        runs.append((result, time.monotonic() - started))
    return root, cfg, runs


class TestCriterion1DenseOracle:
    def test_dense_attention_equivalence(self):
        started = time.monotonic()
        draws = 0
        worst = 0.0
        with default_dtype(np.float64):
            for seed in range(10):
                rng = np.random.default_rng(1000 + seed)
                grid = int(rng.choice([1, 2, 4]))
                heads = int(rng.choice([1, 2, 4]))
                channels = int(rng.choice([8, 16]))
                cfg = BraConfig(channels=channels, region_grid=grid,
                                topk=grid * grid, heads=heads)
                layer = BiLevelRoutingAttention(cfg, rng)
                side = int(rng.choice([8, 12, 16]))
                side -= side % grid
                x = Tensor(rng.standard_normal((2, channels, side, side)))
                routed = layer.forward(x).data
                dense = dense_attention_reference(x.data, layer)
                scale = np.maximum(np.abs(routed), np.abs(dense))
                rel = np.abs(routed - dense) / np.where(scale > 0, scale, 1.0)
                worst = max(worst, float(rel.max()))
                draws += 1
        elapsed = time.monotonic() - started
        assert draws >= 10
        assert worst < 1e-5, f"max relative error {worst:.3e}"
        assert elapsed < 60.0, f"dense-oracle comparison took {elapsed:.1f}s"
        _report(f"criterion 1 PASS: dense-attention equivalence on {draws} draws, "
                f"max relative error {worst:.2e} (< 1e-5), {elapsed:.1f}s")


class TestCriterion2GradientSuite:
    def test_unit_ops_and_end_to_end(self):
        started = time.monotonic()
        unit = run_unit_checks(extended=True)
        failures = [r for r in unit if not r.passed]
        assert not failures, "failed: " + ", ".join(r.line() for r in failures)

        e2e = run_end_to_end_check()
        assert e2e.passed, e2e.line()
        elapsed = time.monotonic() - started
        assert elapsed < 300.0, f"gradient suite took {elapsed:.1f}s"
        worst_unit = max(r.max_error for r in unit)
        _report(f"criterion 2 PASS: {len(unit)} unit ops < 1e-5 in extended precision "
                f"(worst {worst_unit:.2e}); end-to-end toy network {e2e.max_error:.2e} "
                f"< 1e-2; {elapsed:.1f}s")


class TestCriterion3HeatmapCodec:
    def test_roundtrip_and_center_value(self):
        rng = np.random.default_rng(42)
        size = 64
        failures = 0
        total = 0
        for sigma in (2.0, 4.0):
            margin = int(3 * sigma)
            for peak_normalize in (True, False):
                points = rng.integers(margin, size - margin, size=(1000, 2)).astype(float)
                for start in range(0, 1000, 200):
                    chunk = points[start:start + 200]
                    maps = encode_heatmap(chunk, (size, size), sigma, peak_normalize)
                    decoded = decode_heatmap(maps)
                    failures += int((decoded.points != chunk).any(axis=1).sum())
                    total += len(chunk)
        assert failures == 0, f"{failures} of {total} roundtrips failed"

        center = encode_heatmap(np.array([[32.0, 32.0]]), (64, 64), 2.0,
                                peak_normalize=False).data[0, 32, 32]
        expected = 1.0 / (np.sqrt(2.0 * np.pi) * 2.0)
        assert abs(center - expected) < 1e-6
        _report(f"criterion 3 PASS: decode(encode) identity on {total} landmarks "
                f"(0 failures); sigma=2 center value {center:.6f} matches "
                f"1/(sqrt(2*pi)*2) within 1e-6")


class TestCriterion4MetricOracles:
    def test_mre_sdr_against_loop_oracles(self):
        rng = np.random.default_rng(7)
        checked = 0
        for _ in range(1000):
            n = int(rng.integers(1, 12))
            pred = rng.uniform(0, 100, size=(n, 2))
            gt = rng.uniform(0, 100, size=(n, 2))
            value, std, r = mre(LandmarkSet(pred), LandmarkSet(gt))
            r_loop = []
            for i in range(n):
                dx = pred[i, 0] - gt[i, 0]
                dy = pred[i, 1] - gt[i, 1]
                r_loop.append(np.sqrt(dx * dx + dy * dy))
            assert list(r) == r_loop
            assert value == np.mean(r_loop)
            thresholds = sorted(rng.uniform(0.5, 120, size=4))
            table = sdr(r, thresholds)
            for z in thresholds:
                assert table[z] == sum(1 for e in r_loop if e < z) / n * 100.0
            checked += 1

        worked = sdr(np.array([1.0, 2.5, 3.5]), [2.0, 2.5, 3.0, 4.0])
        got = [round(worked[z], 2) for z in (2.0, 2.5, 3.0, 4.0)]
        assert got == [33.33, 33.33, 66.67, 100.0]
        _report(f"criterion 4 PASS: mre/sdr equal loop oracles on {checked} random "
                f"point sets; worked example {got} under strict '<'")


class TestCriterion5LossArithmetic:
    def test_weighted_combination_and_zero_condition(self):
        # fabricated per-head squared-error levels 0.1 / 0.2 / 0.3
        heads = []
        for level, hw in zip((0.1, 0.2, 0.3), ((4, 4), (8, 8), (16, 16))):
            heads.append(Tensor(np.full((1, 1) + hw, np.sqrt(level))))
        stack = HeatmapStack(*heads)
        far_away = np.zeros((1, 1, 2)) - 1e6  # targets ~ exactly 0 on the grid
        loss = combined_loss(stack, far_away, (16, 16), (2.0, 2.0, 4.0), (1.0, 3.0, 3.0))
        assert float(loss) == pytest.approx(1.6, abs=1e-6)

        points = np.array([[[8.0, 8.0], [3.0, 12.0]]])
        exact_heads = []
        from hyattnet.heatmaps import rescale_grid_points
        for scale, sigma in ((8, 2.0), (4, 2.0), (1, 4.0)):
            h, w = 32 // scale, 32 // scale
            scaled = rescale_grid_points(points[0], (32, 32), (h, w))
            exact_heads.append(Tensor(encode_heatmap(scaled, (h, w), sigma, True).data[None]))
        exact = HeatmapStack(*exact_heads)
        zero_loss = combined_loss(exact, points, (32, 32), (2.0, 2.0, 4.0), (1.0, 3.0, 3.0))
        assert float(zero_loss) == 0.0

        perturbed = HeatmapStack(
            exact_heads[0],
            Tensor(exact_heads[1].data + 1e-3),
            exact_heads[2],
        )
        nonzero = combined_loss(perturbed, points, (32, 32), (2.0, 2.0, 4.0), (1.0, 3.0, 3.0))
        assert float(nonzero) > 0.0
        _report("criterion 5 PASS: combined loss reproduces 0.1 + 3*0.2 + 3*0.3 = 1.6 "
                "and is zero exactly when every head matches its target")


class TestCriterion6SyntheticOverfit:
    def test_overfit_reaches_two_pixels(self, overfit_runs):
        root, cfg, runs = overfit_runs
        result, elapsed = runs[0]
        params = result.net.parameter_count()
        assert params <= 500_000, f"{params} parameters exceed the 0.5M budget"
        assert elapsed < OVERFIT_SECONDS_LIMIT, f"run took {elapsed:.0f}s"

        _, images, landmarks, spacings = load_dataset(cfg.manifest)
        report = _evaluate_arrays(result.net, images, landmarks, spacings,
                                  (2.0, 2.5, 3.0, 4.0))
        assert report.mre < 2.0, f"mean pixel error {report.mre:.3f} px"

        ratio = result.final_loss / result.initial_loss
        assert ratio < 0.05, f"final/initial loss ratio {ratio:.4f}"

        curve1 = open(runs[0][0].metrics_path, "rb").read()
        curve2 = open(runs[1][0].metrics_path, "rb").read()
        assert curve1 == curve2, "loss curves differ between identical runs"
        _report(f"criterion 6 PASS: overfit to {report.mre:.3f} px mean error "
                f"(< 2 px) with {params} params in {elapsed / 60:.1f} min; "
                f"loss {result.initial_loss:.4f} -> {result.final_loss:.4f} "
                f"({100 * ratio:.1f}% < 5%); loss curve bitwise-reproducible")


class TestCriterion7FlopClaim:
    def test_counters_match_analytic_and_ratio_exact(self):
        cfg = toy_config(seed=0)
        report, counted, mismatches = verify_flop_claim(cfg)
        assert mismatches == [], f"instrumented != analytic: {mismatches}"
        for row in report.stages:
            grid_sq = row.region_grid ** 2
            assert row.bra_macs * grid_sq == row.dense_macs * row.topk
            assert row.ratio == row.topk / grid_sq
        stage1 = report.stages[0]
        assert stage1.region_grid ** 2 == 16 and stage1.topk == 4
        assert stage1.ratio == 0.25
        _report("criterion 7 PASS: instrumented token-attention MACs equal analytic "
                "counts on all 5 stages; ratio k/S^2 exact (stage 1: 4/16 = 0.25)")


class TestCriterion8DeterminismPersistence:
    def test_checkpoints_and_roundtrips(self, overfit_runs, tmp_path):
        root, cfg, runs = overfit_runs
        bytes1 = open(runs[0][0].checkpoint_path, "rb").read()
        bytes2 = open(runs[1][0].checkpoint_path, "rb").read()
        assert bytes1 == bytes2, "identical runs produced different checkpoints"

        loaded = load_checkpoint(runs[0][0].checkpoint_path)
        resaved = tmp_path / "resaved.hyatt"
        save_checkpoint(loaded, resaved)
        assert resaved.read_bytes() == bytes1, "save->load->save changed bytes"

        manifest_path = os.path.join(os.path.dirname(cfg.manifest), "manifest.json")
        first = tmp_path / "m1.json"
        second = tmp_path / "m2.json"
        save_manifest(load_manifest(manifest_path), first)
        save_manifest(load_manifest(first), second)
        assert first.read_bytes() == second.read_bytes()
        _report("criterion 8 PASS: identical runs give byte-identical checkpoints; "
                "checkpoint save->load->save and manifest write->read->write are "
                "byte-identical")
