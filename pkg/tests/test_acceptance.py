"""Acceptance criteria 1-9, each timed against its budget.

Every test prints one ``criterion N: PASS|FAIL`` line; the summary section at
the end of the pytest run repeats them in order.
"""

import itertools

import numpy as np
import pytest

import oracles
from builtup.changedet import growth_mask_p95, polygon_area, vectorize_8conn, volume_delta
from builtup.config import PipelineConfig
from builtup.fixtures import SceneSpec, annual_layers, noisy_spec, synth_timeseries, write_scene
from builtup.grid import GridSpec, QuadId, downsample_average, quad_bounds, quad_for_point
from builtup.metrics import (
    detection_metrics,
    height_macro_f1,
    monotonicity_auc,
    regression_metrics,
    stability_summary,
    window_signals,
)
from builtup.orchestrator import (
    Manifest,
    WorkItem,
    output_path,
    postprocess_stack,
    read_log_records,
    resume_pending,
    run_pipeline,
    shard_manifest,
)
from builtup.postproc import (
    MaskLayers,
    TimeSeriesStack,
    UdmQuad,
    enforce_agreement,
    mask_uninhabitable,
    rolling_aggregate,
)
from builtup.projection import ORIGIN_SHIFT as HALF_EXTENT
from builtup.projection import inverse
from builtup.raster import QuadRaster, read_raster, resample_bilinear, write_raster
from builtup.trainmath import LossParams, bounded_loss, bounded_loss_grad, hard_sigmoid, huber

# value of the +-0.005 step signal under the 100-point trapezoid over [0, 0.01]:
# the curve is 0 up to tau_49 and 1 from tau_50, so the area is 49.5 / 99
HALF_STEP_AUC = 0.5


def test_c1_algorithm1_oracle(criterion):
    with criterion(1, "rolling aggregation equals the scalar transcription on 2500 cases", 1.0):
        vals = [0.0, 1 / 255, 0.1, 0.5, 1.0]
        clar = [1.0, 3.4, 3.5, 4.0]
        cases = [(v, c) for v in itertools.product(vals, repeat=4) for c in clar]
        assert len(cases) == 2500
        n = len(cases)
        arr = np.array([v for v, _ in cases], np.float32).T.reshape(4, 1, n)
        clarity = np.array([[c for _, c in cases]])
        spec = GridSpec(0.0, 0.0, 1.0, n, 1)
        stack = TimeSeriesStack([QuadRaster(spec, arr[i]) for i in range(4)], clarity)
        got = rolling_aggregate(stack, "density").data[0, 0]
        for (v, c), g in zip(cases, got):
            want = oracles.rolling_vote_pixel([float(np.float32(x)) for x in v], c)
            assert g == np.float32(want), (v, c, g, want)


def test_c2_loss_numerics(criterion):
    with criterion(2, "hard sigmoid / Huber boundaries and 1e4 finite-difference gradients", 5.0):
        assert hard_sigmoid(-3.0) == 0.0 and hard_sigmoid(3.0) == 1.0
        delta = 0.7
        p = LossParams(delta)
        quad_branch = 0.5 * delta**2
        lin_branch = delta * (delta - 0.5 * delta)
        assert abs(quad_branch - lin_branch) < 1e-12
        assert abs(huber(0.0, delta, p) - quad_branch) < 1e-12
        assert abs(huber(1.0, 1.0 - delta, p) - lin_branch) < 1e-12

        rng = np.random.default_rng(2024)
        h = 1e-5
        checked = 0
        while checked < 10_000:
            x, y = rng.uniform(-5, 5), rng.uniform(0, 1)
            # skip the hard-sigmoid corners and the Huber switch point
            if abs(abs(x) - 3) <= 1e-3 or abs(abs(y - hard_sigmoid(x)) - delta) <= 1e-3:
                continue
            fd = (bounded_loss(y, x + h, p) - bounded_loss(y, x - h, p)) / (2 * h)
            assert abs(bounded_loss_grad(y, x, p) - fd) <= 1e-5, (x, y)
            checked += 1


def test_c3_postprocessing_invariants(criterion):
    with criterion(3, "masking and agreement invariants on 100 random 64x64 fixtures", 5.0):
        rng = np.random.default_rng(3)
        spec = GridSpec(0.0, 0.0, 1.0, 64, 64)
        for _ in range(100):
            data = rng.random((2, 64, 64)).astype(np.float32)
            data[:, rng.random((64, 64)) < 0.05] = -1.0
            pred = QuadRaster(spec, data)
            gsw = rng.integers(0, 11, (64, 64))
            dem = rng.uniform(4800, 5400, (64, 64))
            dem[rng.random((64, 64)) < 0.05] = 5100.0
            out = mask_uninhabitable(pred, MaskLayers(gsw, dem)).data
            water = np.isin(gsw, [1, 2, 4, 5, 7, 8])
            high = dem > 5100
            should = (water | high)[None] & (data != -1)
            assert np.all(out[should] == 0)
            assert np.array_equal(out[~should], data[~should])

            d = rng.random((64, 64)) * (rng.random((64, 64)) < 0.6)
            hm = rng.uniform(0, 60, (64, 64)) * (rng.random((64, 64)) < 0.6)
            d[rng.random((64, 64)) < 0.01] = 0.001
            d_r = QuadRaster(spec, d.astype(np.float32))
            h_r = QuadRaster(spec, hm.astype(np.float32))
            d2, h2 = enforce_agreement(d_r, h_r)
            dd, hh = d2.data[0].astype(np.float64), h2.data[0].astype(np.float64)
            assert np.all(hh[dd > 0] >= np.float32(2.4))
            assert np.all(hh[dd == 0] == 0)
            assert np.all(dd[hh > 0] >= np.float32(2 / 255))
            d3, h3 = enforce_agreement(d2, h2)
            assert np.array_equal(d3.data, d2.data) and np.array_equal(h3.data, h2.data)


def test_c4_metric_oracles(criterion):
    with criterion(4, "metrics equal scalar oracles on 50 multi-year 16x16 fixtures", 10.0):
        rng = np.random.default_rng(4)
        for _ in range(50):
            years = 4
            ref = [rng.random((16, 16)) * (rng.random((16, 16)) < 0.5) for _ in range(years)]
            pred = [np.clip(r + rng.normal(0, 0.1, (16, 16)), 0, 1) for r in ref]
            for p, r in zip(pred, ref):
                rep = detection_metrics(p, r, 0.05, 0.01)
                counts = oracles.confusion(p.tolist(), r.tolist(), 0.05, 0.01)
                assert (rep.tp, rep.fp, rep.fn, rep.tn) == counts
                prf = oracles.prf(*counts)
                assert all(abs(a - b) <= 1e-12 for a, b in zip((rep.precision, rep.recall, rep.f1, rep.accuracy), prf))
                reg = regression_metrics(p, r)
                mae, r2 = oracles.regression(p.tolist(), r.tolist())
                assert abs(reg.mae_pos - mae) <= 1e-12 and abs(reg.r2 - r2) <= 1e-12
                hp, hr = p * 40, r * 40
                assert abs(height_macro_f1(hp, hr).macro_f1 - oracles.height_f1(hp.tolist(), hr.tolist())) <= 1e-12
            sig = window_signals(pred, 3)
            want = oracles.window_means([y.tolist() for y in pred], 3)
            got = {(x.window_id[1], x.window_id[2]): x.values for x in sig}
            assert got.keys() == want.keys()
            assert all(abs(a - b) <= 1e-12 for key in want for a, b in zip(got[key], want[key]))
            vals = [s.values for s in sig]
            corr, std = oracles.stability(vals)
            rep = stability_summary(sig)
            assert abs(rep.corr_median - corr) <= 1e-12 and abs(rep.diff_std - std) <= 1e-12
            assert abs(monotonicity_auc(sig) - oracles.mono_auc(vals)) <= 1e-9


def test_c5_auc_anchors(criterion):
    with criterion(5, "monotonicity AUC anchors 1, 0 and the half-step value", 1.0):
        rng = np.random.default_rng(5)
        mono = np.sort(rng.random((200, 5)), axis=1)
        mono[::2] = mono[::2, ::-1]
        assert abs(monotonicity_auc(mono) - 1.0) <= 1e-9
        alt = np.tile([0.3, 0.32, 0.3, 0.32, 0.3], (50, 1))
        assert monotonicity_auc(alt) == 0.0
        step = [(0.0, 0.005, 0.0, 0.005)]
        assert abs(oracles.mono_auc(step) - HALF_STEP_AUC) <= 1e-12
        assert abs(monotonicity_auc(step) - HALF_STEP_AUC) <= 1e-9


def test_c6_temporal_improvement(criterion):
    with criterion(6, "post-processed AUC >= raw and diff_std <= raw on 10 scenes, k in 3/7/10", 60.0):
        cfg = PipelineConfig()
        for seed in range(10):
            sc = synth_timeseries(noisy_spec(seed), 16)
            masks = MaskLayers(sc.gsw.data[0], sc.dem.data[0])
            q4 = [i for i in range(3, 16) if sc.quarters[i].endswith("q4")]
            post = [
                postprocess_stack(sc.predictions[i - 3 : i + 1], UdmQuad.from_raster(sc.udm[i]), masks, cfg)
                for i in q4
            ]
            raw_years = annual_layers(sc.predictions, sc.quarters)
            post_years = annual_layers(post, [sc.quarters[i] for i in q4])
            assert len(raw_years) == len(post_years) == 4
            for k in (3, 7, 10):
                raw, pp = window_signals(raw_years, k), window_signals(post_years, k)
                assert monotonicity_auc(pp) >= monotonicity_auc(raw), (seed, k)
                assert stability_summary(pp).diff_std <= stability_summary(raw).diff_std, (seed, k)


def test_c7_orchestration(criterion, tmp_path):
    with criterion(7, "shard partition, 100-trial crash-resume fuzz, 1 vs 8 workers", 120.0):
        pool = [WorkItem(QuadId(i % 2048, i // 2048), "2023q4") for i in range(1000)]
        index = {it: i for i, it in enumerate(pool)}
        for n in range(0, 1001):
            m = Manifest(pool[:n])
            for world in range(1, 18):
                total = 0
                for rank in range(world):
                    got = [index[it] for it in shard_manifest(m, world, rank).items]
                    assert got == list(range(rank, n, world))
                    total += len(got)
                assert total == n

        spec = SceneSpec(seed=7, size=16, noise_sigma=0.05, false_positive=0.05, cloud_fraction=0.05)
        items = []
        for q in range(2):
            items += write_scene(synth_timeseries(spec, 8, q), tmp_path / "in", ".tgrd").items
        man = Manifest(items)

        def cfg(out):
            return PipelineConfig(input_root=str(tmp_path / "in"), output_root=str(tmp_path / out), raster_ext=".tgrd")

        assert run_pipeline(man, cfg("ref"), workers=1).successes == len(man)
        ref = {it: output_path(cfg("ref"), it).read_bytes() for it in man.items}
        run_pipeline(man, cfg("w8"), workers=8)
        assert all(output_path(cfg("w8"), it).read_bytes() == ref[it] for it in man.items)

        rng = np.random.default_rng(77)
        for trial in range(100):
            out = f"t{trial}"
            log = tmp_path / "logs" / f"{out}.ndjson"
            # crash: some prefix of the shard ran, then the log lost a random byte tail
            done = int(rng.integers(0, len(man) + 1))
            run_pipeline(man.items[:done], cfg(out), log_path=log)
            blob = log.read_bytes() if log.exists() else b""
            log.write_bytes(blob[: int(rng.integers(0, len(blob) + 1))])
            pending = resume_pending(man, [log])
            assert run_pipeline(pending, cfg(out), workers=int(rng.integers(1, 5)), log_path=log).failures == 0
            assert len(resume_pending(man, [log])) == 0
            successes = [r["item"] for r in read_log_records(log) if r["status"] == "success"]
            assert sorted(successes) == sorted(it.key for it in man.items)
            for it in man.items:
                assert output_path(cfg(out), it).read_bytes() == ref[it], (trial, it.key)


def test_c8_change_detection(criterion):
    with criterion(8, "injected growth blob recovered as one polygon equal to the p95 oracle mask", 10.0):
        sc = synth_timeseries(SceneSpec(seed=8, growth_blobs=0, growth_per_quarter=0.0), 4)
        before = sc.truth[0]
        assert np.array_equal(before.data, sc.truth[-1].data)
        # cone-shaped blob inside the water corner, where the truth is empty
        yy, xx = np.mgrid[0:64, 0:64]
        cone = np.clip(1.0 - np.hypot(yy - 9.0, xx - 10.0) / 8.0, 0.0, 1.0)
        assert np.all(before.data[:, cone > 0] == 0)
        after = before.data.copy()
        after[0] += (0.6 * cone).astype(np.float32)
        after[1] += (0.25 * cone).astype(np.float32)
        d0 = before.with_data(before.data[0:1])
        h0 = before.with_data(before.data[1:2] * 100)
        d1 = before.with_data(after[0:1])
        h1 = before.with_data(after[1:2] * 100)
        field = volume_delta(d0, h0, d1, h1)
        gm = growth_mask_p95(field)

        vals = [v for v in field.delta[field.valid].tolist() if v > 0]
        thr = oracles.nearest_rank_threshold(vals)
        oracle = {(r, c) for r in range(64) for c in range(64) if field.valid[r, c] and field.delta[r, c] > 0 and field.delta[r, c] >= thr}
        assert gm.threshold == thr
        assert {tuple(p) for p in np.argwhere(gm.mask)} == oracle
        comps = oracles.flood_components(gm.mask.tolist())
        assert len(comps) == 1

        polys = vectorize_8conn(gm.mask, field.spec, field.delta)
        assert len(polys) == 1
        (poly,) = polys
        spec = field.spec
        inside = set()
        for r in range(64):
            for c in range(64):
                x = spec.origin_x + (c + 0.5) * spec.pixel_size
                y = spec.origin_y - (r + 0.5) * spec.pixel_size
                if oracles.point_in_ring(x, y, poly.exterior) and not any(
                    oracles.point_in_ring(x, y, hole) for hole in poly.interiors
                ):
                    inside.add((r, c))
        assert inside == oracle and poly.pixel_count == len(oracle)
        want = poly.pixel_count * spec.pixel_size**2
        assert abs(poly.area - want) <= 1e-6 * want
        assert abs(polygon_area(poly) - want) <= 1e-6 * want


def test_c9_raster_grid_exactness(criterion, tmp_path):
    with criterion(9, "raster round-trips, quad tiling edges, downsample and bilinear oracles", 10.0):
        rng = np.random.default_rng(9)
        for ext in (".tif", ".tgrd"):
            for bands, size in ((1, 300), (2, 512)):
                data = rng.random((bands, size, size)).astype(np.float32)
                data[:, rng.random((size, size)) < 0.1] = -1.0
                data.flat[:4] = [np.inf, -0.0, np.float32(1e-40), np.nan]
                r = QuadRaster(GridSpec(-1234.5, 9876.25, 4.777, size, size), data)
                back = read_raster(write_raster(r, tmp_path / f"x{bands}{ext}"))
                assert back.data.tobytes() == r.data.tobytes()
                assert back.spec == r.spec and back.nodata == r.nodata and back.crs == r.crs

        row = [quad_bounds(QuadId(i, 0)) for i in range(2048)]
        col = [quad_bounds(QuadId(0, j)) for j in range(2048)]
        assert row[0].min_x == -HALF_EXTENT and col[0].max_y == HALF_EXTENT
        assert all(a.max_x == b.min_x for a, b in zip(row, row[1:]))
        assert all(a.min_y == b.max_y for a, b in zip(col, col[1:]))
        assert abs(row[-1].max_x - HALF_EXTENT) <= 1e-6 and abs(col[-1].min_y + HALF_EXTENT) <= 1e-6
        for b, q in ((row[517], QuadId(517, 0)), (col[1900], QuadId(0, 1900))):
            lon, lat = inverse((b.min_x + b.max_x) / 2, (b.min_y + b.max_y) / 2)
            assert quad_for_point(lon, lat) == q

        for _ in range(5):
            a = rng.random((32, 32)).astype(np.float32)
            a[rng.random((32, 32)) < 0.2] = -1.0
            src = QuadRaster(GridSpec(0.0, 32.0, 1.0, 32, 32), a)
            got = downsample_average(src, 8).data[0]
            want = oracles.downsample_pixelwise(a.astype(np.float64).tolist(), 8, -1.0)
            assert np.array_equal(got, np.asarray(want, np.float32))

            out = GridSpec(float(rng.uniform(-1, 1)), float(rng.uniform(31, 33)), float(rng.uniform(0.4, 1.6)), 24, 24)
            res = resample_bilinear(src, out).data[0]
            xs, ys = out.cell_centers()
            grid = a.astype(np.float64).tolist()
            for r in range(24):
                for c in range(24):
                    want = oracles.bilinear_pixel(grid, (0.0, 32.0, 1.0, 32, 32), xs[c], ys[r], -1.0)
                    assert res[r, c] == pytest.approx(want, abs=1e-6)
