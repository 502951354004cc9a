import numpy as np
import pytest

from builtup.fixtures import SceneSpec, annual_layers, noisy_spec, synth_scenes, synth_timeseries, write_scene
from builtup.grid import POOL_FACTOR
from builtup.postproc import DENSITY_FLOOR, MIN_HEIGHT_M, UdmClass
from builtup.raster import read_raster


def test_zero_noise_predictions_equal_truth():
    sc = synth_timeseries(SceneSpec(seed=3, size=32), 6)
    for p, t in zip(sc.predictions, sc.truth):
        assert np.array_equal(p.data, t.data)


def test_same_seed_same_scene():
    a = synth_timeseries(noisy_spec(4, size=32), 8)
    b = synth_timeseries(noisy_spec(4, size=32), 8)
    for x, y in zip(a.predictions + a.udm, b.predictions + b.udm):
        assert x.data.tobytes() == y.data.tobytes()
    c = synth_timeseries(noisy_spec(5, size=32), 8)
    assert not np.array_equal(a.predictions[0].data, c.predictions[0].data)


def test_quads_differ_within_seed():
    a, b = synth_scenes(SceneSpec(seed=1, quads=2, size=16), 4)
    assert a.quad != b.quad and not np.array_equal(a.truth[0].data, b.truth[0].data)


def test_truth_monotone_and_agreeing():
    sc = synth_timeseries(SceneSpec(seed=2, size=48), 12)
    prev = None
    for t in sc.truth:
        d, h = t.data.astype(np.float64)
        h = h * 100
        assert np.all(h[d > 0] >= MIN_HEIGHT_M - 1e-5)
        assert np.all(h[d == 0] == 0)
        assert np.all(d[h > 0] >= DENSITY_FLOOR)
        if prev is not None:
            assert np.all(d >= prev)
        prev = d
    assert sc.growth_mask.any()


def test_truth_empty_on_masked_terrain():
    sc = synth_timeseries(SceneSpec(seed=2, size=40), 4)
    blocked = (sc.gsw.data[0] > 0) | (sc.dem.data[0] > 5100)
    assert blocked.any()
    assert np.all(sc.truth[-1].data[0][blocked] == 0)


def test_cloud_fraction_matches_unclear_share():
    sc = synth_timeseries(noisy_spec(0, size=256, noise_schedule=[]), 4)
    fracs = [float(np.mean(u.data[0] == UdmClass.CLOUD)) for u in sc.udm]
    assert np.mean(fracs) == pytest.approx(0.004, abs=0.0015)


def test_udm_grid_is_finer():
    sc = synth_timeseries(SceneSpec(size=8), 4)
    assert sc.udm[0].data.shape[-1] == 8 * POOL_FACTOR
    assert sc.udm[0].spec.pixel_size * POOL_FACTOR == pytest.approx(sc.predictions[0].spec.pixel_size)


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(cloud_fraction=1.5)
    with pytest.raises(ValueError):
        SceneSpec(noise_schedule=[(1, -0.1, 0.0)])
    with pytest.raises(ValueError):
        synth_timeseries(SceneSpec(), 3)


def test_write_scene_layout(tmp_path):
    sc = synth_timeseries(SceneSpec(size=8), 5)
    m = write_scene(sc, tmp_path, ".tgrd")
    assert [it.quarter for it in m.items] == sc.quarters[3:]
    name = f"{sc.quad.name}.tgrd"
    for t in sc.quarters:
        assert (tmp_path / "pred" / t / name).exists() and (tmp_path / "udm" / t / name).exists()
    back = read_raster(tmp_path / "dem" / name)
    assert np.array_equal(back.data, sc.dem.data)
    write_scene(sc, tmp_path / "bare", ".tgrd", with_udm=False)
    assert not (tmp_path / "bare" / "udm").exists()


def test_annual_layers_picks_q4():
    sc = synth_timeseries(SceneSpec(size=8), 12)
    years = annual_layers(sc.truth, sc.quarters)
    assert len(years) == 3
    assert np.array_equal(years[0], sc.truth[3].data[0])


@pytest.mark.parametrize("seed", range(10))
def test_postprocessing_strictly_raises_auc(seed):
    from builtup.config import PipelineConfig
    from builtup.metrics import monotonicity_auc, window_signals
    from builtup.orchestrator import postprocess_stack
    from builtup.postproc import MaskLayers, UdmQuad

    sc = synth_timeseries(noisy_spec(seed), 16)
    masks = MaskLayers(sc.gsw.data[0], sc.dem.data[0])
    q4 = [i for i in range(3, 16) if sc.quarters[i].endswith("q4")]
    post = [postprocess_stack(sc.predictions[i - 3 : i + 1], UdmQuad.from_raster(sc.udm[i]), masks, PipelineConfig())
            for i in q4]
    raw = annual_layers(sc.predictions, sc.quarters)
    pp = annual_layers(post, [sc.quarters[i] for i in q4])
    for k in (3, 7, 10):
        assert monotonicity_auc(window_signals(pp, k)) > monotonicity_auc(window_signals(raw, k))
