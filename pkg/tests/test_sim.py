"""Simulator: determinism, event structure, signal content, persistence."""

import numpy as np
import pytest
import scipy.signal as sps

from tcfnet import sim
from tcfnet.dsp import PreprocessConfig, preprocess_run
from tcfnet.records import N_ITEMS

SMALL = dict(subjects=1, sessions=2, runs_per_session=2, blocks_min=20, blocks_max=21)


@pytest.fixture(scope="module")
def saved(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    ds = sim.generate_dataset(sim.GeneratorConfig.preset("high", **SMALL), out)
    return ds, out


def quiet(**kw):
    """No noise, no jitter: the run is the pure evoked response."""
    return sim.GeneratorConfig.preset("high", pink_uv=0, white_uv=0, alpha_uv=0, line_uv=0,
                                      latency_jitter_ms=0, subject_latency_sd_ms=0, **kw)


def test_same_ids_same_run_different_ids_differ():
    cfg = sim.GeneratorConfig.preset("high", **SMALL)
    a, b = sim.generate_run(cfg, 1, 1, 1), sim.generate_run(cfg, 1, 1, 1)
    assert np.array_equal(a.samples, b.samples) and a.events == b.events
    c = sim.generate_run(cfg, 1, 1, 2)
    assert not np.array_equal(a.samples[:, :1000], c.samples[:, :1000])
    d = sim.generate_run(cfg, 1, 1, 1, seed=7)
    assert not np.array_equal(a.samples[:, :1000], d.samples[:, :1000])


def test_event_structure():
    cfg = sim.GeneratorConfig.preset("high", **SMALL)
    run = sim.generate_run(cfg, 1, 1, 1)
    ev = run.event_arrays()
    assert 20 <= run.n_blocks <= 21
    for b in range(run.n_blocks):
        assert sorted(ev["item"][ev["block"] == b]) == list(range(N_ITEMS))
        assert ev["target"][ev["block"] == b].sum() == 1
    assert set(np.diff(ev["onset"])) == {960}  # 400 ms at 2400 Hz
    assert np.all(ev["item"][ev["target"]] == run.target_item)
    assert ev["onset"][0] == 4800


def test_session_targets_cover_items():
    cfg = sim.GeneratorConfig(runs_per_session=6)
    assert sorted(sim.session_targets(cfg, 3, 2)) == list(range(N_ITEMS))


def test_evoked_response_shape():
    cfg = quiet()
    run = sim.generate_run(cfg, 1, 1, 1)  # subject 1 is not attenuated
    amp, _ = sim._subject_traits(cfg, 1)
    pz = sim.CHANNELS.index("Pz")
    ev = run.event_arrays()
    t = np.arange(2400) / 2400.0
    ref = 15.0 * amp * np.exp(-0.5 * ((t - 0.3) / 0.06) ** 2)
    on = ev["onset"][ev["target"]][0]
    np.testing.assert_allclose(run.samples[pz, on : on + 2400], ref, atol=1e-4 * 15)
    off = ev["onset"][~ev["target"]][0]
    # a non-target flash only carries the tail of an earlier target, if any
    if off - on > 2400 or off < on:
        assert np.abs(run.samples[pz, off : off + 240]).max() < 1e-3


def test_stroke_subjects_are_attenuated():
    cfg = sim.GeneratorConfig()
    amps = [sim._subject_traits(cfg, s)[0] for s in range(1, 10)]
    assert max(amps[6:]) <= 1.15 * 0.6 and min(amps[:6]) >= 0.85


def test_pink_noise_slope(rng):
    x = sim.pink_noise(rng, (8, 2**16), 2400.0)
    f, p = sps.welch(x, fs=2400.0, nperseg=4096, axis=-1)
    band = (f >= 2) & (f <= 200)
    slope = np.polyfit(np.log(f[band]), np.log(p.mean(0)[band]), 1)[0]
    assert -1.2 < slope < -0.8
    np.testing.assert_allclose(x.std(axis=1), 1.0)


def test_line_noise_is_removed_by_pipeline():
    cfg = sim.GeneratorConfig.preset("street-noise", **SMALL)
    run = sim.generate_run(cfg, 1, 1, 1)
    f, p = sps.welch(run.samples[0].astype(float), fs=2400.0, nperseg=4800)
    assert p[np.argmin(abs(f - 60))] > 20 * np.median(p[(f > 40) & (f < 80)])
    eps = preprocess_run(run, PreprocessConfig(win_lo=0, win_hi=100))
    assert eps.data.shape[1:] == (16, 120)


def test_select_item_and_ties():
    items = np.tile(np.arange(6), 3)
    blocks = np.repeat(np.arange(3), 6)
    conf = np.where(items == 4, 0.9, 0.1)
    assert sim.select_item(conf, items, blocks, 3)[0] == 4
    assert sim.select_item(np.full(18, 0.5), items, blocks, 1)[0] == 0
    # only the first block is used
    conf2 = conf.copy()
    conf2[blocks == 0] = np.where(items[blocks == 0] == 1, 1.0, 0.0)
    assert sim.select_item(conf2, items, blocks, 1)[0] == 1


def test_run_interaction_with_label_model():
    cfg = sim.GeneratorConfig.preset("high", **SMALL)
    run = sim.generate_run(cfg, 1, 2, 1)
    oracle = lambda eps: eps.label.astype(float)
    item, per_item = sim.run_interaction(oracle, run, n_blocks_used=1)
    assert item == run.target_item and per_item[item] == 1.0
    with pytest.raises(ValueError):
        sim.run_interaction(oracle, run, n_blocks_used=99)
    with pytest.raises(ValueError):
        sim.run_interaction(oracle, run, n_blocks_used=0)


def test_roundtrip(saved):
    ds, out = saved
    again = sim.load_dataset(out)
    assert again.dataset_hash == ds.dataset_hash
    assert len(again.entries) == 4 and again.subjects == [1] and again.sessions() == [1, 2]
    run = again.get_run(1, 2, 2)
    ref = sim.generate_run(ds.config, 1, 2, 2)
    assert np.array_equal(run.samples, ref.samples) and run.events == ref.events


def test_regeneration_is_byte_identical(saved, tmp_path):
    ds, out = saved
    sim.generate_dataset(ds.config, tmp_path)
    for e in ds.entries:
        assert (tmp_path / e.signal).read_bytes() == (out / e.signal).read_bytes()
    assert (tmp_path / "manifest.json").read_text() == (out / "manifest.json").read_text()


def test_corruption_is_detected(saved, tmp_path):
    ds, out = saved
    sim.save_dataset(sim.load_dataset(out), tmp_path)
    e = ds.entries[0]
    p = tmp_path / e.signal
    buf = bytearray(p.read_bytes())
    buf[100] ^= 0xFF
    p.write_bytes(bytes(buf))
    with pytest.raises(sim.DatasetError, match="hash"):
        sim.load_dataset(tmp_path)
    p.write_bytes(bytes(buf[:50]))
    with pytest.raises(sim.DatasetError, match="truncated|expected"):
        sim.load_dataset(tmp_path)
    lazy = sim.load_dataset(tmp_path, verify=False)
    with pytest.raises(sim.DatasetError):
        lazy.get_run(e.subject, e.session, e.run)
    (tmp_path / "manifest.json").unlink()
    with pytest.raises(sim.DatasetError, match="manifest"):
        sim.load_dataset(tmp_path)


def test_config_validation():
    with pytest.raises(ValueError):
        sim.GeneratorConfig(blocks_min=10)
    with pytest.raises(ValueError):
        sim.GeneratorConfig.preset("loud")
    cfg = sim.GeneratorConfig.preset("medium", subjects=2)
    assert sim.GeneratorConfig.from_dict(cfg.to_dict()) == cfg
