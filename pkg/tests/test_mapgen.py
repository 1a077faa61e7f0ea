import json

import numpy as np
import pytest

from gscart.mapgen import (HEADER, MapConfig, MapFormatError, TransmitterSpec, compose_map,
                           file_checksum, generate_dataset, generate_map, generate_psd_weight,
                           generate_slf, load_dataset, read_maps, shadowing_field, sinc_sum,
                           write_maps)

QUIET = dict(shadowing_sigma=0.0, noise_sigma=0.0)


class TestConfig:
    def test_defaults_valid(self):
        cfg = MapConfig()
        assert (cfg.rows, cfg.cols) == (50, 50)
        assert cfg.cell_size == 1.0

    @pytest.mark.parametrize("kw", [dict(rows=4), dict(gamma_range=(3.0, 2.0)), dict(shadowing_sigma=-1.0),
                                    dict(decorrelation_distance=0.0), dict(normalization="zscore"),
                                    dict(tx_power_range=(0.0, 1.0))])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            MapConfig(**kw)

    def test_dict_round_trip(self):
        cfg = MapConfig(rows=16, cols=20, gamma_range=(2.5, 3.0))
        assert MapConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        with pytest.raises(ValueError):
            MapConfig.from_dict({"rows": 16, "colour": 3})


class TestSlf:
    def test_deterministic_decay(self):
        cfg = MapConfig(rows=11, cols=11, extent=11.0, **QUIET)
        slf = generate_slf(TransmitterSpec((5.0, 5.0), 1.0, 2.0), cfg)
        ii, jj = np.meshgrid(np.arange(11), np.arange(11), indexing="ij")
        d = np.hypot(ii - 5, jj - 5)
        np.testing.assert_allclose(slf, (1 + d) ** -2.0, rtol=1e-14)
        assert slf[5, 5] == 1.0

    def test_radially_nonincreasing(self):
        cfg = MapConfig(rows=20, cols=20, extent=20.0, **QUIET)
        slf = generate_slf(TransmitterSpec((3.0, 12.0), 0.7, 3.1), cfg)
        ii, jj = np.meshgrid(np.arange(20), np.arange(20), indexing="ij")
        d = np.hypot(ii - 3, jj - 12).ravel()
        order = np.argsort(d, kind="stable")
        assert np.all(np.diff(slf.ravel()[order]) <= 1e-15)
        assert slf.argmax() == 3 * 20 + 12

    def test_reference_distance_scales_distance(self):
        cfg = MapConfig(rows=9, cols=9, extent=9.0, reference_distance=4.0, **QUIET)
        slf = generate_slf(TransmitterSpec((0.0, 0.0), 1.0, 2.0), cfg)
        assert slf[0, 8] == pytest.approx((1 + 8 / 4.0) ** -2)

    def test_shadowing_std_monte_carlo(self):
        cfg = MapConfig(rows=12, cols=12, extent=12.0, shadowing_sigma=6.0, noise_sigma=0.0)
        tx = TransmitterSpec((6.0, 6.0), 1.0, 2.5)
        base = generate_slf(tx, MapConfig(rows=12, cols=12, extent=12.0, **QUIET))
        rng = np.random.default_rng(0)
        db = np.stack([10 * np.log10(generate_slf(tx, cfg, rng) / base) for _ in range(1000)])
        per_cell = db.std(axis=0)
        assert np.all(np.abs(per_cell - 6.0) < 0.6)

    def test_shadowing_field_correlation_decays(self):
        rng = np.random.default_rng(1)
        f = np.stack([shadowing_field(40, 40, 1.0, 3.0, rng) for _ in range(200)])
        c1 = np.mean(f[:, :, :-1] * f[:, :, 1:])
        c8 = np.mean(f[:, :, :-8] * f[:, :, 8:])
        assert 1.0 > c1 > c8 > 0

    def test_outside_grid(self):
        with pytest.raises(ValueError):
            generate_slf(TransmitterSpec((60.0, 1.0), 1.0, 2.0), MapConfig(**QUIET))


class TestPsdWeight:
    def test_centered_single_sinc(self):
        assert sinc_sum(0.3, [0.3], [1.2], [0.8]) == pytest.approx(0.8)

    def test_empty(self):
        assert sinc_sum(0.0, [], [], []) == 0.0
        cfg = MapConfig(sinc_count_range=(0, 0))
        assert generate_psd_weight(cfg, np.random.default_rng(0)) == 0.0

    def test_two_sincs_by_hand(self):
        f, c, w, p = 0.0, [0.5, -1.0], [1.0, 2.0], [1.0, 0.5]
        hand = 1.0 * np.sin(np.pi * -0.5) / (np.pi * -0.5) + 0.5 * np.sin(np.pi * 0.5) / (np.pi * 0.5)
        assert sinc_sum(f, c, w, p) == pytest.approx(hand, rel=1e-14)

    def test_clamped_at_zero(self):
        assert sinc_sum(1.5, [0.0], [1.0], [1.0]) == 0.0

    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        assert all(generate_psd_weight(MapConfig(), rng) >= 0 for _ in range(200))


class TestComposeMap:
    def test_single_transmitter_equals_slf(self):
        cfg = MapConfig(rows=16, cols=16, extent=16.0, **QUIET)
        tx = TransmitterSpec((4.0, 9.0), 0.8, 2.2, psd_weight=1.0)
        raw = compose_map([tx], cfg)
        np.testing.assert_allclose(raw / raw.max(), generate_slf(tx, cfg) / 0.8)

    def test_two_far_transmitters(self):
        cfg = MapConfig(rows=20, cols=40, extent=40.0, **QUIET)
        txs = [TransmitterSpec((10.0, 5.0), 1.0, 3.0), TransmitterSpec((8.0, 33.0), 1.0, 3.0)]
        raw = compose_map(txs, cfg)
        assert np.unravel_index(raw[:, :20].argmax(), (20, 20)) == (10, 5)
        assert np.unravel_index(raw[:, 20:].argmax(), (20, 20)) == (8, 13)

    def test_permutation_invariant(self):
        cfg = MapConfig(rows=16, cols=16, extent=16.0, **QUIET)
        txs = [TransmitterSpec((1.0, 2.0), 0.6, 2.0, 0.9), TransmitterSpec((9.0, 12.0), 1.0, 3.0, 0.4),
               TransmitterSpec((15.0, 0.0), 0.7, 2.5, 1.0)]
        np.testing.assert_allclose(compose_map(txs, cfg), compose_map(txs[::-1], cfg), rtol=1e-14)

    def test_noise_std(self):
        cfg = MapConfig(rows=32, cols=32, extent=32.0, shadowing_sigma=0.0, noise_sigma=0.01)
        tx = [TransmitterSpec((16.0, 16.0), 1.0, 0.5)]  # keeps the field far above zero
        clean = compose_map(tx, cfg, noise=False)
        rng = np.random.default_rng(3)
        diff = np.stack([compose_map(tx, cfg, rng) - clean for _ in range(50)])
        peak = 2.0
        assert abs(diff.std() / peak - 0.01 / peak) < 0.001 / peak

    def test_generated_maps_valid(self):
        rng = np.random.default_rng(4)
        cfg = MapConfig(rows=24, cols=24, extent=24.0)
        for _ in range(20):
            m = generate_map(cfg, rng)
            assert np.isfinite(m).all() and m.min() >= 0 and m.max() <= 1


class TestFiles:
    def test_size_single_map(self, tmp_path):
        p = tmp_path / "one.bin"
        write_maps(p, np.zeros((1, 8, 9), np.float32))
        assert p.stat().st_size == HEADER.size + 8 * 9 * 4 == 32 + 288

    def test_round_trip_bit_exact(self, tmp_path, rng):
        maps = rng.uniform(size=(3, 10, 12)).astype(np.float32)
        checksum = write_maps(tmp_path / "m.bin", maps)
        back = read_maps(tmp_path / "m.bin")
        assert back.tobytes() == maps.tobytes()
        assert checksum == file_checksum(tmp_path / "m.bin")

    def test_header_layout(self, tmp_path):
        write_maps(tmp_path / "m.bin", np.ones((2, 8, 8), np.float32))
        head = (tmp_path / "m.bin").read_bytes()[:32]
        assert head[:8] == b"GSCMAP01"
        assert int.from_bytes(head[8:12], "little") == 2
        assert int.from_bytes(head[20:24], "little") == 1
        assert head[24:] == bytes(8)

    def test_corrupt_files(self, tmp_path):
        p = tmp_path / "m.bin"
        write_maps(p, np.ones((2, 8, 8), np.float32))
        blob = p.read_bytes()
        p.write_bytes(blob[:-4])
        with pytest.raises(MapFormatError):
            read_maps(p)
        p.write_bytes(b"NOTAMAP!" + blob[8:])
        with pytest.raises(MapFormatError):
            read_maps(p)
        with pytest.raises(OSError, match="missing.bin"):
            read_maps(tmp_path / "missing.bin")


class TestDataset:
    def test_deterministic_and_metadata(self, tmp_path):
        cfg = MapConfig(rows=16, cols=16, extent=16.0)
        a = generate_dataset(cfg, 12, tmp_path / "a.bin", seed=5)
        b = generate_dataset(cfg, 12, tmp_path / "b.bin", seed=5)
        assert a.checksum == b.checksum and a.count == 12
        maps, meta = load_dataset(tmp_path / "a.bin")
        assert maps.shape == (12, 16, 16)
        assert meta["peak"] == a.peak and meta["seed"] == 5 and meta["checksum"] == a.checksum
        assert MapConfig.from_dict(meta["config"]) == cfg
        assert maps.min() >= 0 and maps.max() <= 1

    def test_peak_is_percentile(self, tmp_path):
        cfg = MapConfig(rows=16, cols=16, extent=16.0)
        s = generate_dataset(cfg, 6, tmp_path / "a.bin", seed=1)
        maps, _ = load_dataset(tmp_path / "a.bin")
        assert np.mean(maps >= 1.0) == pytest.approx(0.005, abs=0.003)
        fixed = generate_dataset(cfg, 6, tmp_path / "b.bin", seed=1, peak=2 * s.peak)
        assert fixed.peak == 2 * s.peak

    def test_bad_count_and_path(self, tmp_path):
        with pytest.raises(ValueError):
            generate_dataset(MapConfig(rows=8, cols=8), 0, tmp_path / "x.bin")
        with pytest.raises(OSError, match="nowhere"):
            generate_dataset(MapConfig(rows=8, cols=8), 1, tmp_path / "nowhere" / "x.bin")
