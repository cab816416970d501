import json

import numpy as np
import pytest

from rankfid.data import (DISTORTIONS, ManifestError, Raster, RasterStore, SynthSpec, ValidationError,
                          apply_distortion, base_image, linear_rescale, load_manifest, read_raster,
                          simulate_opinions, split_database, synth_database, write_database, write_raster)
from rankfid.evaluation import srcc


def write_manifest(tmp_path, polarity="higher_is_better", records=None, rng=(0, 100)):
    records = records if records is not None else [
        {"image_id": "a", "payload": "a.ras", "mos": 30, "std": 2.0, "reference_id": "r1"},
        {"image_id": "b", "payload": "b.ras", "mos": 60, "std": 3.0, "reference_id": "r1"},
        {"image_id": "c", "payload": "c.ras", "mos": 90, "std": 1.0},
    ]
    doc = {"database_id": "db", "name": "DB", "scenario": "synthetic", "polarity": polarity,
           "range": list(rng), "records": records}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc, indent=2))
    return path


@pytest.fixture
def flat_raster():
    rng = np.random.default_rng(0)
    return Raster(rng.uniform(0.2, 0.8, (16, 16, 1)))


class TestManifest:
    def test_lower_is_better_negated(self, tmp_path):
        m = load_manifest(write_manifest(tmp_path, "lower_is_better"))
        assert m.records[0].mos == -30
        assert m.range == (-100, 0)

    def test_higher_is_better_unchanged(self, tmp_path):
        recs = [{"image_id": "a", "payload": "a.ras", "mos": 4.2, "std": 0.5},
                {"image_id": "b", "payload": "b.ras", "mos": 3.1, "std": 0.5}]
        m = load_manifest(write_manifest(tmp_path, records=recs, rng=(1, 5)))
        assert m.records[0].mos == 4.2

    def test_count_preserved(self, tmp_path):
        m = load_manifest(write_manifest(tmp_path))
        assert m.ids() == ["a", "b", "c"]
        assert m.records[2].reference_id is None

    def test_polarity_reverses_order(self, tmp_path):
        raw = [30, 60, 90]
        m = load_manifest(write_manifest(tmp_path, "lower_is_better"))
        stored = [r.mos for r in m.records]
        assert np.argsort(stored).tolist() == np.argsort(raw)[::-1].tolist()

    def test_parse_error_has_line(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{\n "database_id": "db",\n "name": \n}')
        with pytest.raises(ManifestError) as err:
            load_manifest(path)
        assert err.value.lineno == 4

    def test_negative_std_names_record(self, tmp_path):
        recs = [{"image_id": "bad1", "payload": "x", "mos": 5, "std": -1}]
        with pytest.raises(ValidationError, match="bad1"):
            load_manifest(write_manifest(tmp_path, records=recs))

    def test_mos_out_of_range_names_record(self, tmp_path):
        recs = [{"image_id": "far", "payload": "x", "mos": 101, "std": 1}]
        with pytest.raises(ValidationError, match="far"):
            load_manifest(write_manifest(tmp_path, records=recs))

    def test_missing_field(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({"database_id": "x"}))
        with pytest.raises(ManifestError):
            load_manifest(path)


class TestRescale:
    def test_endpoints_and_midpoint(self):
        assert linear_rescale(1.0, (1.0, 5.0)) == 0.0
        assert linear_rescale(5.0, (1.0, 5.0)) == 100.0
        assert linear_rescale(2.5, (0.0, 5.0)) == 50.0

    def test_degenerate(self):
        with pytest.raises(ValidationError):
            linear_rescale(1.0, (2.0, 2.0))


class TestSplit:
    def _manifest(self, n_groups, per_group):
        spec = SynthSpec(n_base_images=n_groups, distortion_kinds=("white_noise",), levels_per_kind=per_group,
                         image_size=16, seed=3)
        return synth_database(spec)[0]

    def test_plain_fraction(self):
        m = self._manifest(10, 1)
        train, test = split_database(m, 0.8, by_reference=False, seed=0)
        assert (len(train), len(test)) == (8, 2)
        assert set(train) | set(test) == set(m.ids()) and not set(train) & set(test)

    def test_by_reference(self):
        m = self._manifest(5, 4)
        train, test = split_database(m, 0.8, by_reference=True, seed=1)
        assert (len(train), len(test)) == (16, 4)
        ref = {r.image_id: r.reference_id for r in m.records}
        assert not {ref[i] for i in train} & {ref[i] for i in test}

    def test_at_least_one_group_each_side(self):
        m = self._manifest(2, 3)
        train, test = split_database(m, 0.95, by_reference=True, seed=0)
        assert len(train) == 3 and len(test) == 3

    def test_deterministic(self):
        m = self._manifest(12, 2)
        assert split_database(m, 0.8, True, seed=4) == split_database(m, 0.8, True, seed=4)

    def test_missing_reference(self, tmp_path):
        m = load_manifest(write_manifest(tmp_path))
        with pytest.raises(ValidationError):
            split_database(m, 0.5, by_reference=True)

    def test_bad_fraction(self, tmp_path):
        m = load_manifest(write_manifest(tmp_path))
        with pytest.raises(ValidationError):
            split_database(m, 1.0)


class TestDistortions:
    @pytest.mark.parametrize("kind", DISTORTIONS)
    def test_level_zero_identity(self, kind, flat_raster):
        out, drop = apply_distortion(flat_raster, kind, 0.0)
        assert drop == 0.0
        np.testing.assert_array_equal(out.pixels, flat_raster.pixels)

    @pytest.mark.parametrize("kind", DISTORTIONS)
    @pytest.mark.parametrize("level", [0.1, 0.5, 1.0])
    def test_range_clamped(self, kind, level, flat_raster):
        out, _ = apply_distortion(flat_raster, kind, level, seed=2)
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
        assert out.pixels.shape == flat_raster.pixels.shape

    @pytest.mark.parametrize("kind", DISTORTIONS)
    def test_drop_strictly_increasing(self, kind, flat_raster):
        drops = [apply_distortion(flat_raster, kind, lv)[1] for lv in np.linspace(0, 1, 11)]
        assert np.all(np.diff(drops) > 0)

    def test_noise_ordering(self, flat_raster):
        assert apply_distortion(flat_raster, "white_noise", 0.8)[1] > apply_distortion(flat_raster, "white_noise", 0.4)[1]

    def test_unknown_kind(self, flat_raster):
        with pytest.raises(ValidationError):
            apply_distortion(flat_raster, "jpeg", 0.5)

    def test_level_bounds(self, flat_raster):
        with pytest.raises(ValidationError):
            apply_distortion(flat_raster, "contrast", 1.5)

    def test_distortions_change_image(self):
        base = base_image(np.random.default_rng(0), 32, 1)
        for kind in DISTORTIONS:
            out, _ = apply_distortion(base, kind, 0.5, seed=1)
            assert not np.array_equal(out.pixels, base.pixels)


class TestOpinions:
    def test_zero_noise(self):
        assert simulate_opinions(42.5, 10, 0.0, seed=1) == (42.5, 0.0)

    def test_law_of_large_numbers(self):
        mos, std = simulate_opinions(50.0, 100_000, 5.0, seed=11)
        assert abs(mos - 50) < 0.1 and abs(std - 5) < 0.1

    def test_deterministic(self):
        assert simulate_opinions(30, 20, 4, seed=3) == simulate_opinions(30, 20, 4, seed=3)

    def test_needs_two_observers(self):
        with pytest.raises(ValidationError):
            simulate_opinions(30, 1, 4)


class TestSynth:
    def test_ladder_counts(self):
        m, rasters = synth_database(SynthSpec(n_base_images=2, distortion_kinds=("white_noise",),
                                              levels_per_kind=3, image_size=16))
        assert len(m.records) == 6 and len(rasters) == 6
        assert len({r.reference_id for r in m.records}) == 2

    def test_mixed_counts(self):
        m, _ = synth_database(SynthSpec(n_base_images=5, distortion_kinds=("quantize", "contrast"),
                                        levels_per_kind=2, scenario_mix="mixed-random", image_size=16))
        assert len(m.records) == 10 and m.scenario == "realistic"
        assert all(r.reference_id for r in m.records)

    def test_ladder_monotone(self):
        spec = SynthSpec(n_base_images=3, distortion_kinds=("gaussian_blur", "white_noise"), levels_per_kind=4,
                         image_size=16)
        m, _ = synth_database(spec)
        for b in range(3):
            for kind in spec.distortion_kinds:
                tq = [m.true_quality[f"synth_b{b:03d}_{kind}_l{lv}"] for lv in range(1, 5)]
                assert np.all(np.diff(tq) < 0)

    def test_zero_observer_noise_ranks_exactly(self):
        spec = SynthSpec(n_base_images=3, distortion_kinds=("gaussian_blur", "contrast"), levels_per_kind=4,
                         observer_std=0.0, image_size=16)
        m, _ = synth_database(spec)
        ids = m.ids()
        assert srcc([m.true_quality[i] for i in ids], [r.mos for r in m.records]) == pytest.approx(1.0)

    def test_deterministic_bytes(self, tmp_path):
        spec = SynthSpec(n_base_images=2, levels_per_kind=2, image_size=16, seed=9)
        for name in ("a", "b"):
            m, r = synth_database(spec)
            write_database(m, r, tmp_path / name)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert files
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_dmos_round_trip(self, tmp_path):
        spec = SynthSpec(n_base_images=2, levels_per_kind=2, image_size=16, annotation="dmos")
        m, r = synth_database(spec)
        write_database(m, r, tmp_path)
        raw = json.loads((tmp_path / "manifest.json").read_text())
        assert raw["polarity"] == "lower_is_better" and raw["range"] == [0.0, 100.0]
        back = load_manifest(tmp_path / "manifest.json")
        assert [x.mos for x in back.records] == pytest.approx([x.mos for x in m.records])
        # the worst image has the largest DMOS but the lowest stored value
        worst = max(raw["records"], key=lambda x: x["mos"])["image_id"]
        assert min(back.records, key=lambda x: x.mos).image_id == worst

    def test_invalid_spec(self):
        with pytest.raises(ValidationError):
            SynthSpec(n_base_images=0)
        with pytest.raises(ValidationError):
            SynthSpec(observer_std=-1.0)
        with pytest.raises(ValidationError):
            SynthSpec(distortion_kinds=("jpeg",))


class TestRasterFiles:
    def test_round_trip(self, tmp_path):
        r = Raster(np.random.default_rng(0).random((5, 7, 3)))
        write_raster(r, tmp_path / "x.ras")
        blob = (tmp_path / "x.ras").read_bytes()
        assert blob[:6] == b"RFRAS1" and len(blob) == 18 + 4 * 5 * 7 * 3
        back = read_raster(tmp_path / "x.ras")
        assert (back.width, back.height, back.channels) == (7, 5, 3)
        np.testing.assert_array_equal(back.pixels, r.pixels)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ras").write_bytes(b"NOPE" * 10)
        with pytest.raises(ValidationError):
            read_raster(tmp_path / "x.ras")

    def test_out_of_range_pixels(self):
        with pytest.raises(ValidationError):
            Raster(np.full((2, 2, 1), 1.5))

    def test_store_resolves_manifest_paths(self, tmp_path):
        m, r = synth_database(SynthSpec(n_base_images=1, levels_per_kind=2, image_size=16))
        write_database(m, r, tmp_path)
        store = RasterStore().add_manifest(load_manifest(tmp_path / "manifest.json"))
        for image_id, raster in r.items():
            np.testing.assert_array_equal(store[image_id].pixels, raster.pixels)
        with pytest.raises(KeyError):
            store["missing"]
