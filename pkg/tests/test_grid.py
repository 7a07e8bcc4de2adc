import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motcast._validation import ShapeError
from motcast.grid import (ChannelLayout, GridSpec, LandSeaMask, LayoutError, apply_mask,
                          build_channel_layout, latitude_weights, read_grid_metadata, regular_grid,
                          synthetic_mask, write_grid_metadata)


def mp_weights(lats):
    """Arbitrary-precision transcription of H * cos(phi_i) / sum_j cos(phi_j)."""
    mpmath.mp.dps = 50
    cos = [mpmath.cos(mpmath.radians(mpmath.mpf(x))) for x in lats]
    total = mpmath.fsum(cos)
    return [float(len(lats) * c / total) for c in cos]


class TestChannelLayout:
    def test_full_size_layout_has_81_channels(self):
        assert build_channel_layout(["T", "S", "U", "V"], 20, True).total_channels == 81

    def test_single_channel(self):
        layout = build_channel_layout(["T"], 1, False)
        assert layout.total_channels == 1
        assert layout.index("T", 0) == 0

    def test_index_formula(self):
        layout = build_channel_layout(["T", "S"], 4, True)
        assert layout.index("S", 2) == 6
        assert layout.index("SSH") == 8
        assert layout.total_channels == 9

    def test_duplicate_variables_rejected(self):
        with pytest.raises(LayoutError):
            build_channel_layout(["T", "T"], 2, False)

    @pytest.mark.parametrize("variables,n_depths,ssh", [
        (["T", "S", "U", "V"], 20, True), (["T"], 3, False), (["A", "B", "C"], 5, True),
    ])
    def test_round_trip(self, variables, n_depths, ssh):
        layout = build_channel_layout(variables, n_depths, ssh)
        for c in range(layout.total_channels):
            assert layout.index(*layout.channel(c)) == c
        assert layout.channel(layout.total_channels - 1)[0] == ("SSH" if ssh else variables[-1])

    def test_dict_round_trip(self):
        layout = build_channel_layout(["T", "S"], 3, True)
        assert ChannelLayout.from_dict(layout.to_dict()) == layout


class TestLatitudeWeights:
    def test_equator_only(self):
        np.testing.assert_allclose(latitude_weights([0.0]), [1.0], rtol=0, atol=1e-15)

    def test_symmetric_pair(self):
        np.testing.assert_allclose(latitude_weights([45.0, -45.0]), [1.0, 1.0], rtol=1e-15)

    def test_against_arbitrary_precision(self):
        expected = mp_weights([0.0, 60.0])
        np.testing.assert_allclose(expected, [4 / 3, 2 / 3], rtol=1e-15)
        np.testing.assert_allclose(latitude_weights([0.0, 60.0]), expected, rtol=1e-14)

    @pytest.mark.parametrize("bad", [[90.0], [-90.0], [10.0, 95.0]])
    def test_pole_rejected(self, bad):
        with pytest.raises(ValueError):
            latitude_weights(bad)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-89.9, 89.9), min_size=1, max_size=300))
    def test_sums_to_row_count(self, lats):
        w = latitude_weights(lats)
        assert np.all(w >= 0)
        assert abs(w.sum() - len(lats)) <= 1e-9 * len(lats)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-89.0, 89.0), min_size=1, max_size=40))
    def test_matches_mpmath(self, lats):
        np.testing.assert_allclose(latitude_weights(lats), mp_weights(lats), rtol=1e-12)


class TestMask:
    def setup_method(self):
        self.rng = np.random.default_rng(0)
        self.state = self.rng.normal(size=(3, 6, 8)).astype(np.float32)

    def test_all_ocean_is_identity(self):
        mask = LandSeaMask(np.ones((6, 8), dtype=bool))
        assert np.array_equal(apply_mask(self.state, mask), self.state)

    def test_all_land_rejected(self):
        with pytest.raises(ValueError):
            LandSeaMask(np.zeros((6, 8), dtype=bool))

    def test_all_land_field_is_fill(self):
        out = apply_mask(self.state, np.zeros((6, 8), dtype=np.uint8), fill_value=0.0)
        assert np.all(out == 0.0)

    def test_checkerboard_against_loop(self):
        ocean = (np.add.outer(np.arange(6), np.arange(8)) % 2).astype(bool)
        out = apply_mask(self.state, LandSeaMask(ocean))
        for c in range(3):
            for h in range(6):
                for w in range(8):
                    expected = self.state[c, h, w] if ocean[h, w] else 0.0
                    assert out[c, h, w].tobytes() == np.float32(expected).tobytes()

    def test_idempotent(self):
        mask = synthetic_mask(regular_grid(6, 8), seed=3)
        once = apply_mask(self.state, mask)
        assert apply_mask(once, mask).tobytes() == once.tobytes()

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            apply_mask(self.state, LandSeaMask(np.ones((5, 8), dtype=bool)))

    def test_non_binary_rejected(self):
        with pytest.raises(ValueError):
            LandSeaMask(np.full((2, 2), 2))

    def test_depth_mask_default_replicates_surface(self):
        mask = synthetic_mask(regular_grid(6, 8), seed=1)
        per_channel = mask.for_layout(build_channel_layout(["T"], 3, True))
        assert per_channel.shape == (4, 6, 8)
        assert all(np.array_equal(m, mask.ocean) for m in per_channel)


class TestGridSpec:
    def test_regular_grid(self):
        g = regular_grid(16, 32)
        assert g.shape == (16, 32)
        assert g.is_periodic
        np.testing.assert_allclose(g.lat, -g.lat[::-1])
        assert g.depth_levels[0] == 0

    @pytest.mark.parametrize("kwargs", [
        dict(latitudes=[0, 0], longitudes=[0, 1]),
        dict(latitudes=[90], longitudes=[0]),
        dict(latitudes=[0], longitudes=[0], depth_levels=[5, 10]),
        dict(latitudes=[0], longitudes=[0], depth_levels=[0, 10, 10]),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            GridSpec(**kwargs)

    def test_metadata_round_trip(self, tmp_path):
        grid = regular_grid(8, 16, (0, 50, 200))
        layout = build_channel_layout(["T", "S"], 3, True)
        mask = synthetic_mask(grid, seed=2)
        write_grid_metadata(tmp_path, grid, layout, mask)
        meta = json.loads((tmp_path / "grid.json").read_text())
        assert meta["mask"]["file"] == "mask.u8"
        assert meta["units"]["T"] == "degC"
        assert (tmp_path / "mask.u8").stat().st_size == 8 * 16
        _, g2, l2, m2 = read_grid_metadata(tmp_path)
        assert (g2, l2, m2) == (grid, layout, mask)
