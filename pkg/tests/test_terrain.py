from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stablewalk.errors import ConfigurationError
from stablewalk.terrain import (
    CurriculumConfig,
    Heightmap,
    HeightmapStack,
    TerrainCurriculum,
    TerrainSpec,
    generate_terrain,
    height_at,
    height_scan,
)

SMALL = dict(size=(4.0, 4.0))


def test_flat_is_zero():
    m = generate_terrain(TerrainSpec(kind="flat", **SMALL))
    assert not m.heights.any()
    assert height_at(m, 1.234, -0.77) == 0.0


def test_stairs_rise_at_full_difficulty():
    m = generate_terrain(TerrainSpec(kind="stairs", difficulty=1.0, **SMALL))
    # First riser sits at the edge of the 0.5 m spawn platform.
    assert height_at(m, 0.3, 0.0) == 0.0
    assert height_at(m, 0.6, 0.0) == pytest.approx(0.20)
    assert height_at(m, 0.9, 0.0) == pytest.approx(0.40)
    treads = np.unique(np.round(m.heights[:, m.extent[1] // 2], 9))
    assert np.allclose(np.diff(treads), 0.20)


def test_slope_limit():
    m = generate_terrain(TerrainSpec(kind="slope", difficulty=1.0, **SMALL))
    row = m.heights[:, m.extent[1] // 2]
    grade = np.max(np.abs(np.diff(row))) / m.resolution
    assert np.degrees(np.arctan(grade)) <= 32.10 + 1e-9
    assert np.degrees(np.arctan(grade)) == pytest.approx(32.10, abs=1e-6)


def test_rough_band_scales_with_difficulty():
    m = generate_terrain(TerrainSpec(kind="rough", difficulty=0.5, seed=3, **SMALL))
    assert np.all((np.abs(m.heights) >= 0.01 - 1e-12) & (np.abs(m.heights) <= 0.075 + 1e-12))
    full = generate_terrain(TerrainSpec(kind="rough", difficulty=1.0, seed=3, **SMALL))
    assert full.heights.min() >= 0.02 - 1e-12 and full.heights.max() <= 0.15 + 1e-12


def test_discrete_heights_in_envelope():
    m = generate_terrain(TerrainSpec(kind="discrete", difficulty=1.0, seed=1, **SMALL))
    nz = m.heights[m.heights > 0]
    assert nz.size and nz.min() >= 0.02 - 1e-12 and nz.max() <= 0.36 + 1e-12


def test_composite_and_unknown_kind():
    m = generate_terrain(TerrainSpec(kind="composite", difficulty=0.5, seed=2, size=(12.0, 4.0)))
    assert np.all(np.isfinite(m.heights)) and m.heights.max() > 0
    with pytest.raises(ConfigurationError):
        generate_terrain(TerrainSpec(kind="lava"))
    with pytest.raises(ConfigurationError):
        generate_terrain(TerrainSpec(kind="flat", difficulty=1.5))
    with pytest.raises(ConfigurationError):
        TerrainSpec(kind="stairs", stair_height=0.3).validate()


@pytest.mark.parametrize("kind", ["stairs", "slope", "discrete", "rough", "composite"])
def test_generation_is_pure(kind):
    a = generate_terrain(TerrainSpec(kind=kind, difficulty=0.7, seed=11, **SMALL))
    b = generate_terrain(TerrainSpec(kind=kind, difficulty=0.7, seed=11, **SMALL))
    assert np.array_equal(a.heights, b.heights)


@pytest.mark.parametrize("kind", ["stairs", "slope", "discrete", "rough"])
def test_difficulty_monotone(kind):
    spans = [np.ptp(generate_terrain(TerrainSpec(kind=kind, difficulty=d, seed=5, **SMALL)).heights)
             for d in np.linspace(0.0, 1.0, 6)]
    assert np.all(np.diff(spans) >= -1e-12)


def test_height_at_cell_center_and_clamp():
    h = np.arange(12, dtype=float).reshape(3, 4)
    m = Heightmap(resolution=0.5, origin=(1.0, -1.0), heights=h)
    for i in range(3):
        for j in range(4):
            assert height_at(m, *m.cell_center(i, j)) == h[i, j]
    assert height_at(m, -100.0, -100.0) == h[0, 0]
    assert height_at(m, 100.0, 100.0) == h[-1, -1]


def test_heightmap_validation():
    with pytest.raises(ConfigurationError):
        Heightmap(resolution=0.0, origin=(0, 0), heights=np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        Heightmap(resolution=0.1, origin=(0, 0), heights=np.array([[np.nan]]))
    with pytest.raises(ConfigurationError):
        Heightmap(resolution=0.1, origin=(0, 0), heights=np.zeros((0, 3)))


def test_heightmap_csv_round_trip(tmp_path):
    m = generate_terrain(TerrainSpec(kind="rough", difficulty=0.4, seed=9, size=(1.0, 1.0)))
    m.to_csv(tmp_path / "grid.csv")
    back = Heightmap.from_csv(tmp_path / "grid.csv", m.resolution, m.origin)
    assert np.array_equal(back.heights, m.heights)


def test_scan_flat_and_length():
    m = generate_terrain(TerrainSpec(kind="flat", **SMALL))
    scan = height_scan(m, (0.3, -0.2, 1.0))
    assert scan.shape == (441,) and not scan.any()


@settings(max_examples=30, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5), st.floats(-np.pi, np.pi))
def test_scan_yaw_periodic(x, y, yaw):
    m = generate_terrain(TerrainSpec(kind="rough", difficulty=1.0, seed=4, **SMALL))
    a = height_scan(m, (x, y, yaw))
    b = height_scan(m, (x, y, yaw + 2 * np.pi))
    assert a.shape == (441,)
    assert np.max(np.abs(a - b)) < 1e-9


def test_scan_reproduces_slope_gradient():
    spec = TerrainSpec(kind="slope", difficulty=0.5, size=(8.0, 8.0), platform=0.0)
    m = generate_terrain(spec)
    grade = np.tan(np.radians(32.10 * 0.5))
    scan = height_scan(m, (2.5, 0.0, 0.0)).reshape(21, 21)
    fwd = np.arange(-10, 11) * 0.10
    fit = np.polyfit(fwd, scan[:, 10], 1)[0]
    assert fit == pytest.approx(grade, rel=0.05)
    # Each sample is within one cell's rise of the analytic plane.
    assert np.max(np.abs(scan[:, 10] - grade * fwd)) <= grade * m.resolution * (1 + 1e-9)


def test_stack_requires_matching_maps():
    a = generate_terrain(TerrainSpec(kind="flat", **SMALL))
    b = generate_terrain(TerrainSpec(kind="flat", size=(2.0, 2.0)))
    with pytest.raises(ConfigurationError):
        HeightmapStack([a, b])
    with pytest.raises(ConfigurationError):
        HeightmapStack([])
    s = HeightmapStack([a, generate_terrain(TerrainSpec(kind="stairs", **SMALL))])
    assert s.height_at(np.array([0, 1]), np.array([0.9, 0.9]), np.zeros(2)) == pytest.approx([0.0, 0.4])


def test_curriculum_promotes_and_demotes():
    cur = TerrainCurriculum(2, CurriculumConfig(levels=5, window=4, promote_rate=0.75, demote_streak=3))
    for ok in (True, True, True, False):
        cur.record(0, ok)
    assert cur.levels[0] == 1
    for _ in range(3):
        cur.record(0, False)
    assert cur.levels[0] == 0
    for _ in range(3):
        cur.record(1, False)
    assert cur.levels[1] == 0
    assert cur.difficulty(4) == pytest.approx(1.0)
