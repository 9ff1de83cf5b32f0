import numpy as np
import pytest

from sparsehm.gridmodel import (
    Ensemble,
    ReservoirModel,
    build_grid,
    devectorize,
    load_matrix,
    load_model_csv,
    save_matrix,
    save_model_csv,
    vectorize,
    vertical_average,
)


def make_model(grid, rng):
    lnKx = rng.normal(4.0, 1.0, grid.shape)
    phi = np.clip(0.05 + 0.02 * lnKx, 0.01, 0.3)
    lnKz = lnKx - 1.0
    return ReservoirModel(lnKx=lnKx, phi=phi, lnKz=lnKz)


def test_build_grid_punq_scale_active_count():
    # a 19 x 28 x 5 grid with exactly 1761 active cells
    n_cells = 19 * 28 * 5
    rng = np.random.default_rng(7)
    mask = np.zeros(n_cells, dtype=bool)
    mask[rng.choice(n_cells, size=1761, replace=False)] = True
    grid = build_grid(19, 28, 5, 180.0, 180.0, [5.0] * 5, mask)
    assert grid.n_active == 1761


def test_build_grid_single_cell():
    grid = build_grid(1, 1, 1, 1.0, 1.0, [1.0], np.array([True]))
    assert grid.n_cells == 1 and grid.n_active == 1


def test_build_grid_counts_inactive_by_hand():
    mask = np.ones(4 * 3 * 2, dtype=bool)
    mask[[0, 5, 7, 13, 21]] = False
    grid = build_grid(4, 3, 2, 10.0, 10.0, [2.0, 3.0], mask)
    assert grid.n_active == 24 - 5


def test_build_grid_rejects_bad_inputs():
    with pytest.raises(ValueError):
        build_grid(0, 1, 1, 1.0, 1.0, [1.0])
    with pytest.raises(ValueError):
        build_grid(2, 2, 1, 1.0, 1.0, [1.0], np.zeros(4, dtype=bool))
    with pytest.raises(ValueError):
        build_grid(2, 2, 1, 1.0, 1.0, [1.0], np.ones(5, dtype=bool))
    with pytest.raises(ValueError):
        build_grid(2, 2, 2, 1.0, 1.0, [1.0])  # dz length mismatch


def test_cell_ordering_is_x_fastest():
    grid = build_grid(3, 2, 2, 1.0, 1.0, [1.0, 1.0])
    assert grid.cell_index(1, 0, 0) == 1
    assert grid.cell_index(0, 1, 0) == 3
    assert grid.cell_index(0, 0, 1) == 6
    # vectorize follows the same order
    lnKx = np.arange(12, dtype=float).reshape(grid.shape)
    model = ReservoirModel(lnKx=lnKx, phi=np.full(grid.shape, 0.2), lnKz=lnKx)
    assert np.array_equal(vectorize(model, grid), np.arange(12.0))


def test_vectorize_constant_field():
    mask = np.ones(8, dtype=bool)
    mask[2] = False
    grid = build_grid(2, 2, 2, 1.0, 1.0, [1.0, 1.0], mask)
    model = ReservoirModel(
        lnKx=np.full(grid.shape, 3.7), phi=np.full(grid.shape, 0.2), lnKz=np.full(grid.shape, 1.0)
    )
    v = vectorize(model, grid)
    assert v.shape == (7,)
    assert np.all(v == 3.7)


def test_vectorize_single_cell():
    grid = build_grid(1, 1, 1, 1.0, 1.0, [1.0])
    model = ReservoirModel(lnKx=np.array([[[3.2]]]), phi=np.array([[[0.2]]]), lnKz=np.array([[[1.0]]]))
    assert np.array_equal(vectorize(model, grid), [3.2])


def test_round_trip_bit_identical():
    rng = np.random.default_rng(11)
    mask = rng.random(5 * 4 * 3) > 0.3
    mask[0] = True
    grid = build_grid(5, 4, 3, 2.0, 2.0, [1.0, 2.0, 3.0], mask)
    state = rng.normal(size=grid.n_active)
    assert np.array_equal(vectorize_like(grid, state), state)


def vectorize_like(grid, state):
    field = devectorize(state, grid)
    model = ReservoirModel(lnKx=field, phi=np.full(grid.shape, 0.2), lnKz=field)
    return vectorize(model, grid)


def test_devectorize_rejects_wrong_length():
    grid = build_grid(2, 2, 1, 1.0, 1.0, [1.0])
    with pytest.raises(ValueError):
        devectorize(np.zeros(3), grid)


def test_ensemble_invariants():
    with pytest.raises(ValueError):
        Ensemble(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        Ensemble(np.zeros((3, 4)), kind="bogus")
    e = Ensemble(np.zeros((3, 4)))
    assert e.n_members == 3 and e.state_length == 4
    with pytest.raises(ValueError):
        e.members[0, 0] = 1.0  # immutable


def test_vertical_average_thickness_weighted():
    grid = build_grid(2, 1, 2, 1.0, 1.0, [1.0, 3.0])
    field = np.zeros(grid.shape)
    field[0] = 2.0
    field[1] = 6.0
    avg = vertical_average(field, grid)
    assert np.allclose(avg, (2.0 * 1.0 + 6.0 * 3.0) / 4.0)


def test_vertical_average_masks_empty_columns():
    mask = np.ones((1, 1, 2), dtype=bool)
    mask[0, 0, 1] = False
    grid = build_grid(2, 1, 1, 1.0, 1.0, [1.0], mask)
    avg = vertical_average(np.ones(grid.shape), grid)
    assert avg[0, 0] == 1.0 and np.isnan(avg[0, 1])


def test_model_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    mask = rng.random(3 * 3 * 2) > 0.2
    mask[0] = True
    grid = build_grid(3, 3, 2, 1.0, 1.0, [1.0, 1.0], mask)
    model = make_model(grid, rng)
    path = tmp_path / "model.csv"
    save_model_csv(path, model, grid)
    loaded = load_model_csv(path, grid)
    act = grid.active
    assert np.array_equal(loaded.lnKx[act], model.lnKx[act])
    assert np.array_equal(loaded.phi[act], model.phi[act])
    assert np.array_equal(loaded.lnKz[act], model.lnKz[act])


def test_flat_binary_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    m = rng.normal(size=(7, 13))
    path = tmp_path / "m.bin"
    save_matrix(path, m)
    assert np.array_equal(load_matrix(path), m)
    # header is little-endian with the documented magic
    raw = path.read_bytes()
    assert raw[:4] == b"SHMB"
    assert int.from_bytes(raw[8:12], "little") == 7
