import numpy as np
import pytest

from tools.errors import InvalidArgument, ShapeError
from tools.noise import (JumpMeasureSpec, NoisePerturbation, TimeGrid, apply_perturbation,
                         girsanov_shift, read_noise_dump, sample_batch, sample_noise,
                         write_noise_dump)


def test_sampling_is_deterministic(grid, jm):
    a = sample_noise(grid, 4, 2, jm, seed=3, path_index=5)
    b = sample_noise(grid, 4, 2, jm, seed=3, path_index=5)
    np.testing.assert_array_equal(a.dW, b.dW)
    np.testing.assert_array_equal(a.jump_times, b.jump_times)
    c = sample_noise(grid, 4, 2, jm, seed=3, path_index=6)
    assert not np.array_equal(a.dW, c.dW)


def test_batch_matches_single_paths(grid, jm):
    batch = sample_batch(grid, 3, 1, jm, seed=9, M=5, first_index=10)
    for m in range(5):
        single = sample_noise(grid, 3, 1, jm, seed=9, path_index=10 + m)
        np.testing.assert_array_equal(batch.dW[m], single.dW)
        np.testing.assert_array_equal(batch.dB[m], single.dB)
        np.testing.assert_array_equal(batch.counts[m], single.counts())
    np.testing.assert_array_equal(batch.path_indices, np.arange(10, 15))


def test_split_ensembles_agree(grid, jm):
    whole = sample_batch(grid, 2, 1, jm, seed=1, M=6)
    tail = sample_batch(grid, 2, 1, jm, seed=1, M=3, first_index=3)
    np.testing.assert_array_equal(whole.dW[3:], tail.dW)


def test_jump_times_in_open_closed_interval(grid, jm):
    for m in range(50):
        ng = sample_noise(grid, 1, 1, jm, seed=2, path_index=m)
        assert np.all(ng.jump_times > 0.0) and np.all(ng.jump_times <= grid.T)
        assert np.all(np.diff(ng.jump_times) >= 0.0)


def test_increment_and_jump_statistics(grid, jm):
    M = 2000
    batch = sample_batch(grid, 4, 1, jm, seed=5, M=M)
    assert batch.dW.var() == pytest.approx(grid.dt, rel=0.05)
    assert abs(batch.dB.mean()) < 4.0 * np.sqrt(grid.dt / batch.dB.size)
    per_path = batch.counts.sum(axis=(1, 2))
    lam_T = jm.total_intensity * grid.T
    assert abs(per_path.mean() - lam_T) < 4.0 * np.sqrt(lam_T / M)
    mark_share = batch.counts.sum(axis=(0, 1)) / per_path.sum()
    np.testing.assert_allclose(mark_share, jm.rates / jm.total_intensity, atol=0.04)


def test_cell_of_uses_right_closed_cells():
    grid = TimeGrid(T=1.0, n_steps=4)
    np.testing.assert_array_equal(grid.cell_of([0.25, 0.26, 1.0, 0.01]), [0, 1, 3, 0])


def test_empty_jump_measure_has_null_mark(grid):
    jm = JumpMeasureSpec()
    assert jm.K == 0 and jm.n_quadrature == 1
    np.testing.assert_array_equal(jm.integration_weights, [1.0])
    ng = sample_noise(grid, 2, 1, jm, seed=0, path_index=0)
    assert ng.jump_times.size == 0
    assert ng.counts().shape == (grid.n_steps, 0)


def test_gaussian_perturbation_touches_one_slot(grid, jm):
    ng = sample_noise(grid, 3, 2, jm, seed=0, path_index=0)
    bumped = apply_perturbation(ng, NoisePerturbation.gaussian_W(step=2, mode=1, bump=0.5))
    diff = bumped.dW - ng.dW
    assert diff[2, 1] == pytest.approx(0.5)
    assert np.count_nonzero(diff) == 1
    np.testing.assert_array_equal(bumped.dB, ng.dB)
    b = apply_perturbation(ng, NoisePerturbation.gaussian_B(step=0, comp=1, bump=-0.1))
    assert b.dB[0, 1] - ng.dB[0, 1] == pytest.approx(-0.1)


def test_added_jump_is_counted(grid, jm):
    ng = sample_noise(grid, 1, 1, jm, seed=4, path_index=0)
    out = apply_perturbation(ng, NoisePerturbation.add_jump(time=0.3, mark_index=2))
    delta = out.counts() - ng.counts()
    assert delta[grid.cell_of(0.3), 2] == 1 and delta.sum() == 1


def test_coincident_jump_is_rejected(grid, jm):
    ng = sample_noise(grid, 1, 1, jm, seed=4, path_index=0)
    once = apply_perturbation(ng, NoisePerturbation.add_jump(time=0.3, mark_index=0))
    assert np.all(np.diff(once.jump_times) > 0)
    with pytest.raises(InvalidArgument, match="already"):
        apply_perturbation(once, NoisePerturbation.add_jump(time=0.3, mark_index=1))


def test_perturbation_errors(grid, jm):
    ng = sample_noise(grid, 2, 1, jm, seed=0, path_index=0)
    with pytest.raises(InvalidArgument):
        apply_perturbation(ng, NoisePerturbation.add_jump(time=0.0, mark_index=0))
    with pytest.raises(InvalidArgument):
        apply_perturbation(ng, NoisePerturbation.add_jump(time=0.5, mark_index=3))
    with pytest.raises(InvalidArgument):
        apply_perturbation(ng, NoisePerturbation.gaussian_W(step=grid.n_steps, mode=0, bump=0.1))
    with pytest.raises(InvalidArgument):
        NoisePerturbation.gaussian_W(step=0, mode=0, bump=0.0)


def test_girsanov_shift_inverts(grid, jm, rng):
    ng = sample_noise(grid, 1, 2, jm, seed=0, path_index=0)
    h = rng.standard_normal(ng.dB.shape)
    back = girsanov_shift(girsanov_shift(ng, h), -h)
    np.testing.assert_allclose(back.dB, ng.dB, atol=1e-15)
    with pytest.raises(ShapeError):
        girsanov_shift(ng, np.ones((grid.n_steps, 3)))


def test_batch_path_view_keeps_counts(make_batch):
    batch = make_batch(M=5)
    for m in range(batch.M):
        np.testing.assert_array_equal(batch.path(m).counts(), batch.counts[m])


def test_noise_dump_round_trip(tmp_path, make_batch):
    batch = make_batch(M=7, seed=21)
    path = write_noise_dump(batch, tmp_path / "noise.bin")
    back = read_noise_dump(path)
    np.testing.assert_array_equal(back.dW, batch.dW)
    np.testing.assert_array_equal(back.dB, batch.dB)
    np.testing.assert_array_equal(back.counts, batch.counts)
    np.testing.assert_array_equal(back.path_indices, batch.path_indices)
    assert back.jm == batch.jm and back.seed == 21
    assert back.grid.n_steps == batch.grid.n_steps


def test_corrupt_noise_dumps_are_rejected(tmp_path, make_batch):
    good = write_noise_dump(make_batch(M=3), tmp_path / "noise.bin").read_bytes()
    bad_magic = tmp_path / "magic.bin"
    bad_magic.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(InvalidArgument):
        read_noise_dump(bad_magic)
    truncated = tmp_path / "short.bin"
    truncated.write_bytes(good[:-8])
    with pytest.raises(InvalidArgument):
        read_noise_dump(truncated)
