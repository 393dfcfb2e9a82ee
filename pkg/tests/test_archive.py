import numpy as np
import pytest

from romocp import archive, ocp, rom, studies
from romocp.errors import ConfigurationError
from romocp.problems import (SamplingPlan, default_pollutant_mesh,
                             make_pollutant_problem, sample_parameters)


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    problem = make_pollutant_problem(default_pollutant_mesh(10))
    mus = sample_parameters(problem.parameter_box, SamplingPlan("uniform", 6, 5))
    snaps, _ = studies.collect_snapshots(problem, mus)
    cache = studies.build_cache(problem, snaps, 4)
    return problem, snaps, cache


def test_container_roundtrip(tmp_path):
    path = tmp_path / "blob.bin"
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(7),
              "c": np.array(2.5)}
    archive.save_container(path, {"kind": "test", "note": "x"}, arrays)
    meta, loaded = archive.load_container(path)
    assert meta["kind"] == "test"
    assert meta["container_version"] == 1
    for name, arr in arrays.items():
        np.testing.assert_array_equal(loaded[name], arr)


def test_container_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a container")
    with pytest.raises(ConfigurationError):
        archive.load_container(path)


def test_snapshot_roundtrip(tmp_path, trained):
    problem, snaps, _ = trained
    path = tmp_path / "snaps.bin"
    archive.save_snapshots(path, snaps, problem_config=problem.config)
    again = archive.load_snapshots(path, problem)
    assert again.count == snaps.count
    assert again.names == snaps.names
    assert again.scalar_variables == snaps.scalar_variables
    np.testing.assert_array_equal(again.training_parameters, snaps.training_parameters)
    for name in snaps.names:
        np.testing.assert_array_equal(again.variables[name], snaps.variables[name])
    with pytest.raises(ConfigurationError):
        archive.load_cache(path)


def test_cache_roundtrip_solves_identically(tmp_path, trained):
    problem, _, cache = trained
    path = tmp_path / "cache.bin"
    archive.save_cache(path, cache, problem)
    again = archive.load_cache(path)
    assert again.kind == cache.kind
    assert again.basis_count == cache.basis_count
    assert again.reduced_dimension == cache.reduced_dimension
    assert again.basis.blocks["y"] is again.basis.blocks["p"]
    mu = [0.8, -0.2, 0.6]
    a = rom.solve_reduced_linear(cache, mu)
    b = rom.solve_reduced_linear(again, mu)
    assert a.cost == pytest.approx(b.cost, rel=0, abs=0)
    for name in a.coefficients:
        np.testing.assert_array_equal(a.coefficients[name], b.coefficients[name])

    mesh = archive.cache_mesh(again)
    np.testing.assert_array_equal(mesh.triangles, problem.mesh.triangles)
    rebuilt = studies.problem_for_cache(again)
    assert rebuilt.kind == problem.kind
    assert rebuilt.truth_dimension == problem.truth_dimension
    truth_a = ocp.solve_truth(problem, mu)
    truth_b = ocp.solve_truth(rebuilt, mu)
    assert truth_a.cost == pytest.approx(truth_b.cost, rel=1e-12)
