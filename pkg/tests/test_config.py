import json

import numpy as np
import pytest

from bodyimage.config import (
    FIXTURES,
    ModelFile,
    PhaseSpec,
    ScheduleSpec,
    load_model_file,
    parse_model_file,
    resolve_log_dir,
)
from bodyimage.errors import ModelFileError


@pytest.mark.parametrize("name", FIXTURES)
def test_fixtures_load_and_build(name):
    model = load_model_file(name)
    chain = model.build_chain()
    routing = model.build_routing(chain)
    plant = model.build_plant(chain, routing)
    assert model.name == name
    assert plant.n_muscles == routing.n_muscles
    assert plant.chain.n_joints == len(model.chain.links)
    assert model.schedule.phases


def test_planar_fixture_contents(planar_model, chain):
    assert chain.names == ["shoulder", "elbow"]
    np.testing.assert_allclose(np.degrees(chain.lower), [-75.0, -85.0])
    assert [m.name for m in planar_model.routing.muscles][:2] == ["shoulder_flexor", "shoulder_extensor"]
    assert planar_model.grasp.mass == 1.4


def test_arm_fixture_has_redundant_muscles():
    model = load_model_file("arm_4dof")
    chain = model.build_chain()
    assert chain.n_joints == 4
    assert model.build_routing(chain).n_muscles == 8


def test_model_dump_round_trip(planar_model):
    assert ModelFile.model_validate(planar_model.model_dump()) == planar_model


def test_unknown_key_reports_location(planar_model):
    data = planar_model.model_dump()
    data["plant"]["softness"] = 1.0
    with pytest.raises(ModelFileError, match=r"plant\.softness"):
        parse_model_file(json.dumps(data))


def test_malformed_json_reports_line_and_column():
    with pytest.raises(ModelFileError, match=r"line 3 column"):
        parse_model_file('{\n  "name": "x",\n  "chain": ,\n}')


def test_missing_source_is_reported():
    with pytest.raises(ModelFileError, match="no such model file"):
        load_model_file("does_not_exist")


def test_model_file_from_path(tmp_path, planar_model):
    path = tmp_path / "model.json"
    path.write_text(planar_model.model_dump_json(), encoding="utf-8")
    assert load_model_file(path) == planar_model


def test_loads_phase_needs_forces():
    with pytest.raises(ValueError):
        PhaseSpec(kind="loads")
    assert PhaseSpec(kind="loads", loads_n=[(0.0, -10.0, 0.0)]).loads_n == [(0.0, -10.0, 0.0)]


def test_control_schedule_switches_updates_off(planar_model):
    control = planar_model.schedule.without_updates()
    assert isinstance(control, ScheduleSpec)
    assert len(control.phases) == len(planar_model.schedule.phases)
    assert not any(p.antagonism or p.vision for p in control.phases)


def test_builders(planar_model, chain):
    params = planar_model.control_params()
    np.testing.assert_allclose(params.bias(4), 20.0)
    gate = planar_model.make_gate()
    assert gate.window == planar_model.estimator.static_window
    assert gate.movement_threshold == pytest.approx(np.radians(3.0))
    assert planar_model.minibatch_spec().n_random == planar_model.updaters.n_random
    softness = planar_model.softness(4)
    np.testing.assert_allclose(softness.interference.sum(axis=1), 0.5)


def test_nominal_plant_uses_nominal_routing(planar_model, chain, routing):
    plant = planar_model.build_plant(chain, routing, perturbed=False)
    assert plant.routing is routing
    assert plant.perturbation_magnitude == 0.0


def test_resolve_log_dir_prefers_explicit(tmp_path, monkeypatch):
    monkeypatch.setenv("BODYIMAGE_LOG_DIR", str(tmp_path / "env"))
    assert resolve_log_dir(tmp_path / "explicit") == tmp_path / "explicit"
    assert resolve_log_dir() == tmp_path / "env"
    assert (tmp_path / "env").is_dir()


def test_resolve_log_dir_reads_dotenv(tmp_path, monkeypatch):
    monkeypatch.delenv("BODYIMAGE_LOG_DIR", raising=False)
    monkeypatch.chdir(tmp_path)
    (tmp_path / ".env").write_text(f"BODYIMAGE_LOG_DIR={tmp_path / 'dotenv'}\n", encoding="utf-8")
    assert resolve_log_dir() == tmp_path / "dotenv"
    monkeypatch.delenv("BODYIMAGE_LOG_DIR", raising=False)


def test_frozen_links_reach_the_chain(planar_model):
    assert not planar_model.build_chain().frozen.any()
    data = planar_model.model_dump()
    data["chain"]["links"][0]["frozen"] = True
    chain = ModelFile.model_validate(data).build_chain()
    np.testing.assert_array_equal(chain.frozen, [True, False])


def test_measurement_model_choice_is_validated(planar_model):
    assert planar_model.estimator.measurement_model == "sbi"
    data = planar_model.model_dump()
    data["estimator"]["measurement_model"] = "geometry"
    assert ModelFile.model_validate(data).estimator.measurement_model == "geometry"
    data["estimator"]["measurement_model"] = "oracle"
    with pytest.raises(ModelFileError, match=r"estimator\.measurement_model"):
        parse_model_file(json.dumps(data))
