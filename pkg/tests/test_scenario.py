from __future__ import annotations

import math

import pytest

from kubesim.scenario import (
    PRESETS,
    ScenarioError,
    ScenarioSpec,
    build,
    load_scenario_file,
    parse_scenario_file,
    preset,
)

REQUIRED_PRESETS = ("paper-native", "paper-istio", "etcd-ramdisk", "etcd-netdisk")


def test_required_presets_exist_and_build():
    for name in REQUIRED_PRESETS:
        spec = preset(name)
        assert spec.name == name
        assert spec.duration == 1200.0
        assert spec.hpa_max == 20
        assert spec.cluster.worker_nodes == 6
        assert spec.timing.t_delay == 20.0


def test_preset_contrasts():
    assert preset("paper-native").data_plane.kind == "native"
    assert preset("paper-istio").data_plane.kind == "mesh"
    assert preset("etcd-ramdisk").etcd_profile.name == "ram-disk"
    assert preset("etcd-netdisk").etcd_profile.name == "network-disk"
    for name in ("etcd-ramdisk", "etcd-netdisk"):
        s = preset(name)
        assert (s.initial_pods, s.workers) == (20, 90)
    assert preset("paper-native").initial_pods == 10


def test_config_hash_is_stable_and_sensitive():
    a = preset("paper-native")
    assert a.config_hash() == preset("paper-native").config_hash()
    assert a.config_hash() != a.replace(workers=121).config_hash()
    assert len(a.config_hash()) == 64


def test_unknown_nested_key_names_its_path():
    with pytest.raises(ScenarioError) as info:
        build(ScenarioSpec, {"name": "x", "timing": {"t_exce": 1.0}})
    assert info.value.path == "timing.t_exce"


def test_type_errors_are_reported():
    with pytest.raises(ScenarioError, match="expected an integer"):
        build(ScenarioSpec, {"name": "x", "workers": "ten"})
    with pytest.raises(ScenarioError, match="expected true/false"):
        build(ScenarioSpec, {"name": "x", "hpa_enabled": 1})


def test_infinite_timeout_spelling():
    spec = build(ScenarioSpec, {"name": "x", "timing": {"t_timeout": "inf"}})
    assert math.isinf(spec.timing.t_timeout)


def test_invariants_checked():
    with pytest.raises(ScenarioError):
        build(ScenarioSpec, {"name": "x", "initial_pods": 30, "hpa_max": 20})
    with pytest.raises(ScenarioError):
        build(ScenarioSpec, {"name": "x", "duration": 1.5})


def test_file_precedence_preset_then_defaults_then_entry():
    doc = {
        "master_seed": 4,
        "defaults": {"repetitions_target": 2, "duration": 60.0},
        "scenarios": [
            {"preset": "paper-native"},
            {"preset": "paper-istio", "name": "istio-short", "duration": 30.0},
        ],
    }
    f = parse_scenario_file(doc)
    assert f.master_seed == 4
    a, b = f.scenarios
    assert (a.name, a.repetitions_target, a.duration) == ("paper-native", 2, 60.0)
    assert (b.name, b.data_plane.kind, b.duration) == ("istio-short", "mesh", 30.0)


def test_file_rejects_duplicates_and_unknown_keys():
    with pytest.raises(ScenarioError, match="duplicate"):
        parse_scenario_file({"scenarios": [{"name": "a"}, {"name": "a"}]})
    with pytest.raises(ScenarioError) as info:
        parse_scenario_file({"scenarios": [{"name": "a", "podz": 3}]})
    assert "podz" in str(info.value)
    with pytest.raises(ScenarioError):
        parse_scenario_file({"scenario": []})
    with pytest.raises(ScenarioError):
        parse_scenario_file({"scenarios": [{"preset": "nope"}]})


def test_yaml_file_round_trip(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text("master_seed: 1\nscenarios:\n  - preset: etcd-netdisk\n    repetitions_target: 3\n")
    f = load_scenario_file(p)
    assert f.scenarios[0].repetitions_target == 3
    assert f.scenarios[0].etcd_profile.io_capacity == 150.0


def test_every_preset_resolves():
    for name in PRESETS:
        preset(name)
