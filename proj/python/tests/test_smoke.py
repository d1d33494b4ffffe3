import numpy as np
import pytest

import coopclass


def tiny_config():
    c = coopclass.default_config()
    sim = c["data"]["simulation"]
    sim["dataset"].update(classes=4, dim=4, per_class=60, separation=6.0)
    sim["holdout_per_class"] = 30
    sim["profiles"] = [
        {"pair": [0, 1], "flip_rate": 0.6, "users_per_profile": 3, "coverage": 1.0},
        {"pair": [2, 3], "flip_rate": 0.6, "users_per_profile": 3, "coverage": 1.0},
    ]
    return c


def test_default_config_round_trips_through_hash():
    c = coopclass.default_config()
    assert coopclass.config_hash(c) == coopclass.config_hash(None)
    assert coopclass.config_hash(coopclass.apply_ablation(c, "lambda", 1)) != coopclass.config_hash(c)


def test_alteration_metrics_counts():
    r = coopclass.alteration_metrics([0, 1, 2, 2], [0, 2, 2, 1], [0, 1, 1, 2])
    assert r["incorrect"] == 2 and r["corrected"] == 2
    assert r["correct"] == 2 and r["broken"] == 1
    assert r["a_plus"] == 1.0 and r["a_minus"] == 0.5


def test_decision_table_sums_to_size():
    counts = coopclass.joint_decision_table([0, 1, 2], [0, 0, 2], [1, 1, 2], [0, 1, 0])
    assert sum(counts) == 3
    assert counts[4 + 2 + 0] == 0 and counts[4 + 0 + 0] == 1


def test_misaligned_streams_raise_with_kind():
    with pytest.raises(coopclass.CoopclassError) as info:
        coopclass.alteration_metrics([0, 1], [0], [0, 1])
    assert info.value.kind == "alignment"


def test_entry_condition_is_strict():
    assert not coopclass.entry_condition(0.9, 0.9)
    assert coopclass.entry_condition(0.91, 0.9)


def test_flip_matrix_round_trip():
    t = coopclass.flip_matrix(3, 0, 2, 0.25)
    assert np.allclose(t.sum(axis=1), 1.0)
    assert t[0, 2] == 0.25
    est = coopclass.estimate_transition_matrix([[0, 0, 0, 2], [1], [2, 2]], 3)
    assert est[0, 2] == 0.25 and est[2, 2] == 1.0


def test_pipeline_stops_at_requested_stage(tmp_path):
    manifest = coopclass.run_pipeline(tiny_config(), tmp_path / "run", until="consensus")
    assert set(manifest["stages"]) == {"data", "consensus"}
    with pytest.raises(coopclass.CoopclassError):
        coopclass.run_pipeline(tiny_config(), tmp_path / "run", until="deploy")
