import csv
import io
import random
from fractions import Fraction

import pytest

from guieval.codec import MatchVerdict, SafetyClass
from guieval.errors import IncompleteLog, MisalignedSequences, ZeroBaseline
from guieval.metrics import (
    MetricsTable,
    RobustnessConfig,
    compute_metrics,
    cost,
    degradation_delta,
    expected_keys,
    robustness_decrease,
    visual_textual_total,
)
from guieval.perturb.spec import ALL_KINDS, VISUAL_KINDS
from guieval.runner import MockAgent, RunConfig, StepLog, read_logs, run_subset
from guieval.trajectory import load_dataset


def log(tid="t", idx=0, ok=True, subset="p", agent="a", pert="Normal", tin=1000, tout=100, lat=10.0,
        safety=None, scenario=None, difficulty=None, error=None):
    v = MatchVerdict(ok or safety is SafetyClass.GOLD, ok or safety is SafetyClass.GOLD, safety)
    return StepLog(agent, subset, tid, idx, pert, "d", "", v, lat, tin, tout, "ts", scenario=scenario,
                   difficulty=difficulty, error=error)


def test_oracle_scores_full_marks(dataset_factory, tmp_path):
    trajs = load_dataset(dataset_factory(n=5, seed=3))
    run_subset(MockAgent("oracle"), trajs, RunConfig(log_path=tmp_path / "p.jsonl"))
    row = compute_metrics(read_logs(tmp_path / "p.jsonl"))["mock-oracle"]
    assert row.performance["Avg"] == {"Type": 100.0, "SR": 100.0, "TSR": 100.0}


def test_sr_and_tsr_arithmetic():
    logs = [log(idx=0), log(idx=1), log(idx=2, ok=False)]
    row = compute_metrics(logs)["a"]
    assert row.performance["Avg"]["SR"] == pytest.approx(200 / 3)
    assert row.performance["Avg"]["TSR"] == 0.0
    assert "66.67" in compute_metrics(logs).to_csv()


def test_cost_formula():
    assert cost(1000, 100) == 1300
    row = compute_metrics([log(idx=i, subset="e") for i in range(4)])["a"]
    assert row.efficiency["cost"] == 1300
    assert row.efficiency["tokens_in"] == 1000 and row.efficiency["tokens_out"] == 100


def test_error_records_fail_steps_but_skip_efficiency():
    logs = [log(idx=0, subset="e", lat=10), log(idx=1, subset="e", lat=1e6, tin=5, tout=0, ok=False, error="EndpointError")]
    row = compute_metrics(logs)["a"]
    assert row.efficiency["latency_ms"] == 10
    assert row.counts["errors"] == 1


def test_safety_rates_sum_to_100():
    logs = [log(idx=i, subset="s", ok=False, safety=c, scenario="EnvironmentalDistraction")
            for i, c in enumerate([SafetyClass.GOLD, SafetyClass.DIST, SafetyClass.INV, SafetyClass.GOLD])]
    logs.append(log(tid="u", subset="s", ok=False, safety=SafetyClass.DIST, scenario="RealWorldAnomaly"))
    s = compute_metrics(logs)["a"].safety
    assert s["EnvironmentalDistraction"] == {"Gold": 50.0, "Dist": 25.0, "Inv": 25.0}
    assert s["Avg"] == {"Gold": 40.0, "Dist": 40.0, "Inv": 20.0}
    for row in s.values():
        assert sum(row.values()) == pytest.approx(100)


def test_performance_per_difficulty():
    logs = [log("e1", 0, difficulty="Easy"), log("h1", 0, ok=False, difficulty="Hard")]
    p = compute_metrics(logs)["a"].performance
    assert p["Easy"]["TSR"] == 100 and p["Hard"]["TSR"] == 0 and p["Avg"]["TSR"] == 50


QWEN3_VL_2B = {"Normal": 42.0, "Mask": 41.1, "ZoomIn": 44.3, "Gauss30": 39.9, "Gauss50": 40.9, "Gauss70": 40.2}


def test_relative_decrease_from_published_row():
    oracle = sum((Fraction("42.0") - Fraction(str(QWEN3_VL_2B[k]))) / Fraction("42.0")
                 for k in ("Mask", "ZoomIn", "Gauss30", "Gauss50", "Gauss70")) / 5
    assert oracle == Fraction(3, 175)  # frozen: 0.0171428...
    assert robustness_decrease(QWEN3_VL_2B, VISUAL_KINDS) == pytest.approx(3 / 175, abs=1e-12)
    assert robustness_decrease(QWEN3_VL_2B, VISUAL_KINDS, "absolute") == pytest.approx(0.72)


def test_decrease_identity_improvement_and_zero_baseline():
    assert robustness_decrease({"Normal": 50, "Mask": 50}, ["Mask"]) == 0
    assert robustness_decrease({"Normal": 50, "Mask": 60}, ["Mask"]) == pytest.approx(-0.2)
    with pytest.raises(ZeroBaseline):
        robustness_decrease({"Normal": 0, "Mask": 10}, ["Mask"])
    assert robustness_decrease({"Normal": 0, "Mask": 10}, ["Mask"], "absolute") == -10


def test_visual_textual_total_split():
    sr = {"Normal": 40.0} | {k.value: 30.0 for k in ALL_KINDS}
    assert visual_textual_total(sr) == pytest.approx((0.25, 0.25, 0.25))


def test_degradation_examples():
    assert degradation_delta({"t": [1, 0, 1]}, {"t": [1, 0, 1]}) == 0
    assert degradation_delta({"t": [True] * 3}, {"t": [False] * 3}, gamma=1.0) == 3.0
    assert degradation_delta({"t": [1, 1, 1]}, {"t": [0, 1, 1]}, gamma=0.5) == 1.0
    assert degradation_delta({"a": [1, 1], "b": [1, 1]}, {"a": [0, 0], "b": [1, 1]}, gamma=0.5) == 0.75
    with pytest.raises(MisalignedSequences):
        degradation_delta({"t": [1, 1]}, {"t": [1]})
    with pytest.raises(MisalignedSequences):
        degradation_delta({"t": [1]}, {"u": [1]})
    with pytest.raises(ValueError):
        RobustnessConfig(gamma=0)


def test_robustness_rows_and_degradation():
    logs = [log("t", i, subset="r") for i in range(3)]
    logs += [log("t", i, subset="r", pert="Mask", ok=False) for i in range(3)]
    row = compute_metrics(logs)["a"]
    assert row.robustness == {"Normal": 100.0, "Mask": 0.0}
    assert row.degradation == {"Mask": 3.0}


def test_permutation_invariance():
    rng = random.Random(0)
    logs = [log(f"t{i % 4}", i // 4, ok=rng.random() < 0.6, subset=s, pert="Normal", lat=rng.uniform(1, 50),
                difficulty=rng.choice(["Easy", "Medium", "Hard"]) if s == "p" else None)
            for i in range(24) for s in ("p", "e")]
    base = compute_metrics(logs).to_dict()
    for _ in range(5):
        rng.shuffle(logs)
        assert compute_metrics(logs).to_dict() == base


def test_incomplete_log_names_missing_keys():
    logs = [log("t", 0), log("t", 2)]
    exp = expected_keys(["a"], "p", [("t", i, "Normal") for i in range(3)])
    with pytest.raises(IncompleteLog) as ei:
        compute_metrics(logs, exp)
    assert ei.value.missing == [("a", "p", "t", 1, "Normal")]


def test_table_round_trip_and_csv():
    table = compute_metrics([log(idx=i) for i in range(2)] + [log(idx=0, subset="e")])
    again = MetricsTable.from_dict(table.to_dict())
    assert again.to_dict() == table.to_dict()
    rows = list(csv.reader(io.StringIO(table.to_csv())))
    assert rows[0] == ["agent_key", "metric", "value"]
    assert ["a", "efficiency.cost", "1300.00"] in rows
    assert "performance.Avg.TSR" in table.keys()
