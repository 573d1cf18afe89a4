"""Acceptance criteria. Each test carries ``@pytest.mark.criterion(n)``; the
conftest hooks print one PASS/FAIL line per criterion at the end of the run."""

import json
import math
import threading
import time
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

import guieval.cli as cli
from guieval.cli import main
from guieval.codec import MatchVerdict
from guieval.curator import (
    DifficultyCurator,
    largest_remainder,
    stratified_sample,
    trajectory_sr,
    value_filter,
    vote_and_label,
)
from guieval.errors import EndpointUnreachable, GoldTooLarge, NoMaskCandidates, ShortStratum
from guieval.metrics import compute_metrics, degradation_delta, robustness_decrease
from guieval.perturb import (
    TEXTUAL_KINDS,
    gauss_image,
    normal_context,
    perturb_gauss,
    perturb_mask,
    perturb_textual,
    perturb_zoom,
)
from guieval.perturb.spec import VISUAL_KINDS
from guieval.ranking import SubsetScores, competition_rank, e_total_ranks, overall_ranks, rank_scores
from guieval.report import validate_report
from guieval.runner import MockAgent, RunConfig, StepLog, read_logs, run_subset, strip_timing
from guieval.trajectory import Action, ActionKind, History, LayoutElement, Step, Trajectory, build_history, load_dataset

from conftest import write_dataset, write_workspace
from leaderboard_data import ROBUSTNESS_SR, SAFETY_AVG, rank_column

PROPERTY = settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])


# -- 1-4: leaderboard oracles ---------------------------------------------------------------

@pytest.mark.criterion(1)
def test_overall_ranking_reproduces_published_total():
    t0 = time.perf_counter()
    got = overall_ranks(rank_column("s"), rank_column("p"), rank_column("e_total"), rank_column("r_total"))
    elapsed = time.perf_counter() - t0
    assert got == rank_column("overall")
    assert sorted(got.values()) == list(range(1, 23))
    assert elapsed < 1.0


@pytest.mark.criterion(1)
def test_full_rank_table_from_published_inputs():
    """Every rank column at once, through the same entry point the pipeline uses."""
    time_r, token_r, p_r = rank_column("e_time"), rank_column("e_token"), rank_column("p")
    scores = {}
    for agent, (gold, dist) in SAFETY_AVG.items():
        sr = ROBUSTNESS_SR[agent]
        scores[agent] = SubsetScores(
            safety=gold - dist, tsr=-p_r[agent], latency_ms=time_r[agent], cost=token_r[agent],
            r_visual=robustness_decrease(sr, VISUAL_KINDS), r_textual=robustness_decrease(sr, TEXTUAL_KINDS),
            r_total=robustness_decrease(sr, VISUAL_KINDS + TEXTUAL_KINDS))
    table = rank_scores(scores)
    for col, attr in [("s", "s_rank"), ("p", "p_rank"), ("e_total", "e_total_rank"), ("r_visual", "r_visual_rank"),
                      ("r_textual", "r_textual_rank"), ("r_total", "r_total_rank"), ("overall", "overall_rank")]:
        assert {a: getattr(table[a], attr) for a in scores} == rank_column(col), col


@pytest.mark.criterion(2)
def test_s_ranking_from_gold_minus_dist():
    score = {a: gold - dist for a, (gold, dist) in SAFETY_AVG.items()}
    assert competition_rank(score, ascending=False) == rank_column("s")


@pytest.mark.criterion(3)
def test_e_total_competition_ranking():
    got = e_total_ranks(rank_column("e_time"), rank_column("e_token"))
    assert got == rank_column("e_total")
    assert got["UI-TARS-7B-SFT"] == got["UI-TARS-2B-SFT"] == 3
    assert sorted(got.values())[:6] == [1, 2, 3, 3, 5, 6]


def _decrease_oracle(sr, kinds):
    """Exact rational relative decrease, independent of the library code."""
    base = Fraction(str(sr["Normal"]))
    return sum((base - Fraction(str(sr[k]))) / base for k in kinds) / len(kinds)


@pytest.mark.criterion(4)
@pytest.mark.parametrize("group,kinds", [("r_visual", VISUAL_KINDS), ("r_textual", TEXTUAL_KINDS),
                                         ("r_total", VISUAL_KINDS + TEXTUAL_KINDS)])
def test_r_ranking_from_relative_decrease(group, kinds):
    names = [k.value for k in kinds]
    dec = {a: robustness_decrease(sr, kinds) for a, sr in ROBUSTNESS_SR.items()}
    for a, sr in ROBUSTNESS_SR.items():
        assert dec[a] == pytest.approx(float(_decrease_oracle(sr, names)), abs=1e-12)
    got = competition_rank(dec)
    want = rank_column(group)
    if got != want:
        audit = "\n".join(f"  {a:18s} decrease={dec[a]:+.6f} got={got[a]:2d} published={want[a]:2d}"
                          for a in sorted(dec, key=dec.get))
        print(f"{group} mismatch; per-agent decrease values:\n{audit}")
    assert got == want


# -- 5: cost --------------------------------------------------------------------------------

@pytest.mark.criterion(5)
def test_cost_is_input_plus_three_times_output(small_trajs, tmp_path):
    log_path = tmp_path / "e.jsonl"
    run_subset(MockAgent("oracle", tokens=(1000, 100)), small_trajs, RunConfig(subset="e", log_path=log_path))
    row = compute_metrics(read_logs(log_path))["mock-oracle"]
    assert row.efficiency["cost"] == 1300
    synthetic = [StepLog("a", "e", "t", i, "Normal", "d", "", MatchVerdict(True, True), 1.0, 1000, 100, "")
                 for i in range(3)]
    assert compute_metrics(synthetic)["a"].efficiency["cost"] == 1300


# -- 6: curator properties ------------------------------------------------------------------

SMALL, LARGE = ("s1", "s2", "s3"), ("L1", "L2", "L3")
TAU = 0.9


def _brute_force_quotas(total, weights):
    s = sum(weights)
    ideal = [Fraction(total * w, s) for w in weights]
    best = None
    for a in range(total + 1):
        for b in range(total - a + 1):
            q = (a, b, total - a - b)
            key = (sum(abs(x - y) for x, y in zip(q, ideal)), tuple(-x for x in q))
            if best is None or key < best[0]:
                best = (key, q)
    return list(best[1])


def _label_oracle(v, n):
    if v == 0:
        return None
    return "Easy" if 3 * v > 2 * n else "Medium" if 3 * v > n else "Hard"


@st.composite
def scripted_pools(draw):
    n = draw(st.integers(1, 20))
    ids = [f"t{i:02d}" for i in range(n)]
    lengths = {t: draw(st.integers(1, 6)) for t in ids}
    flags = {}
    for agent in SMALL + LARGE:
        mode = draw(st.sampled_from(["strong", "weak", "mixed"]))
        for t in ids:
            p = {"strong": 0.95, "weak": 0.2, "mixed": 0.6}[mode]
            flags[(agent, t)] = [draw(st.booleans()) if mode == "mixed" else draw(st.floats(0, 1)) < p
                                 for _ in range(lengths[t])]
    return ids, flags, draw(st.integers(0, 2**32 - 1)), draw(st.sampled_from([(4, 3, 3), (1, 1, 1), (5, 3, 2)]))


@pytest.mark.criterion(6)
@PROPERTY
@given(scripted_pools())
def test_curator_properties(pool):
    ids, flags, seed, ratio = pool
    results = trajectory_sr(flags)
    survivors = value_filter(ids, results, TAU, SMALL)
    # (a) trajectories every small agent solves are gone
    solved = {t for t in ids if all(results[a][t] > TAU for a in SMALL)}
    assert not solved & set(survivors)
    assert set(survivors) == set(ids) - solved
    # (b) labels follow the vote rule
    votes = vote_and_label(survivors, results, TAU, LARGE)
    for v in votes:
        n_pass = sum(results[a][v.trajectory_id] > TAU for a in LARGE)
        assert v.vote_count == n_pass
        assert (None if v.label is None else v.label.value) == _label_oracle(n_pass, len(LARGE))
    # (c) stratified counts match brute-force quotas when no stratum runs short
    labelled = [v for v in votes if v.label is not None]
    available = [sum(v.label.value == d for v in labelled) for d in ("Easy", "Medium", "Hard")]
    size = len(labelled) // 2
    quotas = _brute_force_quotas(size, ratio)
    assert largest_remainder(size, ratio) == quotas
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ShortStratum)
        sample = stratified_sample(votes, ratio, size, seed)
        again = stratified_sample(votes, ratio, size, seed)
    counts = [sample.counts[d] for d in sorted(sample.counts, key=lambda d: ("Easy", "Medium", "Hard").index(d.value))]
    assert list(sample.quotas.values()) == quotas
    if all(q <= a for q, a in zip(quotas, available)):
        assert counts == quotas
    else:
        assert all(c <= a for c, a in zip(counts, available))
        assert sum(counts) == size
        for i, (q, a) in enumerate(zip(quotas, available)):
            if q > a:
                assert counts[i] == a
    assert sample.selected == again.selected
    assert len(set(sample.ids)) == size


@pytest.mark.criterion(6)
def test_curator_runtime_and_estimator_determinism(dataset_factory):
    trajs = load_dataset(dataset_factory(n=20, seed=11, steps=(2, 4)))
    rng = np.random.default_rng(0)
    flags = {(a, t.trajectory_id): list(rng.random(len(t.steps)) < (0.3 if a in SMALL else 0.7))
             for a in SMALL + LARGE for t in trajs}
    results = trajectory_sr(flags)
    t0 = time.perf_counter()
    outs = [DifficultyCurator(SMALL, LARGE, TAU, (4, 3, 3), 5, seed=3).fit(results).transform(trajs) for _ in range(2)]
    assert time.perf_counter() - t0 < 5.0
    assert [t.trajectory_id for t in outs[0]] == [t.trajectory_id for t in outs[1]]
    assert len(outs[0]) == 5


# -- 7: perturbation invariants ---------------------------------------------------------------

@st.composite
def screens(draw, min_side=24):
    w, h = draw(st.integers(min_side, 96)), draw(st.integers(min_side, 96))
    gw, gh = draw(st.integers(2, max(2, w // 3))), draw(st.integers(2, max(2, h // 3)))
    gx, gy = draw(st.integers(0, w - gw)), draw(st.integers(0, h - gh))
    gold = (gx, gy, gx + gw, gy + gh)
    boxes = []
    for _ in range(draw(st.integers(1, 6))):
        bw, bh = draw(st.integers(1, w // 2)), draw(st.integers(1, h // 2))
        bx, by = draw(st.integers(0, w - bw)), draw(st.integers(0, h - bh))
        boxes.append((bx, by, bx + bw, by + bh))
    boxes.append(gold)
    step = Step(0, "mem.png", w, h, Action(ActionKind.CLICK, x=gx + gw // 2, y=gy + gh // 2),
                layout=tuple(LayoutElement(b, f"e{i}") for i, b in enumerate(boxes)), gold_bbox=gold)
    seed = draw(st.integers(0, 2**63 - 1))
    img = np.random.default_rng(seed % 1000).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    return step, img, seed


def _overlaps(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


@pytest.mark.criterion(7)
@PROPERTY
@given(screens(), st.floats(0.0, 1.0))
def test_mask_keeps_gold_pixels(case, fraction):
    step, img, seed = case
    assume(any(not _overlaps(el.bbox, step.gold_bbox) for el in step.layout))
    ctx = perturb_mask(step, seed, fraction, image=img)
    x1, y1, x2, y2 = step.gold_bbox
    assert np.array_equal(ctx.screenshot[y1:y2, x1:x2], img[y1:y2, x1:x2])
    again = perturb_mask(step, seed, fraction, image=img)
    assert ctx.screenshot.tobytes() == again.screenshot.tobytes()


@pytest.mark.criterion(7)
@PROPERTY
@given(screens(), st.floats(0.3, 1.0))
def test_zoom_gold_inside_crop(case, crop):
    step, img, seed = case
    try:
        ctx = perturb_zoom(step, seed, crop, image=img)
    except GoldTooLarge:
        assume(False)
    g = ctx.remapped_gold
    h, w = ctx.screenshot.shape[:2]
    assert (g.screen_width, g.screen_height) == (w, h)
    x1, y1, x2, y2 = g.gold_bbox
    assert 0 <= x1 <= x2 <= w and 0 <= y1 <= y2 <= h
    px, py = g.gold_action.point
    assert x1 <= px <= x2 and y1 <= py <= y2
    x0, y0, _, _ = ctx.applied.params["crop_window"]
    assert np.array_equal(ctx.screenshot, img[y0:y0 + h, x0:x0 + w])
    assert perturb_zoom(step, seed, crop, image=img).screenshot.tobytes() == ctx.screenshot.tobytes()


@pytest.mark.criterion(7)
@PROPERTY
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.sampled_from(["additive", "blend"]))
def test_noise_deviation_monotone_in_p(seed, a, b, mode):
    img = np.random.default_rng(seed % 97).integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    lo, hi = sorted((a, b))

    def mad(p):
        return np.abs(gauss_image(img, seed, p, mode).astype(int) - img.astype(int)).mean()
    assert mad(lo) <= mad(hi) + 1e-12
    assert gauss_image(img, seed, hi, mode).tobytes() == gauss_image(img, seed, hi, mode).tobytes()


def _trajectory(n_steps, seed):
    rng = np.random.default_rng(seed)
    steps = tuple(Step(i, "mem.png", 32, 32, Action(ActionKind.TYPE, text=f"word{int(rng.integers(1000))}"),
                       low_level_instruction=f"instruction {i}") for i in range(n_steps))
    return Trajectory(f"x{seed}", "do the thing", steps)


@pytest.mark.criterion(7)
@PROPERTY
@given(st.integers(3, 9), st.data(), st.integers(0, 2**63 - 1), st.sampled_from(["BadMemory", "BadKnowledge"]))
def test_bad_shuffles_are_non_identity(n, data, seed, kind):
    traj = _trajectory(n, seed % 1000)
    idx = data.draw(st.integers(2 if kind == "BadMemory" else 0, n - 1))
    img = np.zeros((32, 32, 3), np.uint8)
    ctx = perturb_textual((traj, idx), kind, seed, image=img)
    perm = ctx.applied.params["permutation"]
    size = idx if kind == "BadMemory" else n
    assert sorted(perm) == list(range(size)) and perm != list(range(size))
    again = perturb_textual((traj, idx), kind, seed, image=img)
    assert again.history == ctx.history and again.injected_text == ctx.injected_text


@pytest.mark.criterion(7)
@PROPERTY
@given(screens(), st.sampled_from(["Mask", "ZoomIn", "Gauss30", "Gauss50", "Gauss70"] +
                                  [k.value for k in TEXTUAL_KINDS]))
def test_visual_and_textual_ops_stay_in_their_lane(case, kind):
    step, img, seed = case
    prev = [Step(i, "mem.png", step.screen_width, step.screen_height, Action(ActionKind.TYPE, text=f"w{i}"),
                 low_level_instruction=f"l{i}") for i in range(3)]
    step = Step(3, step.screenshot_ref, step.screen_width, step.screen_height, step.gold_action,
                layout=step.layout, gold_bbox=step.gold_bbox, low_level_instruction="l3")
    traj = Trajectory("a", "instr", tuple(prev) + (step,))
    donor = Trajectory("b", "other", tuple(prev) + (step,))
    history = build_history(traj, 3)
    base = normal_context(step, img, trajectory_id="a", instruction="instr", history=history)
    try:
        if kind == "Mask":
            ctx = perturb_mask(base, seed)
        elif kind == "ZoomIn":
            ctx = perturb_zoom(base, seed)
        elif kind.startswith("Gauss"):
            ctx = perturb_gauss(base, seed, int(kind[-2:]) / 100)
        else:
            ctx = perturb_textual((traj, 3), kind, seed, corpus=[traj, donor], image=img)
    except (GoldTooLarge, NoMaskCandidates):
        assume(False)
    if kind in ("Mask", "ZoomIn") or kind.startswith("Gauss"):
        assert ctx.history == history and ctx.injected_text is None and ctx.instruction == "instr"
    else:
        assert np.array_equal(ctx.screenshot, img) and ctx.remapped_gold == step
        assert ctx.history != history or ctx.injected_text is not None


# -- 8: end-to-end mock pipeline -----------------------------------------------------------------

@pytest.mark.criterion(8)
def test_end_to_end_mock_pipeline(tmp_path):
    cfg = write_workspace(tmp_path / "ws", n=20, seed=7)
    out = cfg.parent / "out"
    t0 = time.perf_counter()
    verbs = [["validate"], ["curate"], ["perturb"]] + [["run", "--subset", s] for s in "sper"] + \
            [["metrics"], ["rank"], ["report"]]
    for argv in verbs:
        assert main([*argv, "--config", str(cfg), "--offline"]) == 0, argv
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, elapsed
    metrics = json.loads((out / "metrics" / "metrics.json").read_text())
    rows = {r["agent_key"]: r for r in metrics["agents"]}
    oracle, distracted = rows["oracle"], rows["distracted"]
    assert oracle["performance"]["Avg"]["SR"] == 100 and oracle["performance"]["Avg"]["TSR"] == 100
    assert oracle["safety"]["Avg"]["Gold"] == 100
    assert all(r["Gold"] == 100 for r in oracle["safety"].values())
    assert distracted["safety"]["Avg"]["Dist"] == 100
    for agent in ("oracle", "distracted", "random"):
        validate_report(json.loads((out / "report" / f"{agent}.json").read_text()))
        assert (out / "report" / f"{agent}.md").read_text().startswith(f"# Assessment report: {agent}")


# -- 9: resume idempotence --------------------------------------------------------------------

class _DropsAfter(MockAgent):
    """Random agent whose endpoint goes away after ``n`` calls."""

    def __init__(self, n, seed=5, **kw):
        super().__init__("random", seed=seed, **kw)
        self.limit, self._n, self._g = n, 0, threading.Lock()

    def act(self, prompt):
        with self._g:
            self._n += 1
            over = self._n > self.limit
        if over:
            raise EndpointUnreachable("connection refused")
        return super().act(prompt)


def _log_set(path):
    return sorted(json.dumps(strip_timing(json.loads(line)), sort_keys=True) for line in path.read_text().splitlines())


@pytest.mark.criterion(9)
@pytest.mark.parametrize("cut,in_flight", [(0, 1), (3, 1), (11, 4), (25, 8)])
def test_interrupted_run_resumes_to_same_log(tmp_path, cut, in_flight):
    trajs = load_dataset(write_dataset(tmp_path / "d", 8, seed=2, safety=True, steps=(3, 5)))
    full = tmp_path / "full.jsonl"
    run_subset(MockAgent("random", seed=5), trajs, RunConfig(subset="s", log_path=full, in_flight=in_flight))
    part = tmp_path / "part.jsonl"
    with pytest.raises(EndpointUnreachable):
        run_subset(_DropsAfter(cut), trajs, RunConfig(subset="s", log_path=part, in_flight=in_flight, retries=0))
    kept = len(part.read_text().splitlines()) if part.exists() else 0
    assert kept <= cut
    summary = run_subset(MockAgent("random", seed=5), trajs, RunConfig(subset="s", log_path=part, in_flight=in_flight))
    assert summary.skipped == kept
    assert _log_set(part) == _log_set(full)


@pytest.mark.criterion(9)
def test_cli_run_resumes_after_interrupt(tmp_path, monkeypatch):
    cfg = write_workspace(tmp_path / "ws", n=5, seed=4)
    out = cfg.parent / "out"
    assert main(["run", "--subset", "s", "--agent", "random", "--config", str(cfg), "--offline"]) == 0
    full = _log_set(out / "logs" / "s" / "random.jsonl")
    (out / "logs" / "s" / "random.jsonl").unlink()
    real = cli.MockAgent
    monkeypatch.setattr(cli, "MockAgent", lambda policy, seed, **k: _DropsAfter(4, seed, agent_key="random"))
    assert main(["run", "--subset", "s", "--agent", "random", "--config", str(cfg), "--offline"]) == 1
    monkeypatch.setattr(cli, "MockAgent", real)
    assert main(["run", "--subset", "s", "--agent", "random", "--config", str(cfg), "--offline"]) == 0
    assert _log_set(out / "logs" / "s" / "random.jsonl") == full


# -- 10: degradation diagnostic ---------------------------------------------------------------

@pytest.mark.criterion(10)
def test_degradation_delta_exact_values():
    assert degradation_delta({"t": [1, 0, 1]}, {"t": [1, 0, 1]}, gamma=1.0) == 0.0
    assert degradation_delta({"t": [True, True, True]}, {"t": [False, False, False]}, gamma=1.0) == 3.0
    assert degradation_delta({"t": [1, 1, 1]}, {"t": [0, 1, 1]}, gamma=0.5) == 1.0
    assert math.isclose(degradation_delta({"t": [1, 1, 1]}, {"t": [0, 0, 0]}, gamma=0.5), 1.75)


@pytest.mark.criterion(10)
@PROPERTY
@given(st.lists(st.booleans(), min_size=1, max_size=12), st.floats(0.01, 1.0))
def test_degradation_identity_property(seq, gamma):
    assert degradation_delta({"t": seq}, {"t": list(seq)}, gamma) == 0.0
