import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from guieval.trajectory import load_dataset

W, H = 120, 200
SCENARIOS = ("EnvironmentalDistraction", "RealWorldAnomaly", "AdversarialMisleading")
# distraction targets live in this band; gold boxes never reach it
DISTRACTION_BOX = [30, 160, 90, 190]


def _box(rng, y_max):
    w, h = int(rng.integers(8, 28)), int(rng.integers(8, 28))
    x1 = int(rng.integers(0, W - w))
    y1 = int(rng.integers(0, y_max - h))
    return [x1, y1, x1 + w, y1 + h]


def _gold(rng, i, n):
    if i == n - 1:
        return {"type": "COMPLETE"}, None
    kind = ["CLICK", "CLICK", "TYPE", "SCROLL", "LONG_PRESS", "OPEN_APP", "PRESS_BACK"][int(rng.integers(7))]
    box = _box(rng, 150)
    cx, cy = (box[0] + box[2]) // 2, (box[1] + box[3]) // 2
    if kind in ("CLICK", "LONG_PRESS"):
        return {"type": kind, "x": cx, "y": cy}, box
    if kind == "TYPE":
        return {"type": "TYPE", "text": f"query {i}"}, box
    if kind == "SCROLL":
        return {"type": "SCROLL", "direction": ["UP", "DOWN", "LEFT", "RIGHT"][int(rng.integers(4))]}, None
    if kind == "OPEN_APP":
        return {"type": "OPEN_APP", "app_name": "Settings"}, None
    return {"type": kind}, None


def make_trajectory(rng, root: Path, tid: str, n_steps: int, safety: bool = False) -> dict:
    img_dir = root / "img"
    img_dir.mkdir(parents=True, exist_ok=True)
    steps = []
    for i in range(n_steps):
        pixels = rng.integers(0, 256, size=(H, W, 3), dtype=np.uint8)
        name = f"{tid}_{i}.png"
        Image.fromarray(pixels, "RGB").save(img_dir / name)
        action, gbox = _gold(rng, i, n_steps)
        layout = [{"bbox": _box(rng, H), "label": f"el{j}"} for j in range(int(rng.integers(2, 6)))]
        step = {"step_idx": i, "screenshot_ref": f"img/{name}", "screen_width": W, "screen_height": H,
                "gold_action": action, "layout": layout,
                "low_level_instruction": f"do step {i} of {tid}"}
        if gbox is not None:
            step["gold_bbox"] = gbox
            layout.append({"bbox": gbox, "label": "target"})
        steps.append(step)
    t = {"trajectory_id": tid, "instruction": f"complete task {tid}", "source": "synthetic", "steps": steps}
    if safety:
        t["scenario"] = SCENARIOS[int(rng.integers(3))]
        x = (DISTRACTION_BOX[0] + DISTRACTION_BOX[2]) // 2
        y = (DISTRACTION_BOX[1] + DISTRACTION_BOX[3]) // 2
        t["distraction_action"] = {"type": "CLICK", "x": x, "y": y}
        t["distraction_bbox"] = list(DISTRACTION_BOX)
    return t


def write_dataset(root: Path, n: int, seed: int = 0, safety: bool = False, steps=(2, 5),
                  name: str = "data.json", prefix: str = "t") -> Path:
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    trajs = [make_trajectory(rng, root, f"{prefix}{k:03d}", int(rng.integers(steps[0], steps[1] + 1)), safety)
             for k in range(n)]
    path = root / name
    path.write_text(json.dumps({"dataset_id": name, "trajectories": trajs}), encoding="utf-8")
    return path


@pytest.fixture
def dataset_factory(tmp_path):
    def make(n=3, seed=0, safety=False, steps=(2, 5), name="data.json", prefix="t", sub="ds"):
        return write_dataset(tmp_path / sub, n, seed, safety, steps, name, prefix)
    return make


@pytest.fixture
def small_trajs(dataset_factory):
    return load_dataset(dataset_factory(n=3, seed=1, steps=(3, 3)))


@pytest.fixture
def safety_trajs(dataset_factory):
    return load_dataset(dataset_factory(n=4, seed=2, safety=True, sub="s", prefix="s"))


MOCK_AGENTS = {"oracle": "oracle", "distracted": "distracted", "random": "random"}


def write_workspace(root: Path, n: int = 20, seed: int = 0, steps=(2, 5), extra: str = "") -> Path:
    """Synthetic safety-annotated dataset plus a TOML config wiring three mock agents."""
    data = write_dataset(root / "data", n, seed, safety=True, steps=steps, prefix="w")
    endpoints = "".join(f'\n[[endpoints]]\nkey = "{k}"\nmock = "{p}"\n' for k, p in MOCK_AGENTS.items())
    cfg = root / "harness.toml"
    cfg.write_text(f"""seed = {seed}
output_dir = "out"
{extra}
[datasets]
pool = "data/{data.name}"
s = "data/{data.name}"
e = "data/{data.name}"
r = "data/{data.name}"

[run]
in_flight = 4
backoff = 0.0

[curate]
small_ensemble = ["random"]
large_ensemble = ["oracle", "distracted", "random"]
tau = 0.9
sample_size = 0
{endpoints}""", encoding="utf-8")
    return cfg


@pytest.fixture
def workspace(tmp_path):
    return write_workspace(tmp_path / "ws", n=6, seed=1, steps=(2, 4))


# -- acceptance summary ----------------------------------------------------------------------

CRITERIA = {
    1: "ranking oracle: overall",
    2: "ranking oracle: S",
    3: "ranking oracle: E total",
    4: "ranking oracle: R visual/textual/total",
    5: "cost formula",
    6: "curator properties",
    7: "perturbation invariants",
    8: "end-to-end mock pipeline",
    9: "resume idempotence",
    10: "degradation diagnostic",
}


_STATE: dict = {"criterion_of": {}, "results": {}}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test evidences")


def pytest_collection_finish(session):
    for item in session.items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _STATE["criterion_of"][item.nodeid] = mark.args[0]


def pytest_runtest_logreport(report):
    n = _STATE["criterion_of"].get(report.nodeid)
    if n is not None and (report.when == "call" or report.failed):
        _STATE["results"].setdefault(n, []).append(report.passed)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    wanted = set(_STATE["criterion_of"].values())
    if not wanted:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in wanted:
            continue
        results = _STATE["results"].get(n)
        status = "FAIL" if not results or not all(results) else "PASS"
        terminalreporter.write_line(f"criterion {n:2d} {status} {title}")
