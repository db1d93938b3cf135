import numpy as np
import pytest


def numerical_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place, then restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


SPIRAL_SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def spiral_runs(tmp_path_factory):
    """PCL, baseline and no-L_pm spiral presets over three seeds, trained once per session."""
    import time

    from pclkd.config import load_config, preset_path
    from pclkd.train import train

    root = tmp_path_factory.mktemp("spiral")
    runs = {"pcl": [], "baseline": [], "no_pm": []}
    timing = {}
    for kind, preset, extra in (("pcl", "spiral_pcl", {}), ("baseline", "spiral_baseline", {}),
                                ("no_pm", "spiral_pcl", {"pcl.use_pm": "false"})):
        t0 = time.perf_counter()
        for seed in SPIRAL_SEEDS:
            cfg = load_config(preset_path(preset), {**extra, "run.seed": str(seed), "run.eval_train": "false"})
            runs[kind].append(train(cfg, out_dir=root / f"{kind}_{seed}"))
        timing[kind] = time.perf_counter() - t0
    return runs, timing
