import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gatedmtl.model import ArchConfig, TaskSpec, build_encoder

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=300, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

H = 1e-5


def numeric_grad(f, arr: np.ndarray, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place
    and restored)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-relative difference.  Gradients whose combined norm is below 1e-6
    are compared absolutely, so cancellation noise in a true zero gradient
    does not count as a mismatch."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a) + np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


TASKS3 = [
    TaskSpec("cls4", "classification", 4, "cross_entropy", 1.0, "accuracy"),
    TaskSpec("reg", "regression", 1, "l1", 1.0, "l1_error"),
    TaskSpec("cls2", "classification", 2, "cross_entropy", 1.0, "accuracy"),
]
TASKS2 = [
    TaskSpec("a", "classification", 3, "cross_entropy", 1.0, "accuracy"),
    TaskSpec("b", "regression", 1, "squared_error", 1.0, "rmse"),
]


def tiny_conv(widths=(3, 4), pool_after=(1,), size=6, stem=3, tied=False) -> ArchConfig:
    return ArchConfig(kind="conv", image_size=size, stem_channels=stem, widths=list(widths),
                      pool_after=list(pool_after), tied_init=tied)


def tiny_attn(dim=4, depth=1, heads=2, size=4, patch=2, ffn=2, tied=False) -> ArchConfig:
    return ArchConfig(kind="transformer", image_size=size, patch=patch, dim=dim, depth=depth,
                      heads=heads, ffn_mult=ffn, tied_init=tied)


def random_encoder(arch: ArchConfig, tasks, seed: int, gate_scale: float = 2.0, beta_scale: float = 1.0):
    """Encoder with random weights, random gate logits (kept away from the
    threshold) and random mixer logits."""
    rng = np.random.default_rng(seed + 10_000)
    enc = build_encoder(arch, tasks, seed=seed)
    a = rng.normal(size=enc.bank.alpha.shape) * gate_scale
    a[np.abs(a) < 0.05] = 0.5
    enc.bank.alpha.data = a
    enc.mixer.beta.data = rng.normal(size=enc.mixer.beta.shape) * beta_scale
    for name, p in enc.params.items():
        if name.endswith(".b") or name.endswith(".g"):
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
    return enc


def random_batch(arch: ArchConfig, tasks, n: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n,) + arch.input_shape)
    labels = []
    for spec in tasks:
        if spec.kind == "classification":
            labels.append(rng.integers(0, spec.out_dim, size=n))
        else:
            labels.append(rng.normal(size=n))
    return x, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance reporting: one line per ``@pytest.mark.criterion(n, title)`` test

_CRITERIA: dict[int, tuple[str, str, float, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    prev = _CRITERIA.get(num)
    status = "PASS" if rep.passed else "FAIL"
    if prev is None or prev[1] == "PASS":
        _CRITERIA[num] = (title, status, rep.duration + (prev[2] if prev else 0.0), detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        title, status, secs, detail = _CRITERIA[num]
        line = f"[{status}] criterion {num}: {title} ({secs:.1f} s)"
        terminalreporter.write_line(line + (f" :: {detail}" if detail else ""))
