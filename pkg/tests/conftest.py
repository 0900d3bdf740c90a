import numpy as np
import pytest

from mdfn.tensor import Tensor, backward

EPS = 1e-5
GRAD_TOL = 1e-6


def numeric_grad(f, arr: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (perturbed in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + eps
        hi = f()
        arr[idx] = old - eps
        lo = f()
        arr[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation relative to the gradient's scale."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(build, leaves: list[Tensor], rng: np.random.Generator) -> float:
    """Worst relative error over ``leaves`` of ``sum(build() * R)`` for a random weighting R."""
    out = build()
    weights = rng.standard_normal(out.shape)

    def scalar():
        return float(np.sum(build().data * weights))

    for leaf in leaves:
        leaf.grad = None
    backward((build() * Tensor(weights)).sum())
    worst = 0.0
    for leaf in leaves:
        num = numeric_grad(scalar, leaf.data)
        worst = max(worst, relative_error(leaf.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def naive_conv2d(x, w, b, stride, padding):
    """Direct six-loop cross-correlation; the oracle for im2col."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def naive_max_pool(x, window, stride):
    B, C, H, W = x.shape
    Ho = (H - window) // stride + 1
    Wo = (W - window) // stride + 1
    out = np.zeros((B, C, Ho, Wo))
    for n in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    out[n, c, i, j] = x[n, c, i * stride:i * stride + window, j * stride:j * stride + window].max()
    return out


# criterion number -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
