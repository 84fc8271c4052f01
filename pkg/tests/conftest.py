import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, x, h=1e-6):
    """Central differences of a vector-valued f; columns follow x."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(np.asarray(f(x), dtype=float))
    out = np.zeros((f0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[:, k] = (np.atleast_1d(f(x + e)) - np.atleast_1d(f(x - e))) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fd_of_solves(problem, p, h=1e-5, tol=1e-12):
    """Central differences of x*(p) from repeated solves."""
    from sobolev_proxy.solver import solve

    p = np.asarray(p, dtype=float)
    cols = []
    for k in range(p.size):
        e = np.zeros_like(p)
        e[k] = h
        hi, lo = solve(problem, p + e, tol=tol), solve(problem, p - e, tol=tol)
        assert hi.converged and lo.converged
        cols.append((hi.x_star - lo.x_star) / (2 * h))
    return np.column_stack(cols)


def column_errors(dx, fd):
    """Per-column infinity-norm error, relative with a floor of one."""
    return np.max(np.abs(dx - fd), axis=0) / np.maximum(np.max(np.abs(fd), axis=0), 1.0)


def random_records(n, d, count, rng, sparsity=0.5, empty_masks=False):
    from sobolev_proxy.datagen import SolutionRecord, sample_mask

    recs = []
    for k in range(count):
        mask = sample_mask(n, d, sparsity, seed=int(rng.integers(1 << 30)))
        jac = [] if empty_masks else [(r, c, float(rng.normal())) for r, c in mask.kept_entries]
        recs.append(
            SolutionRecord(
                p=rng.uniform(0.5, 1.5, d),
                x_star=rng.normal(size=n),
                lam=np.zeros(0),
                objective=float(rng.normal()),
                jac_entries=jac,
                mask=mask,
                regularity="regular",
            )
        )
    return recs


def fd_loss_gradient(model, batch, lam, mode, pen=None, h=1e-6):
    from sobolev_proxy.proxy import loss_and_gradient

    theta = model.flat()
    work = model.copy()
    out = np.zeros_like(theta)
    for k in range(theta.size):
        t = theta.copy()
        t[k] += h
        work.set_flat(t)
        up = loss_and_gradient(work, batch, lam, mode, pen).loss
        t[k] -= 2 * h
        work.set_flat(t)
        down = loss_and_gradient(work, batch, lam, mode, pen).loss
        out[k] = (up - down) / (2 * h)
    return out


def gradient_mismatch(exact, fd, atol=1e-7):
    """Largest |exact - fd| / (|fd| + atol / rtol) style ratio; <= 1e-4 passes rtol 1e-4."""
    return float(np.max(np.abs(exact - fd) / (np.abs(fd) + atol / 1e-4)))


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, text: str) -> str:
    line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip("]"))):
            terminalreporter.write_line(line)
