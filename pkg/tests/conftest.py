import numpy as np
import pytest

from spackle.dataset_io import Dataset, SpotRecord, generate_synthetic
from spackle.preprocess import median_complete, normalize

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def make_dataset(rows_cols_per_slide, g, *, seed=0, dropout=0.0, split=None, normalized=False):
    """Full-lattice dataset with random counts; ``rows_cols_per_slide`` is a list of (rows, cols)."""
    rng = np.random.default_rng(seed)
    spots, split = [], dict(split or {})
    for s, (rows, cols) in enumerate(rows_cols_per_slide):
        slide = f"S{s}"
        split.setdefault(slide, "train" if s % 2 == 0 else "val")
        for r in range(rows):
            for c in range(cols):
                spots.append(SpotRecord(f"{slide}-{r}-{c}", slide, r, c, float(c), float(r)))
    n = len(spots)
    counts = rng.integers(1, 50, size=(n, g)).astype(np.int64)
    observed = rng.random((n, g)) >= dropout
    counts[~observed] = 0
    expression = np.where(observed, counts, 0).astype(np.float64)
    ds = Dataset(spots, [f"g{j}" for j in range(g)], counts, expression, observed, split)
    if normalized:
        ds = ds.replace(normalization_applied=True)
    return ds


@pytest.fixture
def tiny_dataset():
    """Two 2x2 slides, 4 genes, spot 3 / gene 1 unobserved."""
    ds = make_dataset([(2, 2), (2, 2)], 4, seed=3)
    counts = ds.raw_counts.copy()
    observed = ds.observed.copy()
    counts[3, 1] = 0
    observed[3, 1] = False
    return ds.replace(raw_counts=counts, observed=observed,
                      expression=np.where(observed, counts, 0).astype(np.float64))


@pytest.fixture(scope="session")
def small_synthetic():
    return generate_synthetic(2, 8, 8, 6, 0.3, 4.0, seed=11)


@pytest.fixture(scope="session")
def small_completed(small_synthetic):
    return median_complete(normalize(small_synthetic))


def finite_difference_errors(config, *, seed=0, step=1e-4, floor=1e-7):
    """Max relative error between analytic and central-difference gradients, per parameter.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient is zero (e.g. key biases, which softmax's shift
    invariance cancels) from dividing roundoff by roundoff.
    """
    from spackle import model as mdl

    rng = np.random.default_rng(seed)
    params = mdl.init_params(config, seed + 1)
    for name in params:
        params[name] = params[name] + rng.normal(0.0, 0.1, params[name].shape)
    B, T, g = 3, 19, config.g
    e_x = rng.normal(size=(B, T, g))
    e_m = e_x * (rng.random(e_x.shape) > 0.3)
    presence = np.ones((B, T), bool)
    presence[1, 5:] = False
    presence[2, [3, 7, 11]] = False
    _, grads = mdl.loss_and_gradients(params, config, e_x, e_m, presence)

    def loss_at():
        out, _ = mdl.forward_batch(params, config, e_m, presence)
        return mdl.batch_loss(e_x, out, presence)[0]

    errors = {}
    for name, arr in params.items():
        flat = arr.reshape(-1)
        numeric = np.empty(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_at()
            flat[i] = orig - step
            down = loss_at()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        analytic = grads[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        errors[name] = float(np.max(np.abs(analytic - numeric) / denom))
    return errors
