import numpy as np
import pytest

from fairaug.backbone import EmbeddingTable
from fairaug.dataset import InteractionDataset


def random_dataset(num_users=12, num_items=20, seed=0, density=0.3, test_frac=0.25):
    """Small random dataset where every user has train positives and unseen items."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for u in range(num_users):
        n = int(np.clip(rng.binomial(num_items, density), 2, num_items - 2))
        items = rng.choice(num_items, size=n, replace=False)
        n_test = max(1, int(round(test_frac * n)))
        test += [(u, v) for v in items[:n_test]]
        train += [(u, v) for v in items[n_test:]]
    groups = np.zeros(num_users, dtype=np.int64)
    groups[rng.permutation(num_users)[: num_users // 2]] = 1
    return InteractionDataset(num_users, num_items, np.array(train), np.zeros((0, 2)), np.array(test), groups)


def planted_skew_dataset(seed=0, num_users=20, num_items=30):
    """Group 0 mostly clicks the first half of the catalogue, group 1 the second half.

    Each user gets 8 items from their own half and 1 from the other; 2 of the 9 are held out.
    """
    rng = np.random.default_rng(seed)
    half = num_items // 2
    groups = np.array([u % 2 for u in range(num_users)], dtype=np.int64)
    train, test = [], []
    for u in range(num_users):
        own = np.arange(half) if groups[u] == 0 else np.arange(half, num_items)
        other = np.arange(half, num_items) if groups[u] == 0 else np.arange(half)
        items = np.concatenate([rng.choice(own, size=8, replace=False), rng.choice(other, size=1, replace=False)])
        rng.shuffle(items)
        test += [(u, v) for v in items[:2]]
        train += [(u, v) for v in items[2:]]
    return InteractionDataset(num_users, num_items, np.array(train), np.zeros((0, 2)), np.array(test), groups)


def random_table(num_users, num_items, dim, rng, scale=1.0, dtype=np.float64):
    return EmbeddingTable(
        (scale * rng.standard_normal((num_users, dim))).astype(dtype),
        (scale * rng.standard_normal((num_items, dim))).astype(dtype),
    )


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rtol=1e-5, floor=1e-9):
    """Every coordinate within ``rtol`` relative error.

    ``floor`` absorbs finite-difference round-off on coordinates that are
    (analytically) zero or vanishingly small.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    err = np.abs(analytic - numeric)
    bad = err > rtol * scale + floor
    assert not bad.any(), f"max rel err {np.max(err / np.maximum(scale, 1e-300)):.3e} at {np.argwhere(bad)[:5]}"


@pytest.fixture
def toy_dataset():
    return random_dataset()


@pytest.fixture
def skew_dataset():
    return planted_skew_dataset()


def reference_bpr_run(dataset, epochs, dim, lr, batch_size, seed):
    """Plain BPR assembled directly from the primitives, on the trainer's seed schedule."""
    from fairaug.backbone import Adam, bpr_gradients, init_embeddings
    from fairaug.sampling import TrainIndex
    from fairaug.seeding import derive_seed, rng_for

    E = init_embeddings(dataset.num_users, dataset.num_items, dim, derive_seed(seed, "embeddings"))
    opt = Adam(E.params(), lr=lr)
    index = TrainIndex(dataset)
    for epoch in range(epochs):
        triples = index.epoch_triples(rng_for(seed, "triples", epoch))
        for start in range(0, len(triples), batch_size):
            opt.step(E.params(), list(bpr_gradients(E, triples[start:start + batch_size])))
    return E


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: dict[str, str] = {}


def record_criterion(key, title, passed, detail):
    ACCEPTANCE_LINES[key] = f"[{'PASS' if passed else 'FAIL'}] criterion {key} {title}: {detail}"
    print(ACCEPTANCE_LINES[key])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
