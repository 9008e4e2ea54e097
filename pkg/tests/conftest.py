import os

import numpy as np
import pytest

from dualgcn.data import DatasetBundle, load_dataset
from dualgcn.graph import Graph, build_graph
from dualgcn.rng import RngStream


def make_random_graph(n: int, p_edge: float, seed: int, ensure_ring: bool = True) -> Graph:
    """Erdos-Renyi graph, optionally with a ring so it is connected."""
    rng = RngStream(seed, ("test-graph",))
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < p_edge:
                edges.append((i, j))
    if ensure_ring:
        edges.extend((i, (i + 1) % n) for i in range(n))
    return build_graph(sorted(set(edges)), n)


def make_sbm_bundle(n: int = 200, k: int = 4, p_in: float = 0.08, p_out: float = 0.005,
                    noise: float = 0.4, seed: int = 0, per_class_train: int = 5) -> DatasetBundle:
    """Stochastic block model with noisy class-indicator features."""
    rng = RngStream(seed, ("sbm",))
    y = np.arange(n) % k
    edges = []
    for i in range(n):
        for j in range(i + 1, n):
            p = p_in if y[i] == y[j] else p_out
            if rng.random() < p:
                edges.append((i, j))
    edges.extend((i, (i + k) % n) for i in range(n) if y[i] == y[(i + k) % n])
    graph = build_graph(sorted(set(edges)), n)
    x = np.zeros((n, k + 4))
    x[np.arange(n), y] = 1.0
    x += noise * rng.child("feat").random((n, k + 4))
    train = np.zeros(n, dtype=bool)
    for c in range(k):
        members = np.flatnonzero(y == c)
        train[members[:per_class_train]] = True
    rest = np.flatnonzero(~train)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    val[rest[: len(rest) // 2]] = True
    test[rest[len(rest) // 2 :]] = True
    bundle = DatasetBundle(name="sbm", x=x, y=y, graph=graph, train_mask=train,
                           val_mask=val, test_mask=test, class_count=k)
    bundle.validate()
    return bundle


def make_citation_surrogate(n: int = 1354, k: int = 7, p: int = 1433, avg_deg: float = 4.0,
                            seed: int = 0) -> DatasetBundle:
    """Citation-shaped synthetic data: sparse binary bag-of-words features
    with class-biased vocabulary blocks and an assortative sparse graph.
    Used to exercise the dataset-scale code paths without the real corpora."""
    import scipy.sparse as sp

    from dualgcn.data import SplitSpec, with_split

    rng = RngStream(seed, ("surrogate",))
    y = rng.integers(0, k, n).astype(np.int64)
    m = int(n * avg_deg / 2)
    edges = set()
    attempts = 0
    while len(edges) < m and attempts < 40 * m:
        attempts += 1
        i = int(rng.integers(0, n))
        if rng.random() < 0.8:
            members = np.flatnonzero(y == y[i])
            j = int(members[rng.integers(0, len(members))])
        else:
            j = int(rng.integers(0, n))
        if i != j:
            edges.add((min(i, j), max(i, j)))
    graph = build_graph(sorted(edges), n)
    rows, cols = [], []
    block = p // k
    for i in range(n):
        base = y[i] * block
        own = rng.integers(0, block, 14) + base
        other = rng.integers(0, p, 6)
        for c in set(own.tolist() + other.tolist()):
            rows.append(i)
            cols.append(c)
    x = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, p))
    bundle = DatasetBundle(name="citation-surrogate", x=x, y=y, graph=graph, class_count=k)
    val = min(500, (n - 20 * k) // 3)
    test = min(1000, (n - 20 * k) - val - 10)
    return with_split(bundle, SplitSpec(20, val, test, seed=0))


def dataset_dir(name: str):
    root = os.environ.get("GLDGCN_DATA_DIR")
    if not root:
        return None
    path = os.path.join(root, name)
    return path if os.path.isdir(path) else None


def load_or_skip(name: str) -> DatasetBundle:
    path = dataset_dir(name)
    if path is None:
        pytest.skip(f"dataset '{name}' not available (set GLDGCN_DATA_DIR to a root "
                    f"containing {name}/features.csv, labels.txt, edges.tsv)")
    return load_dataset(path)


@pytest.fixture
def karate():
    from dualgcn.data import builtin_karate

    return builtin_karate()
