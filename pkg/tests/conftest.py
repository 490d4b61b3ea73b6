import numpy as np
import pytest

from robustcf.data import Dataset, load_recipe, split
from robustcf.ensemble import Leaf, Split, TrainConfig, Tree, TreeEnsemble, train

ROOT = __import__("pathlib").Path(__file__).resolve().parents[1]
GERMAN = ROOT / "data" / "german.data"


def stump(threshold=0.5, left=-1.0, right=2.0, feature=0, n_features=1, base=0.0):
    tree = Tree({0: Split(0, feature, threshold, 1, 2), 1: Leaf(1, left), 2: Leaf(2, right)}, 0)
    return TreeEnsemble([tree], base, n_features)


class TableModel:
    """Stub model returning fixed outputs for known rows and ``default`` elsewhere."""

    def __init__(self, table, default=0.0):
        self.table = {tuple(map(float, k)): v for k, v in table.items()}
        self.default = default

    def predict_proba(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            return self.table.get(tuple(X.tolist()), self.default)
        return np.array([self.table.get(tuple(r.tolist()), self.default) for r in X])


class ConstantModel:
    def __init__(self, value):
        self.value = value

    def predict_proba(self, X):
        X = np.asarray(X)
        return self.value if X.ndim == 1 else np.full(X.shape[0], self.value)


class ClipModel:
    """``M(x) = clip(x[0], 0, 1)``."""

    def predict_proba(self, X):
        X = np.asarray(X, dtype=float)
        return float(np.clip(X[0], 0, 1)) if X.ndim == 1 else np.clip(X[:, 0], 0, 1)


def random_dataset(n=200, d=3, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.random((n, d))
    y = ((X[:, 0] + 0.5 * X[:, 1] + 0.2 * rng.standard_normal(n)) > 0.75).astype(int)
    return Dataset(X, y, [f"f{i}" for i in range(d)])


@pytest.fixture(scope="session")
def toy():
    data = random_dataset()
    model = train(data, TrainConfig(n_estimators=20, max_depth=3))
    return data, model


@pytest.fixture(scope="session")
def german():
    data = load_recipe("german", GERMAN)
    tr, te = split(data, 0.3, 0)
    model = train(tr, TrainConfig())
    return tr, te, model


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
