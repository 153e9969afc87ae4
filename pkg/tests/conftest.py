import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mamm import basis
from mamm.terms import GroupIndex, TermSpec, build_term_block

settings.register_profile("mamm", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("mamm")

# acceptance lines collected by test_acceptance and printed at the end
CRITERIA = {}


def report(number, passed, detail):
    CRITERIA[number] = (bool(passed), detail)


def pytest_collection_modifyitems(config, items):
    # the ascent audit must see every optimizer call made by the suite
    last = [it for it in items if it.name.startswith("test_criterion_10")]
    rest = [it for it in items if not it.name.startswith("test_criterion_10")]
    items[:] = rest + last


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


class SmallProblem:
    """Random mixed-model instance with explicit N-row matrices."""

    def __init__(self, seed, N=150, K=2, n_svc=1, groups=0, L=12):
        rng = np.random.default_rng(seed)
        self.rng = rng
        self.coords = rng.random((N, 2))
        knots = basis.select_knots(self.coords, L, seed=seed)
        self.factory = basis.build_factory(knots, N)
        self.X = np.column_stack([np.ones(N)] + [rng.standard_normal(N) for _ in range(K - 1)])
        E = self.factory.block(self.coords)
        self.terms = [TermSpec.residual().with_width(E.shape[1])]
        self.A = [E]
        for k in range(n_svc):
            x = self.X[:, 1 + k % (K - 1)] if K > 1 else rng.standard_normal(N)
            self.terms.append(TermSpec.svc(f"c{k}").with_width(E.shape[1]))
            self.A.append(x[:, None] * E)
        self.labels = None
        if groups:
            self.labels = rng.integers(0, groups, N)
            gi = GroupIndex(sorted(set(self.labels.tolist())))
            t = TermSpec.group("g").with_width(gi.G)
            self.terms.append(t)
            self.A.append(build_term_block(t, labels_block=self.labels, group_index=gi))
        signal = self.X @ rng.standard_normal(K) + sum(A @ rng.standard_normal(A.shape[1]) * 0.3
                                                       for A in self.A)
        self.y = signal + 0.5 * rng.standard_normal(N)
        self.N, self.K = N, K

    @property
    def lam(self):
        return self.factory.lambda_hat


@pytest.fixture
def small_problem():
    return SmallProblem
