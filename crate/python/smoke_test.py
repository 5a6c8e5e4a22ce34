"""Smoke test for the catgrad extension module.

Build and run from the workspace root:

    cargo build -p catgrad-py --release --features extension-module
    cp target/release/libcatgrad.so python/catgrad.so
    python3 python/smoke_test.py
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import catgrad  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    p = catgrad.softmax([0.0, 1.0, 2.0])
    assert close(sum(p), 1.0)

    fact = catgrad.Factorisation.independent([[0.2, -0.1, 0.5], [1.0, 0.0]])
    assert fact.cards == [3, 2] and fact.dims == 2 and fact.is_independent

    def f(x):
        return float(x[0] * x[1]) + 0.5 * x[0]

    table = [f([a, b]) for a in range(3) for b in range(2)]
    exact = catgrad.exact_expectation(fact, f)
    assert close(exact, catgrad.exact_expectation(fact, table))

    additive = [0.5 * a - 2.0 * b for a in range(3) for b in range(2)]
    grad = catgrad.exact_gradient(fact, additive)
    est = catgrad.estimate(fact, additive, "indecater", 1, seed=1)
    for d in range(2):
        for g, e in zip(grad[d][0], est["grad"][d][0]):
            assert close(g, e, 1e-9), (g, e)

    bv = catgrad.bias_variance(fact, f, "rloo", 4, 2000, seed=3)
    assert bv["bias_norm"] <= bv["bias_band"], bv

    try:
        catgrad.estimate(fact, lambda x: 1 / 0, "reinforce", 2)
    except ZeroDivisionError:
        pass
    else:
        raise AssertionError("callback exception was swallowed")

    try:
        catgrad.estimate(fact, table, "nonsense", 2)
    except catgrad.CatgradError:
        pass
    else:
        raise AssertionError("unknown estimator accepted")

    chain = catgrad.Factorisation.random_chain([2, 3], scale=1.0, seed=4)
    xs = chain.sample(5, seed=0)
    assert all(math.isfinite(chain.log_prob(x)) for x in xs)

    names = dict(catgrad.presets())
    assert names["fig1a"] == "bench-exact"
    cfg = catgrad.preset_config("fig1a").replace("iterations = 1000", "iterations = 10")
    report = json.loads(catgrad.run_experiment(cfg))
    assert len(report["arms"]) == 4

    suites = catgrad.selftest()
    failed = [name for name, ok, _ in suites if not ok]
    assert not failed, failed

    print(f"catgrad {catgrad.__version__}: smoke test passed ({len(suites)} self-test suites)")


if __name__ == "__main__":
    main()
