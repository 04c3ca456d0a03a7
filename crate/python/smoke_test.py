"""Smoke test for the Python bindings: build with
    pip install --no-build-isolation ./crates/muon-memory-py
then run this file."""

import math

import muon_memory as mm


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(b))


def main():
    spec = mm.KnowledgeSpec(10, 10, 0.1)
    assert spec.k == 100
    assert close(sum(spec.item_freqs()), 1.0)
    assert close(spec.optimal_loss(), mm.optimal_loss(0.1, 100))

    assert close(mm.margin_fixed_point(100, 0.1), math.log(901))
    assert close(mm.gd_margin_step(0.0, 1.0, 1.0, 100, 0.1), 0.9)
    lo, hi = mm.muon_phase_window(0.75, 1000, 10, 100, 0.1)
    assert lo <= hi and close(lo, 10.2005370935, 1e-8)
    try:
        mm.muon_phase_window(0.75, 100, 10, 10, 0.1)
        raise AssertionError("window should be undefined for C <= 2M+1")
    except ValueError:
        pass

    s = mm.matrix_sign([[0.0, 2.0], [1.0, 0.0]])
    assert all(close(x, y) for r, t in zip(s, [[0.0, 1.0], [1.0, 0.0]]) for x, y in zip(r, t))

    tr = mm.simulate(spec, "muon", 0.75, 20, probes=True)
    assert len(tr["total_loss"]) == 21
    assert close(tr["total_loss"][0], math.log(100))
    assert tr["total_loss"][-1] < tr["total_loss"][0]
    assert all(d is not None for d in tr["msgn_inf_dev"])

    sim = mm.Simulation(spec, "gd", 10.0 / spec.item_freqs()[0], seed=None)
    sim.advance(500)
    assert sim.step == 500
    assert abs(sim.loss() - spec.optimal_loss()) < 1e-6

    a, gamma, _ = mm.fit_power_law([(t, 0.5 + 3.0 * t ** -2.0) for t in (10, 20, 40, 80)], 0.5)
    assert close(gamma, 2.0, 1e-9) and close(a, 3.0, 1e-9)

    print("python smoke test ok")


if __name__ == "__main__":
    main()
