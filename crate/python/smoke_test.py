"""Smoke test of the dqid extension module.

Build and install first, e.g. ``maturin develop --release -m crates/python/Cargo.toml``.
"""

import cmath
import math
import tempfile

import dqid


def rel_err(a, b):
    return abs(a - b) / abs(b)


def main():
    d, q = dqid.park(1.0, -0.5, -0.5, 0.3)
    a, b, c = dqid.inverse_park(d, q, 0.3)
    assert max(abs(a - 1.0), abs(b + 0.5), abs(c + 0.5)) < 1e-12

    plant = dqid.Plant.rl_reference()
    pair = dqid.run_step_pair(plant)
    u, y = pair.response("d", "d")
    assert len(u) == len(y) > 0

    era = dqid.era(pair, order=2, f_min=1.0)
    sem = dqid.sem(pair, n_poles=2, f_min=1.0, f_max=100.0)
    grid = [10 ** (k / 4) for k in range(9)]
    sweep = dqid.run_sweep(plant, grid)
    sfra = dqid.sfra(sweep, n_poles=2)

    for y_id in (era, sem, sfra):
        worst = 0.0
        for f in grid:
            truth = plant.closed_form_admittance(f)
            got = y_id.matrix_at(f)
            for i in range(2):
                for j in range(2):
                    worst = max(worst, rel_err(got[i][j], truth[i][j]))
        print(f"{y_id.method}: worst relative error {worst:.2e} over 1-100 Hz")
        assert worst < 0.02

    for name, dmag, dph in dqid.compare(era, sem):
        assert dmag < 1.0 and dph < 5.0, (name, dmag, dph)
    rows = sfra.bode(grid)
    assert len(rows) == 4 * len(grid)
    assert all(math.isfinite(r[2]) for r in rows)
    print("fits:", {k: round(v, 2) for k, v in sfra.fit_percent()})

    gfm = dqid.Plant.gfm(gfm={"L_f": 3e-4}, grid={"P_load": 12000.0})
    assert len(gfm.state_names) == len(gfm.equilibrium())
    try:
        dqid.Plant.gfm(gfm={"L_f": 0.0})
    except ValueError as e:
        assert "L_f" in str(e)
    else:
        raise AssertionError("L_f = 0 accepted")

    with tempfile.TemporaryDirectory() as out:
        passed, table = dqid.oracle(out)
        assert passed, table
    y = era.value_at("Ydq", 50.0)
    print(f"ERA Ydq(50 Hz) = {abs(y):.4f} at {math.degrees(cmath.phase(y)):.2f} deg")
    print("smoke test passed")


if __name__ == "__main__":
    main()
