"""Smoke test for the beamsync Python bindings."""

import math

import beamsync_py as bs


def main():
    cfg = bs.Config(k=2, doas=[50, 110], schemes=["fs_beam", "sync_perfect_zf"])
    assert cfg.users == 2 and cfg.antennas == 128
    assert abs(cfg.angular_spread - math.radians(5)) < 1e-12
    assert bs.Config(cfg.to_json()).to_json() == cfg.to_json()

    try:
        bs.Config(n_cp=5)
    except ValueError as e:
        assert "n_cp" in str(e)
    else:
        raise AssertionError("short CP accepted")

    a = bs.steering_vector(math.pi / 3, 8)
    assert len(a) == 8 and all(abs(abs(z) - 1.0) < 1e-12 for z in a)

    r = bs.realization(bs.Config(k=1, doas=[90]), float("inf"), 3)
    est = bs.FsBeam(bs.Config(k=1, doas=[90]))
    phi, theta, _ = est.estimate(r["y"], r["training"][0])
    assert abs(phi - r["phis"][0]) < 1e-6, (phi, r["phis"])
    assert abs(theta - math.pi / 2) < math.radians(5)

    rows = bs.simulate(cfg, snr=[10.0], trials=3, seed=1)
    again = bs.simulate(cfg, snr=[10.0], trials=3, seed=1, threads=2)
    assert rows == again
    mse = next(x for x in rows if x["scheme"] == "fs_beam" and x["metric"] == "cfo_mse")
    assert 0.0 <= mse["value"] < 1e-3

    t = bs.run_trial(cfg, 10.0, 5)
    assert set(t) >= {"true_phis", "fs_beam", "sync_perfect_zf"}

    half = bs.asymptotic_mse(10.0, 256, 64)
    assert abs(bs.asymptotic_mse(10.0, 128, 64) - 1.855e-6) < 1e-9
    assert half == bs.asymptotic_mse(10.0, 128, 64) / 2
    th = bs.theoretical_mse(bs.Config(k=1, doas=[90]), 10.0)
    assert 0.5 < th / bs.asymptotic_mse(10.0, 128, 64) < 2.0

    print("smoke ok:", len(rows), "rows;", "schemes", ", ".join(bs.scheme_names()))


if __name__ == "__main__":
    main()
