"""Exercises the extension module end to end on a small simulated fleet.

Build and install first:
    maturin develop -m crates/python/Cargo.toml --release
"""

import math
import tempfile
from pathlib import Path

import haulcast


def main() -> None:
    assert math.isclose(haulcast.haversine_m((30.0, 104.0), (30.0, 104.0)), 0.0)
    assert abs(haulcast.haversine_m((0.0, 0.0), (0.0, 1.0)) - 111_194.9) < 1.0

    sim = haulcast.simulate(2, 20, seed=3)
    vid, records = sorted(sim["vehicles"].items())[0]
    assert len(records) > 10 and len(sim["weather"]) == 20

    cfg = haulcast.Config().replace(k_candidates=[3], em_max_iter=30, em_screen_restarts=0, seed=1)
    assert haulcast.Config(cfg.to_toml()).to_dict() == cfg.to_dict()

    grid = haulcast.simulation_grid()
    model = haulcast.fit(vid, records, cfg, grid)
    assert model.vehicle_id == vid and model.n_states == 3
    assert len(model.destinations) == 4

    test = model.test_records(records)
    day = test[0]
    contexts = [
        [c["sunny"], c["rainy"], c["cloudy"], c["foggy"], c["last_trip_duration_h"], c["last_stay_duration_h"],
         c["prev_day_first_trip_start_hour"], c["prev_day_last_trip_start_hour"], c["consecutive_idle_days"],
         c["prev_day_trip_count"], c["bias"]]
        for c in day["contexts"]
    ]
    prefix = [(s["cell"]["row"], s["cell"]["col"], t) for s, t in zip(day["stays"][:2], day["trip_durations"][:2])]
    forecast = model.predict_next(prefix, contexts)
    assert math.isclose(sum(forecast["dest_probs"]), 1.0, rel_tol=1e-12)
    assert forecast["duration_mean_h"] > 0

    scores = model.evaluate(records)
    assert 0.0 <= scores["iohmm"]["dest_accuracy"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "model.json")
        model.save(path)
        again = haulcast.Model.load(path)
        assert again.predict_next(prefix, contexts) == forecast
        assert again.to_json() == model.to_json()

    try:
        haulcast.Config("no_such_key = 1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    print(f"smoke test passed: {model!r}, IOHMM accuracy {scores['iohmm']['dest_accuracy']:.3f}")


if __name__ == "__main__":
    main()
