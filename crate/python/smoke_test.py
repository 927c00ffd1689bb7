"""Import the extension and run one small end-to-end pass.

Build first:  cargo build --release -p fedrca-python
then put target/release/libfedrca.so on the path as fedrca.so
(see README).
"""

import math
import sys

import fedrca

SMALL = [
    "experiment.train_steps=200",
    "experiment.calib_steps=400",
    "experiment.test_steps=2000",
    "experiment.epochs=2",
    "world.anomalies.rate=0.002",
]


def main():
    assert "framework" in fedrca.METHODS
    cfg = fedrca.default_config()
    assert "[privacy.flags]" in cfg

    data = fedrca.simulate(overrides=SMALL)
    assert len(data["test"]["y"]) == 2
    assert len(data["test"]["y"][0]) == 2000
    assert data["test"]["episodes"], "default test split carries anomalies"

    out = fedrca.run(method="framework", overrides=SMALL)
    assert len(out["server_loss"]) == 400
    assert all(math.isfinite(v) for v in out["server_loss"])
    print("ARL0", out["metrics"]["arl"]["arl0"], "ARL1", out["metrics"]["arl"]["arl1"])

    rows = fedrca.sweep("clients", [2, 4], overrides=SMALL + ["experiment.epochs=1"])
    assert [r["bytes_per_round"] for r in rows] == [96.0, 192.0]

    assert abs(fedrca.rr_probability(math.log(3)) - 0.75) < 1e-12
    try:
        fedrca.run(method="nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown method accepted")
    print("smoke ok")


if __name__ == "__main__":
    sys.exit(main())
