#!/usr/bin/env python3
"""Freeze the golden calibration vector for the committed fixture.

Run once after regenerating fixtures: calibrates the committed model on
the committed calibration bundle and writes the lambdas golden that the
regression tests pin (the tests also cross-check it against a naive
per-image re-scan).
"""

import json
from pathlib import Path

import spikecast as sc

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"


def main():
    model = sc.load_model(FIXTURES / "digits_cnn")
    calib = sc.load_dataset(FIXTURES / "digits_calib")
    stats = sc.calibrate(sc.fold_batchnorm(model), calib)
    out = FIXTURES / "golden" / "lambdas.json"
    out.write_text(json.dumps({"lambdas": list(stats.lambdas),
                               "sample_count": stats.sample_count},
                              indent=2) + "\n")
    print(f"{out}: {len(stats.lambdas)} lambdas over {stats.sample_count} samples")


if __name__ == "__main__":
    main()
