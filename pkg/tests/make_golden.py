"""Regenerate the frozen reference values used by test_train_step_golden_values.

Run from the repository root:  python3 tests/make_golden.py
"""

import json
import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).parent))

from conftest import tiny_generator_spec, tiny_setup

from xkd.synthdata import make_dataset
from xkd.trainer import build_state, train_step


def main():
    dataset = make_dataset(tiny_generator_spec(), clips_per_class=8, seed=1)
    setup = tiny_setup(steps=1, seed=7)
    state = build_state(setup)
    rec = train_step(state, dataset[:2], setup)
    out = {
        "l_ae": rec.l_ae,
        "l_da": rec.l_da,
        "l_kd": rec.l_kd,
        "l_xkd": rec.l_xkd,
        "kl_v2a": rec.kl_v2a,
        "kl_a2v": rec.kl_a2v,
    }
    path = pathlib.Path(__file__).parent / "data" / "golden_step.json"
    path.parent.mkdir(exist_ok=True)
    path.write_text(json.dumps(out, indent=2) + "\n")
    print(f"wrote {path}")
    for key, value in out.items():
        print(f"  {key} = {value!r}")


if __name__ == "__main__":
    main()
