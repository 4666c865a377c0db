"""Measure sprite-warp vs oracle prediction error on translation-only sequences.

Prints the 99th percentile of the per-frame mean absolute pixel error (0..255
scale) over 100 seeded sequences; tests/test_predictor.py freezes that value.

    python scripts/calibrate_warp_bound.py [--sequences 100] [--horizon 10]
"""

import argparse

import numpy as np

from tabletop_mpc.core import ZERO_ACTION, Action, ActionSequence, Frame
from tabletop_mpc.predictor import OraclePredictor, PredictionContext, WarpPredictor
from tabletop_mpc.sim import Tabletop, load_task


TASKS = ("push_button", "move_to_area", "pick_place", "wipe")


def translation_errors(n_seq: int = 100, horizon: int = 10, first_seed: int = 0) -> np.ndarray:
    """Sequence i uses task i mod 4, so the gripper also crosses flat areas and patches."""
    sims = [Tabletop(load_task(t)) for t in TASKS]
    errors = []
    seed = first_seed
    while len(errors) < n_seq * horizon:
        sim = sims[(len(errors) // horizon) % len(sims)]
        oracle, warp = OraclePredictor(sim), WarpPredictor.for_sim(sim)
        rng = np.random.default_rng(seed)
        state, obs = sim.reset(seed)
        seed += 1
        steps = rng.uniform(-0.03, 0.03, size=(horizon, 2))
        seq = ActionSequence(tuple(Action(float(x), float(y), 0, 0, 0, 0, 0) for x, y in steps), 0)
        # keep only sequences with no interaction: nothing pressed, grasped or hit
        s = state
        clean = True
        for a in seq.actions:
            s = sim.step(s, a)
            if s.held is not None or s.violation or any(o.pressed for o in s.objects):
                clean = False
        if not clean:
            continue
        e, _, _ = sim.ground_truth_boxes(state)
        ctx = PredictionContext(Frame(obs.pixels, obs.timestamp - 1), obs, ZERO_ACTION, ZERO_ACTION,
                                aux=state, ee_box=e)
        vo, vw = oracle.predict(ctx, seq), warp.predict(ctx, seq)
        for fo, fw in zip(vo.frames, vw.frames):
            errors.append(np.abs(fo.pixels.astype(float) - fw.pixels.astype(float)).mean())
    return np.asarray(errors)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sequences", type=int, default=100)
    ap.add_argument("--horizon", type=int, default=10)
    args = ap.parse_args()
    err = translation_errors(args.sequences, args.horizon)
    print(f"frames={err.size} mean={err.mean():.4f} p50={np.percentile(err, 50):.4f} "
          f"p99={np.percentile(err, 99):.4f} max={err.max():.4f}")


if __name__ == "__main__":
    main()
