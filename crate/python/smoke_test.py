"""Smoke test for the `teleop` extension module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/teleop-*.whl
"""

import json
import math
import os
import tempfile

import teleop


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    betas, alpha_bars = teleop.diffusion_schedule(8)
    prod = 1.0
    for b, ab in zip(betas, alpha_bars):
        prod *= 1.0 - b
        check(abs(prod - ab) < 1e-12, f"alpha_bar matches running product ({ab:.6f})")
    check(alpha_bars[-1] < 0.05, "final alpha_bar below 0.05")
    x = teleop.q_sample([0.5] * 4, 8, [0.0] * 4)
    check(abs(x[0] - 0.5 * math.sqrt(alpha_bars[-1])) < 1e-12, "q_sample with zero noise scales x0")

    ident = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
    ahead = [5.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
    check(abs(teleop.te([ident], [ahead]) - 5.0) < 1e-9, "TE of a 5 m offset")
    check(abs(teleop.fae([ident], [ahead])) < 1e-9, "FAE of a human straight ahead")
    check(teleop.msd([[0.0] * 10, [0.1] * 10]) > 0.0, "MSD of a step is positive")

    ep = teleop.generate_session("default", 4.0, 3)
    check(len(ep) == 12000, f"4-minute session has 12000 frames ({ep!r})")
    check(len(ep.commands()[0]) == 10, "10 command channels")
    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "ep.aopd")
        ep.save(p)
        back = teleop.Episode.load(p)
        check(back.commands() == ep.commands(), "episode file round trip")
    check(json.loads(ep.slice(0, 10).to_json()) is not None, "JSON export")

    model, losses = teleop.train_model([ep], epochs=2, seed=1)
    check(len(losses) == 2 and all(math.isfinite(l) for l in losses), f"two finite epochs {losses}")
    again, _ = teleop.train_model([ep], epochs=2, seed=1)
    check(model.content_hash() == again.content_hash(), "training is reproducible")

    m = model.history
    robot = ep.robot_poses()[:m]
    human = ep.human_poses()[:m]
    cmds = [list(c) for c in ep.commands()[:m]]
    w1, b1, m1 = model.sample_window(robot, human, cmds, 5)
    w2, _, _ = model.sample_window(robot, human, cmds, 5)
    check(len(w1) == model.horizon and len(w1[0]) == 10, "window shape")
    check(w1 == w2, "fixed-seed sample_window is identical")
    check(len(b1) == 9 and len(m1) == 2, "logit shapes")

    with tempfile.TemporaryDirectory() as d:
        p = os.path.join(d, "m.aopc")
        h = model.save(p)
        check(teleop.Model.load(p).content_hash() == h, "checkpoint round trip")

    report = teleop.evaluate(model, [ep.slice(9000, 10500)], seeds=[11])
    check(math.isfinite(report["te_m"]) and "fae_deg" in report, f"closed-loop eval {report}")

    s = teleop.Session(model, seed=1)
    check(json.loads(s.hello())["schema_version"] == teleop.SCHEMA_VERSION, "hello carries schema version")
    pose = {"type": "human_pose", "t": 0.0, "x": 1.5, "y": 0.0, "z": 1.7, "qw": 0.0, "qx": 0.0, "qy": 0.0, "qz": 1.0}
    check(s.handle(json.dumps(pose)) is None, "pose accepted silently")
    check(json.loads(s.handle('{"type":"warp","t":0}'))["type"] == "error", "unknown tag rejected")
    tags = [json.loads(line)["type"] for _ in range(50) for line in s.tick()]
    check(tags.count("world") == 50 and tags.count("commands") == 50, "world and commands every tick")

    cfg = teleop.load_config()
    check(cfg["controller.replan_every"] == "10", "config defaults")
    print("all python smoke checks passed")


if __name__ == "__main__":
    main()
