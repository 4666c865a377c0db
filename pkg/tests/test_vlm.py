import dataclasses
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tabletop_mpc.core import Frame, Goal
from tabletop_mpc.sim import Tabletop, load_task
from tabletop_mpc.vlm import (DirectionHint, RemoteVLM, ScriptedVLM, SwitchWeight, extract_json, http_transport,
                              neutral_understanding, parse_boxes, parse_direction, parse_switch)

OBS = Frame(np.zeros((64, 64, 3), np.uint8))
GOAL = Goal.from_text("press the button")


def at(state, xy):
    return dataclasses.replace(state, ee_pose=tuple(xy))


def with_obj_at(state, name, xy):
    return state.replace_obj(dataclasses.replace(state.obj(name), pose=tuple(xy)))


# scripted oracle ----------------------------------------------------------


@pytest.fixture
def button():
    sim = Tabletop(load_task("push_button"))
    state, _ = sim.reset(0)
    return sim, with_obj_at(state, "button", (0.3, -0.2))


def test_direction_points_at_subgoal(button):
    sim, state = button
    h = ScriptedVLM(sim).query_direction(OBS, GOAL, at(state, (0, 0)))
    assert h == DirectionHint(1, -1, 0, 0, 0, 0, 0)


def test_direction_deadband(button):
    sim, state = button
    h = ScriptedVLM(sim).query_direction(OBS, GOAL, at(state, (0.295, -0.195)))
    assert (h.dx, h.dy) == (0, 0)


def test_switch_single_stage(button):
    sim, state = button
    vlm = ScriptedVLM(sim)
    assert vlm.query_switch(OBS, GOAL, at(state, (0, 0))).w_D == 0.5
    assert vlm.query_switch(OBS, GOAL, at(state, (0.3, -0.15))).w_D == 1.0


def test_switch_multi_stage_before_and_after_grasp():
    sim = Tabletop(load_task("pick_place"))
    state, _ = sim.reset(1)
    vlm = ScriptedVLM(sim)
    assert vlm.query_switch(OBS, GOAL, state).w_D == 0.0
    first = sim.task.sub_goals[0]
    held = dataclasses.replace(state, held=first, gripper="closed", ee_pose=state.obj(first).pose)
    assert vlm.query_switch(OBS, GOAL, held).w_D == 0.5


def test_scripted_queries_are_pure(button):
    sim, state = button
    vlm = ScriptedVLM(sim)
    a = [vlm.query_direction(OBS, GOAL, state), vlm.query_boxes(OBS, GOAL, state), vlm.query_switch(OBS, GOAL, state)]
    b = [vlm.query_direction(OBS, GOAL, state), vlm.query_boxes(OBS, GOAL, state), vlm.query_switch(OBS, GOAL, state)]
    assert a == b


def test_scripted_needs_state(button):
    sim, _ = button
    with pytest.raises(TypeError):
        ScriptedVLM(sim).query_direction(OBS, GOAL, None)


def test_grasp_bit_near_graspable():
    sim = Tabletop(load_task("pick_place"))
    state, _ = sim.reset(2)
    first = sim.task.sub_goals[0]
    vlm = ScriptedVLM(sim)
    assert vlm.query_direction(OBS, GOAL, at(state, state.obj(first).pose)).g == 1
    far = (-state.obj(first).pose[0], -state.obj(first).pose[1])
    assert vlm.query_direction(OBS, GOAL, at(state, far)).g == 0


# parsers ------------------------------------------------------------------


def test_direction_parser_examples():
    reply = 'Sure. {"dx": 1, "dy": 0, "dz": 0, "rx": 0, "ry": 0, "rz": -1, "g": 1} done'
    assert parse_direction(reply) == DirectionHint(1, 0, 0, 0, 0, -1, 1)
    assert parse_direction('{"dx": 1.0, "dy": 0, "dz": 0, "rx": 0, "ry": 0, "rz": 0, "g": 0}').dx == 1
    assert parse_direction('{"dx": 2, "dy": 0, "dz": 0, "rx": 0, "ry": 0, "rz": 0, "g": 0}') is None
    assert parse_direction('{"dx": 1, "dy": 0}') is None
    assert parse_direction('{"dx": true, "dy": 0, "dz": 0, "rx": 0, "ry": 0, "rz": 0, "g": 0}') is None
    assert parse_direction("no json here") is None


def test_boxes_parser_clamps_and_rejects():
    su = parse_boxes('{"end_effector": [70, 10, 4, 4], "sub_goal": [5, 5, 6, 6], "interference": [[30, 30, 8, 8]]}',
                     64, 64)
    assert su.valid_in(64, 64)
    assert su.e.cx <= 64 and len(su.I) == 1
    assert parse_boxes('{"end_effector": [1, 1, 0, 4], "sub_goal": [5, 5, 6, 6]}', 64, 64) is None
    assert parse_boxes('{"end_effector": [1, 1, 4], "sub_goal": [5, 5, 6, 6]}', 64, 64) is None
    assert parse_boxes('{"end_effector": [1, 1, 4, 4], "sub_goal": [5, 5, 6, 6], "interference": [["a"]]}',
                       64, 64) is None
    assert parse_boxes('{"end_effector": [1, 1, 4, 4], "sub_goal": [5, 5, 6, 6]}', 64, 64).I == ()


@pytest.mark.parametrize("reply,expected", [
    ('{"w_D": 0.5}', 0.5), ("0.5", 0.5), (" 1 ", 1.0), ('{"w_D": 0}', 0.0), ("0", 0.0),
    ("0.3", None), ('{"w_D": 0.3}', None), ('{"w_D": "0.5"}', None), ("half", None), ("", None),
])
def test_switch_parser(reply, expected):
    got = parse_switch(reply)
    assert (got.w_D if got else None) == expected


def test_extract_json_skips_garbage_braces():
    assert extract_json('x {not json} then {"a": {"b": "}"}}') == {"a": {"b": "}"}}
    assert extract_json("[1, 2]") is None


@given(st.binary(max_size=200))
def test_parsers_never_raise_on_random_bytes(data):
    assert parse_direction(data) is None or isinstance(parse_direction(data), DirectionHint)
    assert parse_switch(data) is None or parse_switch(data).w_D in (0.0, 0.5, 1.0)
    su = parse_boxes(data, 64, 64)
    assert su is None or su.valid_in(64, 64)


def test_parsers_fuzz_ten_thousand_inputs():
    rng = np.random.default_rng(0)
    pieces = ['{"dx": 1, "dy": -1, "dz": 0, "rx": 0, "ry": 0, "rz": 0, "g": 1}', '{"w_D": 0.5}',
              '{"end_effector": [1, 1, 4, 4], "sub_goal": [5, 5, 6, 6]}', "{", "}", '"', "\\", "nan", "1e999"]
    for i in range(10_000):
        if i % 2:
            blob = rng.integers(0, 256, rng.integers(0, 120), dtype=np.uint8).tobytes()
        else:
            blob = "".join(pieces[j] for j in rng.integers(0, len(pieces), rng.integers(1, 6)))
        for parse in (parse_direction, parse_switch, lambda r: parse_boxes(r, 64, 64)):
            parse(blob)


@given(st.floats(allow_nan=True, allow_infinity=True))
def test_switch_weight_domain(v):
    if v in (0.0, 0.5, 1.0):
        assert SwitchWeight(v).w_D == v
    else:
        with pytest.raises(ValueError):
            SwitchWeight(v)


# remote client ------------------------------------------------------------

PROMPTS = {"direction": "dir {goal}", "boxes": "boxes {goal}", "switch": "switch {goal}"}


class Scripted:
    def __init__(self, *replies):
        self.replies = list(replies)
        self.payloads = []

    def __call__(self, payload):
        self.payloads.append(payload)
        r = self.replies.pop(0)
        if isinstance(r, Exception):
            raise r
        return r


def test_remote_retries_then_succeeds():
    t = Scripted(ConnectionError("down"), "garbage", '{"w_D": 1}')
    vlm = RemoteVLM(transport=t, prompts=PROMPTS, retries=3)
    assert vlm.query_switch(OBS, GOAL).w_D == 1.0
    assert vlm.fallbacks == 0
    assert len(t.payloads) == 3
    assert "switch press the button" in json.dumps(t.payloads[0])


def test_remote_fallbacks():
    vlm = RemoteVLM(transport=Scripted(*["nope"] * 12), prompts=PROMPTS, retries=3)
    assert vlm.query_direction(OBS, GOAL) == DirectionHint()
    assert vlm.query_switch(OBS, GOAL).w_D == 0.5
    assert vlm.query_boxes(OBS, GOAL) == neutral_understanding(64, 64)
    assert vlm.fallbacks == 3


def test_remote_boxes_fall_back_to_last_good():
    good = '{"end_effector": [10, 10, 4, 4], "sub_goal": [40, 40, 6, 6]}'
    vlm = RemoteVLM(transport=Scripted(good, "bad", "bad"), prompts=PROMPTS, retries=1)
    first = vlm.query_boxes(OBS, GOAL)
    assert vlm.query_boxes(OBS, GOAL) == first
    assert vlm.fallbacks == 1


def test_remote_requires_endpoint(monkeypatch):
    monkeypatch.delenv("TABLETOP_MPC_VLM_URL", raising=False)
    with pytest.raises(ValueError, match="endpoint"):
        RemoteVLM(prompts=PROMPTS)


def test_goal_image_is_sent_side_by_side():
    t = Scripted('{"w_D": 0}')
    RemoteVLM(transport=t, prompts=PROMPTS).query_switch(OBS, Goal.from_image(OBS))
    assert "image/png;base64" in json.dumps(t.payloads[0])


def test_http_transport_against_local_server():
    seen = {}

    class Handler(BaseHTTPRequestHandler):
        def do_POST(self):
            body = self.rfile.read(int(self.headers["Content-Length"]))
            seen["auth"] = self.headers.get("Authorization")
            seen["model"] = json.loads(body)["model"]
            out = json.dumps({"choices": [{"message": {"content": '{"w_D": 0.5}'}}]}).encode()
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(out)))
            self.end_headers()
            self.wfile.write(out)

        def log_message(self, *args):
            pass

    server = HTTPServer(("127.0.0.1", 0), Handler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    try:
        url = f"http://127.0.0.1:{server.server_port}/v1/chat/completions"
        vlm = RemoteVLM(transport=http_transport(url, "tok", timeout=5), prompts=PROMPTS, model="m1")
        assert vlm.query_switch(OBS, GOAL).w_D == 0.5
        assert seen == {"auth": "Bearer tok", "model": "m1"}
    finally:
        server.shutdown()
