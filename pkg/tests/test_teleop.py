import json
import socket
import struct
import time

import numpy as np
import pytest

from dribblesim.config import Config
from dribblesim.env import DribbleEnv
from dribblesim.runtime import DeploymentRuntime
from dribblesim.teleop import BindError, TeleopClient, TeleopServer
from dribblesim.trainer import ActorCritic


def free_port():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


@pytest.fixture()
def server():
    cfg = Config()
    cfg.ppo.n_envs = 4
    env = DribbleEnv(1, cfg, seed=0, fixed_command=np.zeros(2))
    env.noise_events_enabled = False
    env.terminate_on_fall = False
    ac = ActorCritic(cfg, init_key=0)
    runtime = DeploymentRuntime(env, ac)
    srv = TeleopServer(runtime, free_port(), ws_port=free_port(), realtime=False)
    srv.start()
    yield srv
    srv.stop()


def test_command_acknowledged_with_tick(server):
    client = TeleopClient(server._tcp.getsockname()[1])
    client.send_command(1.0, 0.0)
    deadline = time.time() + 5.0
    ack = None
    while time.time() < deadline:
        msg = client.recv()
        if msg["type"] == "ack":
            ack = msg
            break
    assert ack is not None
    assert ack["tick"] >= 1
    client.close()


def test_state_stream_contains_documented_fields(server):
    client = TeleopClient(server._tcp.getsockname()[1])
    msg = client.recv()
    while msg["type"] != "state":
        msg = client.recv()
    assert {"t", "tick", "robot", "ball", "estimate", "reward"} <= set(msg)
    assert {"pos", "quat", "yaw", "fsm"} <= set(msg["robot"])
    assert {"pos", "vel"} <= set(msg["ball"])
    assert {"ball", "drag"} <= set(msg["estimate"])
    assert msg["robot"]["fsm"] in ("dribble", "recovery")
    client.close()


def test_command_applied_within_a_tick(server):
    client = TeleopClient(server._tcp.getsockname()[1])
    client.send_command(1.2, -0.4)
    deadline = time.time() + 5.0
    seen = None
    while time.time() < deadline:
        msg = client.recv()
        if msg["type"] == "state" and abs(msg["command"][0] - 1.2) < 1e-9:
            seen = msg
            break
    assert seen is not None
    assert abs(seen["command"][1] + 0.4) < 1e-9
    client.close()


def test_command_clamped_to_limit(server):
    client = TeleopClient(server._tcp.getsockname()[1])
    client.send_command(9.0, -9.0)
    deadline = time.time() + 5.0
    while time.time() < deadline:
        msg = client.recv()
        if msg["type"] == "state" and abs(msg["command"][0]) > 0:
            assert msg["command"][0] == pytest.approx(1.5)
            assert msg["command"][1] == pytest.approx(-1.5)
            break
    client.close()


def test_malformed_message_keeps_connection(server):
    port = server._tcp.getsockname()[1]
    raw = socket.create_connection(("127.0.0.1", port), timeout=5.0)
    bad = b"this is not json"
    raw.sendall(struct.pack("<I", len(bad)) + bad)
    # connection stays usable: a valid command still gets acked
    good = json.dumps({"type": "command", "vx": 0.5, "vy": 0.0}).encode()
    raw.sendall(struct.pack("<I", len(good)) + good)
    client = TeleopClient.__new__(TeleopClient)
    client.sock = raw
    from dribblesim.teleop import _Client

    client._client = _Client(raw, websocket=False)
    deadline = time.time() + 5.0
    got_ack = False
    while time.time() < deadline:
        msg = client.recv()
        if msg["type"] == "ack":
            got_ack = True
            break
    assert got_ack
    raw.close()


def test_no_client_idles_with_zero_command(server):
    time.sleep(0.3)
    assert np.abs(server.env.command).max() == 0.0
    assert server.tick > 0  # the simulation keeps running


def test_websocket_shim_handshake_and_stream(server):
    ws_port = server._ws.getsockname()[1]
    sock = socket.create_connection(("127.0.0.1", ws_port), timeout=5.0)
    key = "dGhlIHNhbXBsZSBub25jZQ=="
    sock.sendall(
        (
            f"GET / HTTP/1.1\r\nHost: localhost:{ws_port}\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        ).encode()
    )
    resp = b""
    while b"\r\n\r\n" not in resp:
        resp += sock.recv(4096)
    assert b"101" in resp.split(b"\r\n")[0]
    assert b"s3pPLMBiTxaQ9kYGzzhZRbK+xOo=" in resp
    # read one text frame (server frames are unmasked)
    head = sock.recv(2)
    assert head[0] & 0x0F == 0x1
    length = head[1] & 0x7F
    if length == 126:
        length = struct.unpack(">H", sock.recv(2))[0]
    payload = b""
    while len(payload) < length:
        payload += sock.recv(length - len(payload))
    msg = json.loads(payload)
    assert msg["type"] in ("state", "ack")
    sock.close()


def test_bind_error_on_busy_port():
    cfg = Config()
    cfg.ppo.n_envs = 4
    env = DribbleEnv(1, cfg, seed=0, fixed_command=np.zeros(2))
    ac = ActorCritic(cfg, init_key=0)
    runtime = DeploymentRuntime(env, ac)
    blocker = socket.create_server(("127.0.0.1", 0))
    port = blocker.getsockname()[1]
    with pytest.raises(BindError):
        TeleopServer(runtime, port)
    blocker.close()
