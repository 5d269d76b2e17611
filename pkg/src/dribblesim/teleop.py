"""Live teleoperation service.

One simulation instance ticks at 50 Hz wall clock while network clients send
global-frame velocity commands and receive a 20 Hz state stream.  Commands
are latest-wins through a mailbox; every accepted command is acknowledged
with the control tick at which it took effect.

Wire protocol (both transports carry the same UTF-8 JSON messages):
  * raw TCP: 4-byte little-endian length prefix per message
  * WebSocket shim: RFC6455 text frames, for browser clients

Client -> server: {"type": "command", "vx": float, "vy": float}
Server -> client, 20 Hz:
  {"type": "state", "t": s, "tick": n,
   "robot": {"pos": [3], "quat": [4], "yaw": f, "fsm": str},
   "ball": {"pos": [3], "vel": [3]},
   "estimate": {"ball": [3], "drag": f},
   "reward": {"total": f}}
Ack: {"type": "ack", "seq": n, "tick": n}
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import socket
import struct
import threading
import time

import numpy as np

from .config import Config
from .env import DribbleEnv
from .runtime import CommandMailbox, DeploymentRuntime

log = logging.getLogger("dribblesim.teleop")

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


class BindError(OSError):
    pass


class MalformedMessage(ValueError):
    pass


def _state_message(env: DribbleEnv, runtime: DeploymentRuntime, tick: int,
                   reward_total: float, estimate: np.ndarray | None) -> dict:
    w = env.world
    est_ball = env.ball_estimate[0]
    drag = float(estimate[5]) if estimate is not None else 0.0
    return {
        "type": "state",
        "t": float(w.time[0]),
        "tick": tick,
        "robot": {
            "pos": [float(v) for v in w.base_pos[0]],
            "quat": [float(v) for v in w.base_quat[0]],
            "yaw": float(w.yaw_global()[0]),
            "fsm": runtime.mode(0),
        },
        "ball": {
            "pos": [float(v) for v in w.ball_pos[0]],
            "vel": [float(v) for v in w.ball_vel[0]],
        },
        "estimate": {"ball": [float(v) for v in est_ball], "drag": drag},
        "reward": {"total": reward_total},
        "command": [float(v) for v in env.command[0]],
    }


class _Client:
    """Transport-agnostic connection: user supplies send/recv of message
    strings; the reader thread feeds commands into the mailbox."""

    def __init__(self, sock: socket.socket, websocket: bool):
        self.sock = sock
        self.websocket = websocket
        self.alive = True
        self.lock = threading.Lock()

    # --------------------------------------------------------- raw framing
    def _recv_exact(self, n: int) -> bytes | None:
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def recv_message(self) -> str | None:
        if self.websocket:
            return self._recv_ws()
        header = self._recv_exact(4)
        if header is None:
            return None
        (length,) = struct.unpack("<I", header)
        if length > 1 << 20:
            raise MalformedMessage(f"frame length {length} too large")
        data = self._recv_exact(length)
        return None if data is None else data.decode()

    def send_message(self, text: str) -> None:
        data = text.encode()
        with self.lock:
            if self.websocket:
                header = bytearray([0x81])
                n = len(data)
                if n < 126:
                    header.append(n)
                elif n < 1 << 16:
                    header.append(126)
                    header += struct.pack(">H", n)
                else:
                    header.append(127)
                    header += struct.pack(">Q", n)
                self.sock.sendall(bytes(header) + data)
            else:
                self.sock.sendall(struct.pack("<I", len(data)) + data)

    # ---------------------------------------------------------- websocket
    def _recv_ws(self) -> str | None:
        head = self._recv_exact(2)
        if head is None:
            return None
        opcode = head[0] & 0x0F
        masked = head[1] & 0x80
        length = head[1] & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", self._recv_exact(2))
        elif length == 127:
            (length,) = struct.unpack(">Q", self._recv_exact(8))
        mask = self._recv_exact(4) if masked else b"\x00" * 4
        payload = self._recv_exact(length) if length else b""
        if payload is None:
            return None
        if masked:
            payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        if opcode == 0x8:   # close
            return None
        if opcode == 0x9:   # ping -> pong
            with self.lock:
                self.sock.sendall(bytes([0x8A, len(payload)]) + payload)
            return self._recv_ws()
        if opcode not in (0x1, 0x2):
            return self._recv_ws()
        return payload.decode()


def _ws_handshake(sock: socket.socket) -> bool:
    data = b""
    sock.settimeout(5.0)
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            return False
        data += chunk
    headers = {}
    for line in data.decode(errors="replace").split("\r\n")[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get("sec-websocket-key")
    if key is None:
        return False
    accept = base64.b64encode(
        hashlib.sha1((key + _WS_GUID).encode()).digest()
    ).decode()
    sock.sendall(
        (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
        ).encode()
    )
    sock.settimeout(None)
    return True


class TeleopServer:
    """Runs the deployment runtime on a wall-clock 50 Hz tick and serves the
    teleop protocol on a TCP port plus an optional WebSocket port."""

    def __init__(self, runtime: DeploymentRuntime, port: int,
                 ws_port: int | None = None, realtime: bool = True,
                 state_rate_hz: float = 20.0):
        self.runtime = runtime
        self.env = runtime.env
        self.mailbox = CommandMailbox()
        self.realtime = realtime
        self.state_rate_hz = state_rate_hz
        self.tick = 0
        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()
        self._acks: list[tuple[_Client, int, int]] = []
        self._stop = threading.Event()
        self._last_reward = 0.0
        self._pending: dict[int, int] = {}   # command seq -> not yet applied
        self._threads: list[threading.Thread] = []
        try:
            self._tcp = socket.create_server(("127.0.0.1", port))
        except OSError as e:
            raise BindError(f"cannot bind port {port}: {e}") from e
        self._ws = None
        if ws_port is not None:
            try:
                self._ws = socket.create_server(("127.0.0.1", ws_port))
            except OSError as e:
                raise BindError(f"cannot bind port {ws_port}: {e}") from e

    # ------------------------------------------------------------- lifecycle
    def start(self) -> None:
        self._threads = [
            threading.Thread(target=self._accept_loop, args=(self._tcp, False),
                             daemon=True),
            threading.Thread(target=self._sim_loop, daemon=True),
            threading.Thread(target=self._broadcast_loop, daemon=True),
        ]
        if self._ws is not None:
            self._threads.append(
                threading.Thread(target=self._accept_loop, args=(self._ws, True),
                                 daemon=True)
            )
        for t in self._threads:
            t.start()

    def stop(self) -> None:
        self._stop.set()
        for srv in (self._tcp, self._ws):
            if srv is not None:
                try:
                    srv.close()
                except OSError:
                    pass
        with self._clients_lock:
            for c in self._clients:
                try:
                    c.sock.close()
                except OSError:
                    pass

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            self.stop()

    # ----------------------------------------------------------- network side
    def _accept_loop(self, server: socket.socket, websocket: bool) -> None:
        while not self._stop.is_set():
            try:
                sock, _addr = server.accept()
            except OSError:
                return
            if websocket and not _ws_handshake(sock):
                sock.close()
                continue
            client = _Client(sock, websocket)
            with self._clients_lock:
                self._clients.append(client)
            threading.Thread(target=self._reader_loop, args=(client,),
                             daemon=True).start()

    def _reader_loop(self, client: _Client) -> None:
        while not self._stop.is_set() and client.alive:
            try:
                text = client.recv_message()
            except (OSError, MalformedMessage) as e:
                if isinstance(e, MalformedMessage):
                    log.warning("malformed frame: %s", e)
                    continue
                break
            if text is None:
                break
            try:
                msg = json.loads(text)
                if msg.get("type") == "command":
                    seq = self.mailbox.put(float(msg["vx"]), float(msg["vy"]))
                    with self._clients_lock:
                        self._acks.append((client, seq, -1))
                else:
                    log.warning("ignoring message type %r", msg.get("type"))
            except (ValueError, KeyError, TypeError) as e:
                log.warning("malformed message %r: %s", text[:80], e)
        client.alive = False
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)

    # ------------------------------------------------------------- sim side
    def _sim_loop(self) -> None:
        dt = self.env.cfg.sim.control_dt
        next_t = time.perf_counter()
        while not self._stop.is_set():
            cmd, seq = self.mailbox.latest()
            self.runtime.tick(cmd)
            self.tick += 1
            self._last_seq_applied = seq
            with self._clients_lock:
                for i, (c, s, applied) in enumerate(self._acks):
                    if applied < 0 and s <= seq:
                        self._acks[i] = (c, s, self.tick)
            if self.realtime:
                next_t += dt
                delay = next_t - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
                else:
                    next_t = time.perf_counter()

    def _broadcast_loop(self) -> None:
        period = 1.0 / self.state_rate_hz
        while not self._stop.is_set():
            t0 = time.perf_counter()
            bd = self.env.compute_reward()
            est = self.runtime.policies["dribble"].last_estimate
            msg = _state_message(
                self.env, self.runtime, self.tick, float(np.mean(bd.total)),
                est[0] if est is not None else None,
            )
            payload = json.dumps(msg)
            with self._clients_lock:
                clients = list(self._clients)
                acks, self._acks = self._acks, []
            keep = []
            for client, seq, applied in acks:
                if applied < 0:
                    keep.append((client, seq, applied))
                    continue
                try:
                    client.send_message(json.dumps(
                        {"type": "ack", "seq": seq, "tick": applied}
                    ))
                except OSError:
                    pass
            with self._clients_lock:
                self._acks.extend(keep)
            for client in clients:
                try:
                    client.send_message(payload)
                except OSError:
                    client.alive = False
            delay = period - (time.perf_counter() - t0)
            if delay > 0:
                time.sleep(delay)


class TeleopClient:
    """Minimal raw-TCP client for tests and scripted drivers."""

    def __init__(self, port: int, host: str = "127.0.0.1", timeout: float = 5.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self._client = _Client(self.sock, websocket=False)

    def send_command(self, vx: float, vy: float) -> None:
        self._client.send_message(json.dumps({"type": "command", "vx": vx, "vy": vy}))

    def recv(self) -> dict:
        text = self._client.recv_message()
        if text is None:
            raise ConnectionError("server closed")
        return json.loads(text)

    def close(self) -> None:
        self.sock.close()
