import json
import socket
import threading

import pytest

from fsreal.compression import encode
from fsreal.model import Architecture, init_model
from fsreal.net.client import client_executor_loop, parse_endpoint
from fsreal.net.protocol import SERVER_ID, UNASSIGNED_ID, Frame, MsgType, read_frame, write_frame
from fsreal.net.server import NetServer
from fsreal.sim import SimConfig, run


def test_parse_endpoint():
    assert parse_endpoint("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_endpoint("[::1]:9") == ("::1", 9)
    for bad in ("host", ":80", "h:x", "h:70000"):
        with pytest.raises(ValueError):
            parse_endpoint(bad)


def _serve_with_thread_clients(cfg, tmp_path, n):
    server = NetServer(cfg, port=0, wait_s=30)
    threads = [threading.Thread(target=client_executor_loop, args=(server.address, tmp_path / f"id{i}"), daemon=True)
               for i in range(n)]
    for t in threads:
        t.start()
    result = server.run()
    for t in threads:
        t.join(10)
    return result


def test_single_client_matches_simulation(tmp_path):
    cfg = SimConfig(total_clients=1, availability_rate=1.0, over_selection_q=1.0, max_rounds=4, zero_latency=True,
                    seed=11, timeout_t0_s=5.0)
    net = _serve_with_thread_clients(cfg, tmp_path, 1)
    sim = run(cfg)
    assert net.final_model == sim.final_model
    assert (tmp_path / "id0").read_text().strip() == "0"


def test_wire_bytes_match_logged_traffic(tmp_path):
    cfg = SimConfig(total_clients=3, availability_rate=1.0, over_selection_q=1.0, max_rounds=2, zero_latency=True,
                    codec="int8", timeout_t0_s=5.0)
    net = _serve_with_thread_clients(cfg, tmp_path, 3)
    payload = encode(init_model(Architecture(10, 32, 4), 0), "int8")
    first = net.events.of_type("broadcast")[0]
    assert first["bytes"] == 23 + len(payload)


class FakeServer:
    """Scripted peer for client-side protocol checks."""

    def __init__(self):
        self.listener = socket.create_server(("127.0.0.1", 0))
        self.address = self.listener.getsockname()[:2]
        self.spec = SimConfig(total_clients=2, samples_per_client=10).task_spec(1)

    def handshake(self, sock, expect_id=UNASSIGNED_ID):
        hello = read_frame(sock)
        assert hello.msg_type == MsgType.HELLO and hello.sender_id == expect_id
        write_frame(sock, Frame(MsgType.ACK, 0, SERVER_ID, 0,
                                json.dumps({"client_id": 1, "task": self.spec.to_dict()}).encode()))
        ready = read_frame(sock)
        assert ready.msg_type == MsgType.ACK and json.loads(ready.payload) == {"n_samples": 10}


def _task(round_index):
    return Frame(MsgType.TASK_BROADCAST, round_index, SERVER_ID, 0, encode(init_model(Architecture(10, 32, 4), 0), "none"))


def test_client_ignores_duplicate_task_and_exits_on_shutdown(tmp_path):
    fake = FakeServer()
    out = {}
    t = threading.Thread(target=lambda: out.setdefault("rounds", client_executor_loop(fake.address, tmp_path / "id")))
    t.start()
    sock, _ = fake.listener.accept()
    with sock:
        fake.handshake(sock)
        write_frame(sock, _task(0))
        up = read_frame(sock)
        assert (up.msg_type, up.round, up.sender_id) == (MsgType.MODEL_UPLOAD, 0, 1)
        write_frame(sock, _task(0))
        write_frame(sock, _task(1))
        assert read_frame(sock).round == 1  # round 0 was not trained twice
        write_frame(sock, Frame(MsgType.SHUTDOWN, 2, SERVER_ID))
        t.join(10)
        with pytest.raises(EOFError):
            read_frame(sock)
    assert out["rounds"] == 2
    fake.listener.close()


def test_client_reconnects_with_persisted_id(tmp_path):
    fake = FakeServer()
    t = threading.Thread(target=client_executor_loop, args=(fake.address, tmp_path / "id"), daemon=True)
    t.start()
    sock, _ = fake.listener.accept()
    fake.handshake(sock)
    sock.close()
    sock, _ = fake.listener.accept()
    with sock:
        fake.handshake(sock, expect_id=1)
        write_frame(sock, Frame(MsgType.SHUTDOWN, 0, SERVER_ID))
        t.join(10)
    assert not t.is_alive()
    fake.listener.close()


def test_client_gives_up_after_bounded_retries():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    with pytest.raises(ConnectionError):
        client_executor_loop(("127.0.0.1", port), max_attempts=3, backoff_s=0.01)


def test_server_refuses_id_out_of_range():
    server = NetServer(SimConfig(total_clients=1, max_rounds=1), port=0, wait_s=1)
    threading.Thread(target=server._accept_loop, daemon=True).start()
    with socket.create_connection(server.address) as sock:
        write_frame(sock, Frame(MsgType.HELLO, 0, 5))
        reply = read_frame(sock)
        assert "error" in json.loads(reply.payload)
    server.close()


def test_server_times_out_waiting_for_clients():
    server = NetServer(SimConfig(total_clients=2, max_rounds=1), port=0, wait_s=0.3)
    with pytest.raises(TimeoutError):
        server.run()
