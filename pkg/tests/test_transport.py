import threading

import numpy as np
import pytest

from splitfire.errors import ProtocolError, TransportError
from splitfire.protocol import (
    BYE_DUPLICATE_CLIENT,
    Activations,
    Bye,
    Gradients,
    Hello,
    RoundStart,
)
from splitfire.tensor import Tensor
from splitfire.transport import (
    Server,
    connect,
    loopback_endpoint,
    open_channel,
    serve,
    tcp_endpoint,
)


def small_tensor(value=1.0, n=4):
    return Tensor(np.full(n, value, dtype=np.float32))


class ScriptedHandler:
    """Server handler running a fixed number of tiny rounds."""

    def __init__(self, n_clients, n_rounds, quota=1):
        self.n_clients = n_clients
        self.n_rounds = n_rounds
        self.quota = quota
        self.round = 0
        self.hellos = None
        self.activation_log = []

    def start(self, hellos):
        self.hellos = dict(hellos)

    def next_round(self):
        if self.round >= self.n_rounds:
            return None
        self.round += 1
        return self.round, tuple(self.quota for _ in range(self.n_clients))

    def on_activations(self, round_no, acts):
        self.activation_log.append((round_no, sorted(acts)))
        return {cid: small_tensor(0.0) for cid in acts}

    def on_front_grads(self, round_no, grads):
        return (small_tensor(7.0),), None


class ScriptedWorker:
    """Client worker that echoes fixed tensors and records the session."""

    def __init__(self, client_id, size=10):
        self.client_id = client_id
        self.size = size
        self.rounds_seen = []
        self.syncs = []

    def partition_size(self):
        return self.size

    def on_round_start(self, round_no, quotas):
        self.rounds_seen.append(round_no)
        if quotas[self.client_id] == 0:
            return None
        return small_tensor(float(self.client_id)), small_tensor(1.0, 4)

    def on_gradients(self, round_no, cut_grad):
        return small_tensor(float(self.client_id) + 0.5)

    def on_weight_sync(self, round_no, tensors):
        self.syncs.append(tensors)

    def on_metrics(self, round_no, loss, accuracy):
        pass


def run_session(endpoint, handler, workers, server=None):
    threads = [
        threading.Thread(target=connect, args=(endpoint, w.client_id, w), daemon=True)
        for w in workers
    ]
    for t in threads:
        t.start()
    serve(endpoint, len(workers), handler, server=server)
    for t in threads:
        t.join(timeout=10)


def test_loopback_single_client_single_round():
    endpoint = loopback_endpoint(1)
    handler = ScriptedHandler(1, 1)
    worker = ScriptedWorker(0)
    run_session(endpoint, handler, [worker])
    assert handler.hellos == {0: 10}
    assert handler.activation_log == [(1, [0])]
    assert worker.rounds_seen == [1]
    assert worker.syncs[0][0] == small_tensor(7.0)


def test_loopback_three_clients_out_of_order_arrival():
    endpoint = loopback_endpoint(3)
    handler = ScriptedHandler(3, 2)
    workers = [ScriptedWorker(cid) for cid in (2, 0, 1)]
    run_session(endpoint, handler, workers)
    assert handler.activation_log == [(1, [0, 1, 2]), (2, [0, 1, 2])]
    assert all(w.rounds_seen == [1, 2] for w in workers)


def test_loopback_zero_rounds_clean_shutdown():
    endpoint = loopback_endpoint(1)
    handler = ScriptedHandler(1, 0)
    worker = ScriptedWorker(0)
    run_session(endpoint, handler, [worker])
    assert worker.rounds_seen == []


def test_idle_client_skips_round():
    class IdleQuotaHandler(ScriptedHandler):
        def next_round(self):
            if self.round >= self.n_rounds:
                return None
            self.round += 1
            return self.round, (1, 0)  # client 1 sits out

    endpoint = loopback_endpoint(2)
    handler = IdleQuotaHandler(2, 1)
    workers = [ScriptedWorker(0), ScriptedWorker(1)]
    run_session(endpoint, handler, workers)
    assert handler.activation_log == [(1, [0])]
    # the idle client still receives the weight sync broadcast
    assert len(workers[1].syncs) == 1


def test_duplicate_client_id_turned_away():
    endpoint = loopback_endpoint(2)
    handler = ScriptedHandler(2, 1)
    outcomes = {}

    def dup_client(tag):
        ch = open_channel(endpoint)
        try:
            ch.send(Hello(0, 10))
            msg = ch.recv(5)
            outcomes[tag] = msg
            if isinstance(msg, Bye):
                return
            # first client with id 0 wins; play out a minimal round
            while not isinstance(msg, Bye):
                if isinstance(msg, RoundStart):
                    ch.send(Activations(msg.round, 0, small_tensor(), small_tensor()))
                elif isinstance(msg, Gradients):
                    ch.send(Gradients(msg.round, 0, small_tensor()))
                msg = ch.recv(5)
        finally:
            ch.close()

    real = ScriptedWorker(1)
    threads = [
        threading.Thread(target=dup_client, args=("a",), daemon=True),
        threading.Thread(target=dup_client, args=("b",), daemon=True),
        threading.Thread(target=connect, args=(endpoint, 1, real), daemon=True),
    ]
    for t in threads:
        t.start()
    serve(endpoint, 2, handler)
    for t in threads:
        t.join(timeout=10)
    byes = [m for m in outcomes.values() if isinstance(m, Bye)]
    assert len(byes) == 1
    assert byes[0].reason == BYE_DUPLICATE_CLIENT


def test_stale_round_aborts_session():
    endpoint = loopback_endpoint(1)
    handler = ScriptedHandler(1, 1)

    def stale_client():
        ch = open_channel(endpoint)
        try:
            ch.send(Hello(0, 10))
            msg = ch.recv(5)
            assert isinstance(msg, RoundStart)
            ch.send(Activations(msg.round + 5, 0, small_tensor(), small_tensor()))
            ch.recv(5)  # server's abort Bye
        except TransportError:
            pass
        finally:
            ch.close()

    t = threading.Thread(target=stale_client, daemon=True)
    t.start()
    with pytest.raises(ProtocolError, match="stale round"):
        serve(endpoint, 1, handler)
    t.join(timeout=10)


def test_tcp_session_two_rounds():
    endpoint = tcp_endpoint("127.0.0.1", 0, 2)
    server = Server(endpoint)
    handler = ScriptedHandler(2, 2)
    live = tcp_endpoint("127.0.0.1", server.port, 2)
    workers = [ScriptedWorker(0), ScriptedWorker(1)]
    try:
        run_session(live, handler, workers, server=server)
    finally:
        server.close()
    assert handler.activation_log == [(1, [0, 1]), (2, [0, 1])]
    assert all(len(w.syncs) == 2 for w in workers)


def test_tcp_connect_refused():
    # bind-then-close to get a port that is definitely not listening
    probe = Server(tcp_endpoint("127.0.0.1", 0, 1))
    port = probe.port
    probe.close()
    with pytest.raises(TransportError):
        open_channel(tcp_endpoint("127.0.0.1", port, 1), connect_timeout=2)


def test_handshake_timeout():
    endpoint = loopback_endpoint(1)
    with pytest.raises(TransportError, match="handshake"):
        serve(endpoint, 1, ScriptedHandler(1, 1), handshake_timeout=0.2)
