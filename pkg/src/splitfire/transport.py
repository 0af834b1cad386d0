"""Frame transport between clients and server: in-process loopback and TCP.

Both carriers move the exact same encoded frames, so a loopback run and a
TCP run with the same seed produce identical numbers. The server enforces a
hard round barrier: every participating client must deliver its activations
before the round computes.
"""

import queue
import socket
import struct
from dataclasses import dataclass, field

from .errors import ProtocolError, TransportError, ValidationError
from .protocol import (
    BYE_DUPLICATE_CLIENT,
    BYE_OK,
    BYE_PROTOCOL_ERROR,
    Activations,
    Bye,
    Gradients,
    Hello,
    Metrics,
    RoundStart,
    WeightSync,
    decode_message,
    encode_message,
)

DEFAULT_HANDSHAKE_TIMEOUT = 10.0
DEFAULT_ROUND_TIMEOUT = 60.0

_HEADER_LEN = 10  # magic(4) + version(1) + tag(1) + payload length(4)


class _LoopbackHub:
    def __init__(self):
        self.pending = queue.Queue()


@dataclass
class Endpoint:
    kind: str  # "loopback" | "tcp"
    host: str = "127.0.0.1"
    port: int = 0
    client_count: int = 3
    hub: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("loopback", "tcp"):
            raise ValidationError(f"unknown endpoint kind {self.kind!r}")
        if self.client_count < 1:
            raise ValidationError("client_count must be >= 1")
        if self.kind == "tcp" and not (0 <= self.port <= 65535):
            raise ValidationError(f"tcp port {self.port} outside 0..65535")
        if self.kind == "loopback" and self.hub is None:
            self.hub = _LoopbackHub()


def loopback_endpoint(n_clients=3):
    return Endpoint("loopback", client_count=n_clients)


def tcp_endpoint(host, port, n_clients=3):
    return Endpoint("tcp", host=host, port=port, client_count=n_clients)


class Channel:
    """Message channel over a frame carrier."""

    def send(self, message):
        self._send_frame(encode_message(message))

    def recv(self, timeout):
        return decode_message(self._recv_frame(timeout))

    def close(self):
        raise NotImplementedError


class QueueChannel(Channel):
    def __init__(self, in_q, out_q):
        self._in = in_q
        self._out = out_q
        self._closed = False

    def _send_frame(self, frame):
        if self._closed:
            raise TransportError("channel is closed")
        self._out.put(frame)

    def _recv_frame(self, timeout):
        try:
            frame = self._in.get(timeout=timeout)
        except queue.Empty:
            raise TransportError(f"loopback recv timed out after {timeout}s") from None
        if frame is None:
            raise TransportError("peer closed the channel")
        return frame

    def close(self):
        if not self._closed:
            self._closed = True
            self._out.put(None)


class SocketChannel(Channel):
    def __init__(self, sock):
        self._sock = sock

    def _send_frame(self, frame):
        try:
            self._sock.sendall(frame)
        except OSError as e:
            raise TransportError(f"socket send failed: {e}") from e

    def _read_exact(self, n):
        buf = b""
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout as e:
                raise TransportError("socket recv timed out") from e
            except OSError as e:
                raise TransportError(f"socket recv failed: {e}") from e
            if not chunk:
                raise TransportError("peer closed the connection")
            buf += chunk
        return buf

    def _recv_frame(self, timeout):
        self._sock.settimeout(timeout)
        header = self._read_exact(_HEADER_LEN)
        (length,) = struct.unpack("<I", header[6:10])
        return header + self._read_exact(length)

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def open_channel(endpoint, connect_timeout=DEFAULT_HANDSHAKE_TIMEOUT):
    """Client side: open a raw channel to the server."""
    if endpoint.kind == "loopback":
        to_server, to_client = queue.Queue(), queue.Queue()
        endpoint.hub.pending.put((to_server, to_client))
        return QueueChannel(to_client, to_server)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.settimeout(connect_timeout)
    try:
        sock.connect((endpoint.host, endpoint.port))
    except OSError as e:
        sock.close()
        raise TransportError(
            f"connect to {endpoint.host}:{endpoint.port} failed: {e}"
        ) from e
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketChannel(sock)


class Server:
    """Accepts client connections and drives the synchronous round loop."""

    def __init__(self, endpoint):
        self.endpoint = endpoint
        self._listener = None
        if endpoint.kind == "tcp":
            self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._listener.bind((endpoint.host, endpoint.port))
            self._listener.listen(endpoint.client_count)
            self.port = self._listener.getsockname()[1]
        else:
            self.port = None

    def _accept_raw(self, timeout):
        if self.endpoint.kind == "loopback":
            try:
                to_server, to_client = self.endpoint.hub.pending.get(timeout=timeout)
            except queue.Empty:
                raise TransportError("no client connected within the handshake timeout")
            return QueueChannel(to_server, to_client)
        self._listener.settimeout(timeout)
        try:
            sock, _ = self._listener.accept()
        except socket.timeout:
            raise TransportError("no client connected within the handshake timeout")
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        return SocketChannel(sock)

    def accept_clients(self, n_clients, handshake_timeout=DEFAULT_HANDSHAKE_TIMEOUT):
        """Collect Hello from n distinct clients; duplicates are turned away
        with Bye(duplicate)."""
        channels, hellos = {}, {}
        while len(channels) < n_clients:
            ch = self._accept_raw(handshake_timeout)
            msg = ch.recv(handshake_timeout)
            if not isinstance(msg, Hello):
                ch.send(Bye(BYE_PROTOCOL_ERROR))
                ch.close()
                raise ProtocolError(f"expected Hello, got {type(msg).__name__}")
            if msg.client_id in channels or msg.client_id >= n_clients:
                ch.send(Bye(BYE_DUPLICATE_CLIENT))
                ch.close()
                continue
            channels[msg.client_id] = ch
            hellos[msg.client_id] = msg.partition_size
        return channels, hellos

    def close(self):
        if self._listener is not None:
            self._listener.close()


def _abort(channels):
    for ch in channels.values():
        try:
            ch.send(Bye(BYE_PROTOCOL_ERROR))
        except TransportError:
            pass
        ch.close()


def serve(
    endpoint,
    n_clients,
    handler,
    handshake_timeout=DEFAULT_HANDSHAKE_TIMEOUT,
    round_timeout=DEFAULT_ROUND_TIMEOUT,
    server=None,
):
    """Run the full server session: handshake, synchronous rounds, Bye.

    handler drives the schedule and the numerics:
      start(hellos)                          -> None
      next_round()                           -> (round_no, quotas) or None
      on_activations(round_no, {id: (feature_map, labels)}) -> {id: cut_grad}
      on_front_grads(round_no, {id: flat_grad}) -> (weight_tensors, metrics|None)
    """
    owns_server = server is None
    if owns_server:
        server = Server(endpoint)
    channels = {}
    try:
        channels, hellos = server.accept_clients(n_clients, handshake_timeout)
        handler.start(hellos)
        while True:
            nxt = handler.next_round()
            if nxt is None:
                break
            round_no, quotas = nxt
            if len(quotas) != n_clients:
                raise ValidationError(
                    f"round {round_no}: {len(quotas)} quotas for {n_clients} clients"
                )
            start_msg = RoundStart(round_no, tuple(int(q) for q in quotas))
            for ch in channels.values():
                ch.send(start_msg)
            participants = [cid for cid in sorted(channels) if quotas[cid] > 0]
            acts = {}
            for cid in participants:
                msg = channels[cid].recv(round_timeout)
                _expect(msg, Activations, round_no, cid, channels)
                acts[cid] = (msg.feature_map, msg.labels)
            cut_grads = handler.on_activations(round_no, acts)
            for cid in participants:
                channels[cid].send(Gradients(round_no, cid, cut_grads[cid]))
            front_grads = {}
            for cid in participants:
                msg = channels[cid].recv(round_timeout)
                _expect(msg, Gradients, round_no, cid, channels)
                front_grads[cid] = msg.grad
            weights, metrics = handler.on_front_grads(round_no, front_grads)
            sync = WeightSync(round_no, tuple(weights))
            for ch in channels.values():
                ch.send(sync)
            if metrics is not None:
                report = Metrics(round_no, float(metrics[0]), float(metrics[1]))
                for ch in channels.values():
                    ch.send(report)
        for ch in channels.values():
            ch.send(Bye(BYE_OK))
    except BaseException:
        _abort(channels)
        raise
    finally:
        for ch in channels.values():
            ch.close()
        if owns_server:
            server.close()


def _expect(msg, kind, round_no, client_id, channels):
    if isinstance(msg, Bye):
        _abort(channels)
        raise TransportError(f"client {client_id} left mid-round (reason {msg.reason})")
    if not isinstance(msg, kind):
        _abort(channels)
        raise ProtocolError(
            f"expected {kind.__name__} from client {client_id}, got {type(msg).__name__}"
        )
    if msg.round != round_no:
        _abort(channels)
        raise ProtocolError(
            f"client {client_id} sent {kind.__name__} for stale round {msg.round}, "
            f"current round is {round_no}"
        )
    if msg.client_id != client_id:
        _abort(channels)
        raise ProtocolError(
            f"client id mismatch: channel {client_id}, message {msg.client_id}"
        )


def connect(
    endpoint,
    client_id,
    worker,
    handshake_timeout=DEFAULT_HANDSHAKE_TIMEOUT,
    round_timeout=DEFAULT_ROUND_TIMEOUT,
):
    """Run the full client session loop against a server.

    worker supplies the local numerics:
      partition_size()               -> int (for Hello)
      on_round_start(round, quotas)  -> (feature_map, labels) or None if idle
      on_gradients(round, cut_grad)  -> flat front-gradient tensor
      on_weight_sync(round, tensors) -> None
      on_metrics(round, loss, acc)   -> None
    """
    ch = open_channel(endpoint, handshake_timeout)
    last_round = 0
    try:
        ch.send(Hello(client_id, worker.partition_size()))
        while True:
            msg = ch.recv(round_timeout)
            if isinstance(msg, Bye):
                if msg.reason != BYE_OK:
                    raise TransportError(f"server closed the session (reason {msg.reason})")
                return
            if isinstance(msg, RoundStart):
                if msg.round < last_round:
                    raise ProtocolError(
                        f"round went backwards: {msg.round} after {last_round}"
                    )
                last_round = msg.round
                batch = worker.on_round_start(msg.round, msg.quotas)
                if batch is not None:
                    fm, labels = batch
                    ch.send(Activations(msg.round, client_id, fm, labels))
            elif isinstance(msg, Gradients):
                flat = worker.on_gradients(msg.round, msg.grad)
                ch.send(Gradients(msg.round, client_id, flat))
            elif isinstance(msg, WeightSync):
                worker.on_weight_sync(msg.round, msg.tensors)
            elif isinstance(msg, Metrics):
                worker.on_metrics(msg.round, msg.loss, msg.accuracy)
            else:
                raise ProtocolError(f"unexpected message {type(msg).__name__}")
    finally:
        ch.close()
