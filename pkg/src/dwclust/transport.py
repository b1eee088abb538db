"""Coordinator/host messaging: a newline-delimited JSON protocol with an
in-process backend and a TCP backend that share every byte of codec and host
logic, so a run is reproducible bit-for-bit on either.

One message per line: {"kind": ..., "round": ..., "payload": {...}}. Kinds
are HELLO, SHARD_INFO, PARAMS, SOLVE, RESULT, DONE, ERROR. Matrices travel as
row-major nested arrays; floats use the shortest representation that parses
back to the identical 64-bit value, and non-finite values are refused by the
codec. Default RESULT messages carry moment statistics only, so their size
does not depend on how many rows a host holds; per-row payloads (assignments,
costs) appear only when a SOLVE explicitly asks to collect them.

The error model is fail-stop: malformed lines, out-of-order rounds, host
errors and timeouts all raise typed exceptions and abort the run.
"""

from __future__ import annotations

import json
import socket
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .errors import HostFailureError, ProtocolError, StaleResultError, ValidationError
from .localsolver import (
    DualVariables,
    LocalSolveResult,
    ShardCache,
    SolveParams,
    evaluate_assignments,
    solve_local,
    transform_shard,
)
from .model import SeedingPlan, model_assignment_scores
from .rotation import BetaWeights, RotationSet

PROTOCOL_VERSION = 1
MESSAGE_KINDS = ("HELLO", "SHARD_INFO", "PARAMS", "SOLVE", "RESULT", "DONE", "ERROR")
DEFAULT_TIMEOUT = 60.0

# Rows per host in the SHARD_INFO sample: enough to seed initialization, small
# enough that the handshake stays a bounded one-time cost on any shard size.
SHARD_SAMPLE_LIMIT = 128


def _spread_indices(n: int, cap: int) -> np.ndarray:
    """min(n, cap) distinct indices evenly spread over range(n), always
    including the first and last row. Deterministic, so both transports see
    the same sample."""

    m = min(n, cap)
    return np.floor(np.linspace(0, n - 1, m)).astype(int)


@dataclass(frozen=True)
class Message:
    kind: str
    round_id: int
    payload: dict


def encode_message(msg: Message) -> bytes:
    """One canonical JSON line. Keys are sorted and floats refuse NaN/inf, so
    equal messages encode to equal bytes."""

    if msg.kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {msg.kind!r}")
    try:
        text = json.dumps(
            {"kind": msg.kind, "round": int(msg.round_id), "payload": msg.payload},
            allow_nan=False,
            sort_keys=True,
            separators=(",", ":"),
        )
    except ValueError as exc:
        raise ProtocolError(f"unencodable payload: {exc}") from exc
    return text.encode("utf-8") + b"\n"


def decode_message(line: bytes) -> Message:
    """Parse one line; malformed data raises ProtocolError with the byte
    offset where parsing failed."""

    try:
        obj = json.loads(line.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"message is not UTF-8 at byte {exc.start}") from exc
    except json.JSONDecodeError as exc:
        raise ProtocolError(f"malformed message at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise ProtocolError("message must be a JSON object")
    try:
        kind = obj["kind"]
        round_id = obj["round"]
        payload = obj["payload"]
    except KeyError as exc:
        raise ProtocolError(f"message missing field {exc.args[0]!r}") from exc
    if kind not in MESSAGE_KINDS:
        raise ProtocolError(f"unknown message kind {kind!r}")
    if not isinstance(round_id, int):
        raise ProtocolError("round must be an integer")
    if not isinstance(payload, dict):
        raise ProtocolError("payload must be an object")
    return Message(kind=kind, round_id=round_id, payload=payload)


def _listify(arr) -> list:
    return np.asarray(arr, dtype=np.float64).tolist()


def params_to_payload(params: SolveParams) -> dict:
    return {
        "round_id": int(params.round_id),
        "rotations": _listify(params.rotation_set.rotations),
        "rotated_variances": _listify(params.rotation_set.rotated_variances),
        "beta": _listify(params.beta.beta),
        "proportions_target": _listify(params.proportions_target),
        "lambda_mu": _listify(params.duals.lambda_mu),
        "lambda_p": _listify(params.duals.lambda_p),
        "n_total": int(params.n_total),
    }


def payload_to_params(payload: dict) -> SolveParams:
    try:
        return SolveParams(
            round_id=int(payload["round_id"]),
            rotation_set=RotationSet(
                rotations=np.asarray(payload["rotations"], dtype=np.float64),
                rotated_variances=np.asarray(payload["rotated_variances"], dtype=np.float64),
            ),
            beta=BetaWeights(beta=np.asarray(payload["beta"], dtype=np.float64)),
            proportions_target=np.asarray(payload["proportions_target"], dtype=np.float64),
            duals=DualVariables(
                lambda_mu=np.asarray(payload["lambda_mu"], dtype=np.float64),
                lambda_p=np.asarray(payload["lambda_p"], dtype=np.float64),
            ),
            n_total=int(payload["n_total"]),
        )
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise ProtocolError(f"bad PARAMS payload: {exc}") from exc


def seeding_plan_to_payload(plan: SeedingPlan) -> dict:
    return {
        "center": _listify(plan.center),
        "scale": _listify(plan.scale),
        "quad_center": _listify(plan.quad_center),
        "quad_scale": _listify(plan.quad_scale),
        "seeds": _listify(plan.seeds),
    }


def payload_to_seeding_plan(payload: dict) -> SeedingPlan:
    try:
        return SeedingPlan(
            center=np.asarray(payload["center"], dtype=np.float64),
            scale=np.asarray(payload["scale"], dtype=np.float64),
            quad_center=np.asarray(payload["quad_center"], dtype=np.float64),
            quad_scale=np.asarray(payload["quad_scale"], dtype=np.float64),
            seeds=np.asarray(payload["seeds"], dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise ProtocolError(f"bad seed_assign payload: {exc}") from exc


# Stand-in for +inf in wire payloads (the codec refuses non-finite floats);
# large enough that repairs never route mass through an inactive cluster.
INACTIVE_SCORE = 1e300


def _model_assign_scores(samples: np.ndarray, payload: dict) -> np.ndarray:
    """Per-row description-length scores for a shard from an assign_model
    package; argmin over columns gives the hard labels (ties to the lowest
    index)."""

    try:
        scores = model_assignment_scores(
            samples,
            means=np.asarray(payload["means"], dtype=np.float64),
            rotations=np.asarray(payload["rotations"], dtype=np.float64),
            beta=np.asarray(payload["beta"], dtype=np.float64),
            log_dets=np.asarray(payload["log_dets"], dtype=np.float64),
            log_props=np.asarray(payload["log_props"], dtype=np.float64),
            active=np.asarray(payload["active"], dtype=bool),
        )
    except (KeyError, TypeError, ValueError, ValidationError) as exc:
        raise ProtocolError(f"bad assign_model payload: {exc}") from exc
    return np.where(np.isfinite(scores), scores, INACTIVE_SCORE)


def result_to_payload(result: LocalSolveResult) -> dict:
    payload = {
        "f_star": float(result.f_star),
        "cluster_mass": _listify(result.cluster_mass),
        "mu_hat": _listify(result.mu_hat),
        "rotated_first_moment": _listify(result.rotated_first_moment),
        "raw_first_moment": _listify(result.raw_first_moment),
        "raw_second_moment": _listify(result.raw_second_moment),
        "local_assignments": None,
        "row_costs": None,
    }
    if result.local_assignments is not None:
        payload["local_assignments"] = _listify(result.local_assignments)
    if result.row_costs is not None:
        payload["row_costs"] = _listify(result.row_costs)
    return payload


def payload_to_result(payload: dict) -> LocalSolveResult:
    try:
        assignments = payload["local_assignments"]
        costs = payload["row_costs"]
        return LocalSolveResult(
            f_star=float(payload["f_star"]),
            cluster_mass=np.asarray(payload["cluster_mass"], dtype=np.float64),
            mu_hat=np.asarray(payload["mu_hat"], dtype=np.float64),
            rotated_first_moment=np.asarray(payload["rotated_first_moment"], dtype=np.float64),
            raw_first_moment=np.asarray(payload["raw_first_moment"], dtype=np.float64),
            raw_second_moment=np.asarray(payload["raw_second_moment"], dtype=np.float64),
            local_assignments=None if assignments is None
            else np.asarray(assignments, dtype=np.float64),
            row_costs=None if costs is None else np.asarray(costs, dtype=np.float64),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"bad RESULT payload: {exc}") from exc


class HostRuntime:
    """Protocol state machine for one host; shared verbatim by the in-process
    backend and serve_host. Holds the shard, the cache for the current
    rotations, and the warm assignments carried between rounds. Beyond the
    bounded handshake sample, raw rows never leave this object; replies carry
    statistics (plus per-row payloads only when a SOLVE collects them)."""

    def __init__(self, samples):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] == 0:
            raise ValidationError("host shard must be a non-empty 2-D matrix")
        if not np.all(np.isfinite(samples)):
            raise ValidationError("host shard contains non-finite entries")
        self._samples = samples
        self._params: SolveParams | None = None
        self._cache: ShardCache | None = None
        self._warm: np.ndarray | None = None
        self._host_id: int | None = None
        self.done = False

    def handle(self, msg: Message) -> Message | None:
        """Process one message; returns the reply, or None for one-way
        kinds. Protocol violations come back as ERROR replies so a host
        keeps serving while the coordinator decides to abort."""

        try:
            if msg.kind == "HELLO":
                if msg.payload.get("protocol") != PROTOCOL_VERSION:
                    return self._error(msg.round_id, "protocol version mismatch")
                self._host_id = int(msg.payload["host_id"])
                idx = _spread_indices(self._samples.shape[0], SHARD_SAMPLE_LIMIT)
                return Message("SHARD_INFO", msg.round_id, {
                    "shard_size": int(self._samples.shape[0]),
                    "dim": int(self._samples.shape[1]),
                    "sample_rows": _listify(self._samples[idx]),
                })
            if msg.kind == "PARAMS":
                params = payload_to_params(msg.payload)
                if params.round_id != msg.round_id:
                    return self._error(msg.round_id, "PARAMS round mismatch")
                self._params = params
                self._cache = transform_shard(self._samples, params.rotation_set)
                return None
            if msg.kind == "SOLVE":
                return self._solve(msg)
            if msg.kind == "DONE":
                self.done = True
                return None
            if msg.kind == "ERROR":
                raise ProtocolError(f"coordinator error: {msg.payload.get('message')}")
            return self._error(msg.round_id, f"unexpected kind {msg.kind}")
        except ProtocolError:
            raise
        except Exception as exc:  # solver/validation failures travel back as ERROR
            return self._error(msg.round_id, f"{type(exc).__name__}: {exc}")

    def _solve(self, msg: Message) -> Message:
        if self._params is None or self._host_id is None:
            return self._error(msg.round_id, "SOLVE before PARAMS")
        if msg.round_id != self._params.round_id:
            return self._error(msg.round_id, "SOLVE round does not match PARAMS")
        collect = bool(msg.payload.get("collect", False))
        provided = msg.payload.get("assignments")
        seed_pkg = msg.payload.get("seed_assign")
        model_pkg = msg.payload.get("assign_model")
        model_scores = None
        if seed_pkg is not None:
            # the host rebuilds the initial hard split from the broadcast
            # plan, so full assignment matrices never need to travel
            plan = payload_to_seeding_plan(seed_pkg)
            warm = np.eye(plan.n_clusters)[plan.assign(self._samples)]
        elif model_pkg is not None:
            # likewise for hard assignment against a broadcast model
            model_scores = _model_assign_scores(self._samples, model_pkg)
            warm = np.eye(model_scores.shape[1])[np.argmin(model_scores, axis=1)]
        elif provided is not None:
            warm = np.asarray(provided, dtype=np.float64)
        elif self._warm is not None:
            warm = self._warm
        else:
            return self._error(msg.round_id, "no warm assignments and none provided")

        if msg.payload.get("evaluate_only", False):
            result = evaluate_assignments(
                self._cache, self._params, self._host_id, warm, collect=collect
            )
            if model_scores is not None and collect:
                # model-split replies price rows by the model scores, so a
                # downstream mass repair moves the least-committed rows
                result = replace(result, row_costs=model_scores)
            self._warm = np.asarray(warm, dtype=np.float64)
        else:
            full = solve_local(
                self._cache, self._params, self._host_id, warm, collect=True
            )
            self._warm = full.local_assignments
            result = full if collect else LocalSolveResult(
                f_star=full.f_star,
                cluster_mass=full.cluster_mass,
                mu_hat=full.mu_hat,
                rotated_first_moment=full.rotated_first_moment,
                raw_first_moment=full.raw_first_moment,
                raw_second_moment=full.raw_second_moment,
            )
        return Message("RESULT", msg.round_id, result_to_payload(result))

    @staticmethod
    def _error(round_id: int, text: str) -> Message:
        return Message("ERROR", round_id, {"message": text})


class Transport:
    """Backend interface. post() delivers a batch of messages to one host
    without waiting; collect() blocks for that host's next reply; exchange()
    is post-then-collect. start() handshakes and returns per-host
    (shard_size, dim, sample_rows); shutdown() sends DONE everywhere."""

    n_hosts: int

    def post(self, host_id: int, outgoing: list) -> None:
        raise NotImplementedError

    def collect(self, host_id: int) -> Message:
        raise NotImplementedError

    def exchange(self, host_id: int, outgoing: list) -> Message:
        self.post(host_id, outgoing)
        reply = self.collect(host_id)
        if reply.kind == "ERROR":
            raise HostFailureError(host_id, str(reply.payload.get("message")))
        return reply

    def start(self) -> list:
        infos = []
        for k in range(self.n_hosts):
            reply = self.exchange(k, [Message("HELLO", 0, {
                "protocol": PROTOCOL_VERSION, "host_id": k,
            })])
            if reply.kind != "SHARD_INFO":
                raise HostFailureError(k, f"bad handshake reply kind {reply.kind}")
            try:
                size = int(reply.payload["shard_size"])
                dim = int(reply.payload["dim"])
                sample = np.asarray(reply.payload["sample_rows"], dtype=np.float64)
            except (KeyError, TypeError, ValueError) as exc:
                raise HostFailureError(k, f"bad SHARD_INFO payload: {exc}") from exc
            if sample.ndim != 2 or sample.shape[1] != dim:
                raise HostFailureError(k, f"sample rows have shape {sample.shape}")
            infos.append((size, dim, sample))
        return infos

    def shutdown(self) -> None:
        raise NotImplementedError


class InProcessTransport(Transport):
    """Hosts as objects in this process. Every message still passes through
    encode/decode, and replies queue exactly as socket bytes would, so the
    coordinator sees byte-for-byte what a TCP run produces."""

    def __init__(self, shards):
        if len(shards) == 0:
            raise ValidationError("need at least one shard")
        self._runtimes = [HostRuntime(s) for s in shards]
        self._pending = [deque() for _ in shards]
        self.n_hosts = len(self._runtimes)

    def post(self, host_id: int, outgoing: list) -> None:
        runtime = self._runtimes[host_id]
        for msg in outgoing:
            reply = runtime.handle(decode_message(encode_message(msg)))
            if reply is not None:
                self._pending[host_id].append(decode_message(encode_message(reply)))

    def collect(self, host_id: int) -> Message:
        if not self._pending[host_id]:
            raise HostFailureError(host_id, "no reply pending")
        return self._pending[host_id].popleft()

    def shutdown(self) -> None:
        for k in range(self.n_hosts):
            self.post(k, [Message("DONE", 0, {})])


class TcpTransport(Transport):
    """One TCP connection per host for the whole run. post() flushes writes
    so hosts compute concurrently; collect() blocks on the next line."""

    def __init__(self, addresses, timeout: float = DEFAULT_TIMEOUT):
        if len(addresses) == 0:
            raise ValidationError("need at least one host address")
        self._addresses = list(addresses)
        self._timeout = timeout
        self._socks: list = []
        self._files: list = []
        self.n_hosts = len(self._addresses)

    def start(self) -> list:
        for k, (host, port) in enumerate(self._addresses):
            try:
                sock = socket.create_connection((host, port), timeout=self._timeout)
            except OSError as exc:
                raise HostFailureError(k, f"connect to {host}:{port} failed: {exc}") from exc
            sock.settimeout(self._timeout)
            self._socks.append(sock)
            self._files.append(sock.makefile("rwb"))
        return super().start()

    def post(self, host_id: int, outgoing: list) -> None:
        f = self._files[host_id]
        try:
            for msg in outgoing:
                f.write(encode_message(msg))
            f.flush()
        except OSError as exc:
            raise HostFailureError(host_id, f"write failed: {exc}") from exc

    def collect(self, host_id: int) -> Message:
        try:
            line = self._files[host_id].readline()
        except socket.timeout as exc:
            raise HostFailureError(host_id, "timed out waiting for reply") from exc
        except OSError as exc:
            raise HostFailureError(host_id, f"read failed: {exc}") from exc
        if not line:
            raise HostFailureError(host_id, "connection closed mid-run")
        return decode_message(line)

    def shutdown(self) -> None:
        for k in range(self.n_hosts):
            try:
                self.post(k, [Message("DONE", 0, {})])
            except HostFailureError:
                pass
        for f in self._files:
            try:
                f.close()
            except OSError:
                pass
        for s in self._socks:
            try:
                s.close()
            except OSError:
                pass


def broadcast_and_collect(transport: Transport, params: SolveParams,
                          solve_payload: dict | None = None,
                          per_host_solve: list | None = None) -> list:
    """Send PARAMS + SOLVE to every host and gather one LocalSolveResult per
    host, ordered by host id. All writes go out before any reply is awaited,
    so TCP hosts work in parallel; stale or error replies abort the run."""

    round_id = params.round_id
    params_msg = Message("PARAMS", round_id, params_to_payload(params))
    payloads = per_host_solve if per_host_solve is not None else [
        dict(solve_payload or {}) for _ in range(transport.n_hosts)
    ]
    if len(payloads) != transport.n_hosts:
        raise ValidationError("need one SOLVE payload per host")
    for k in range(transport.n_hosts):
        transport.post(k, [params_msg, Message("SOLVE", round_id, payloads[k])])
    results = []
    for k in range(transport.n_hosts):
        reply = transport.collect(k)
        if reply.kind == "ERROR":
            raise HostFailureError(k, str(reply.payload.get("message")))
        if reply.kind != "RESULT":
            raise ProtocolError(f"host {k}: expected RESULT, got {reply.kind}")
        if reply.round_id != round_id:
            raise StaleResultError(
                f"host {k} answered round {reply.round_id}, expected {round_id}"
            )
        results.append(payload_to_result(reply.payload))
    return results


def serve_host(samples, bind_host: str, bind_port: int, announce=None) -> None:
    """Run one host: bind, announce "listening on HOST:PORT" (the resolved
    port, so port 0 works), accept a single coordinator connection, answer
    messages until DONE. EOF before DONE is a protocol failure."""

    runtime = HostRuntime(samples)
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((bind_host, bind_port))
        listener.listen(1)
        actual_port = listener.getsockname()[1]
        if announce is not None:
            announce(f"listening on {bind_host}:{actual_port}")
        conn, _ = listener.accept()
        with conn, conn.makefile("rwb") as stream:
            while not runtime.done:
                line = stream.readline()
                if not line:
                    raise ProtocolError("coordinator closed the connection before DONE")
                try:
                    msg = decode_message(line)
                except ProtocolError as exc:
                    stream.write(encode_message(
                        Message("ERROR", -1, {"message": str(exc)})
                    ))
                    stream.flush()
                    continue
                reply = runtime.handle(msg)
                if reply is not None:
                    stream.write(encode_message(reply))
                    stream.flush()
