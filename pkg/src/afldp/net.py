"""Networked mode: the cloud behind an asyncio socket server, edges as clients.

Connection handlers only parse frames and enqueue gradients; a single
consumer task owns the :class:`~afldp.engine.Cloud` and applies them in
arrival order.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import wire
from .config import RunConfig, resolve_problem
from .engine import PRIVATE, Cloud, Edge, EngineError, edge_rng
from .record import RunRecord

log = logging.getLogger(__name__)

EXIT_HALTED = 0
EXIT_UNREACHABLE = 1
EXIT_LOST = 2


@dataclass(frozen=True)
class InjectedDelay:
    """Per-step sleep before computing a gradient, in milliseconds."""

    low_ms: float = 0.0
    high_ms: float = 0.0

    @classmethod
    def parse(cls, text: str) -> "InjectedDelay":
        """``"20"`` for a fixed delay, ``"5:50"`` for uniform on [5, 50]."""
        parts = [float(p) for p in str(text).split(":")]
        if len(parts) == 1:
            parts *= 2
        if len(parts) != 2 or min(parts) < 0 or parts[0] > parts[1]:
            raise ValueError(f"bad delay {text!r}; use MS or LOW:HIGH")
        return cls(*parts)

    def draw(self, rng: np.random.Generator) -> float:
        if self.high_ms <= 0:
            return 0.0
        if self.low_ms == self.high_ms:
            return self.low_ms / 1000.0
        return float(rng.uniform(self.low_ms, self.high_ms)) / 1000.0


class CloudServer:
    """Serves one run of ``cfg``.  Waits for ``cfg.edges`` registrations
    (one for CSGD), then applies exactly ``cfg.T`` gradients unless every
    edge has gone away first."""

    def __init__(self, cfg: RunConfig, host: str = "127.0.0.1", port: int = 0,
                 register_timeout: float = 60.0, max_frame: int = wire.DEFAULT_MAX_FRAME):
        cfg.validate()
        self.cfg = cfg
        self.host = host
        self.port = port
        self.register_timeout = register_timeout
        self.max_frame = max_frame
        problem = resolve_problem(cfg)
        self.expected = problem.K
        self.cloud = Cloud(cfg, problem.spec, problem.train, problem.test, problem.x1,
                           problem.consts, strict_staleness=False)
        self.writers = {}
        self.queue: asyncio.Queue = asyncio.Queue()
        self.arrivals = []
        self.disconnects = []
        self.rejected = 0
        self._all_registered = asyncio.Event()
        self._server = None
        self._started_at = None

    async def start(self) -> int:
        self._server = await asyncio.start_server(self._handle, self.host, self.port)
        self.port = self._server.sockets[0].getsockname()[1]
        self._started_at = time.perf_counter()
        return self.port

    async def _send(self, edge_id, msg):
        w = self.writers.get(edge_id)
        if w is None:
            return
        try:
            w.write(wire.encode(msg))
            await w.drain()
        except (ConnectionError, RuntimeError) as exc:
            log.info("edge %d unreachable on send: %s", edge_id, exc)
            self._drop(edge_id, "send failed")

    def _drop(self, edge_id, reason):
        w = self.writers.pop(edge_id, None)
        if w is not None:
            self.disconnects.append({"edge_id": edge_id, "t": self.cloud.t, "reason": reason})
            w.close()
            self.queue.put_nowait(None)  # wake the consumer to re-check liveness

    async def _handle(self, reader, writer):
        peer = writer.get_extra_info("peername")
        edge_id = None
        try:
            first = await wire.read_message(reader, self.max_frame)
            if not isinstance(first, wire.Register):
                raise wire.WireError(f"expected REGISTER, got {type(first).__name__}")
            if self.cloud.started or first.edge_id in self.writers:
                self.rejected += 1
                log.warning("rejecting edge %d from %s: %s", first.edge_id, peer,
                            "late join" if self.cloud.started else "duplicate id")
                writer.close()
                return
            edge_id = first.edge_id
            eps = first.epsilon if self.cfg.algorithm in PRIVATE else None
            self.cloud.register(edge_id, eps)
            self.writers[edge_id] = writer
            if len(self.writers) == self.expected:
                self._all_registered.set()
            while True:
                msg = await wire.read_message(reader, self.max_frame)
                if not isinstance(msg, wire.Gradient) or msg.edge_id != edge_id:
                    raise wire.WireError(f"unexpected {type(msg).__name__} from edge {edge_id}")
                await self.queue.put((edge_id, msg))
        except asyncio.IncompleteReadError:
            reason = "closed"
        except (wire.WireError, EngineError) as exc:
            log.warning("malformed traffic from %s (edge %s): %s", peer, edge_id, exc)
            reason = f"malformed: {exc}"
        except ConnectionError as exc:
            reason = f"connection error: {exc}"
        if edge_id is None:
            writer.close()
        elif edge_id in self.writers:
            self._drop(edge_id, reason)

    async def run(self) -> RunRecord:
        """Drive the run to completion and return its record."""
        if self._server is None:
            await self.start()
        cloud = self.cloud
        try:
            await asyncio.wait_for(self._all_registered.wait(), self.register_timeout)
        except asyncio.TimeoutError:
            if not self.writers:
                self._server.close()
                raise EngineError("no edge registered before the timeout")
            log.warning("starting with %d of %d edges", len(self.writers), self.expected)
        t, sens = cloud.start()
        x1 = wire.Model(t, _sens_out(sens), cloud.x.copy())
        for k in sorted(self.writers):
            await self._send(k, x1)
        while not cloud.done and self.writers:
            item = await self.queue.get()
            if item is None:
                continue
            edge_id, msg = item
            cloud.receive(_to_engine(msg))
            self.arrivals.append(edge_id)
            reply = cloud.apply_next()
            if not cloud.done:
                await self._send(edge_id, wire.Model(reply.t, _sens_out(reply.sensitivity),
                                                     reply.model.copy()))
        cloud.halt()
        for k in list(self.writers):
            await self._send(k, wire.Halt())
        for k in list(self.writers):
            w = self.writers.pop(k)
            w.close()
        self._server.close()
        await self._server.wait_closed()
        return cloud.record("net", {
            "arrival_trace": list(self.arrivals),
            "net": {"edges_registered": len(cloud.epsilons), "edges_expected": self.expected,
                    "disconnects": self.disconnects, "rejected": self.rejected,
                    "complete": cloud.done},
            "wall_time_s": time.perf_counter() - self._started_at,
        })


def _sens_out(sens):
    return 0.0 if sens is None else float(sens)


def _to_engine(msg: wire.Gradient):
    from .engine import GradientMessage
    return GradientMessage(int(msg.origin_iteration), int(msg.edge_id), msg.payload, msg.clip_bound)


async def serve_cloud_async(cfg: RunConfig, host="127.0.0.1", port=0, ready=None,
                            **kw) -> RunRecord:
    server = CloudServer(cfg, host, port, **kw)
    bound = await server.start()
    log.info("cloud listening on %s:%d", host, bound)
    if ready is not None:
        ready(bound)
    return await server.run()


def serve_cloud(cfg: RunConfig, host="127.0.0.1", port=0, **kw) -> RunRecord:
    return asyncio.run(serve_cloud_async(cfg, host, port, **kw))


class EdgeWorker:
    """Edge ``edge_id`` of the run described by ``cfg`` (same data shard and
    seeded randomness as in simulation)."""

    def __init__(self, cfg: RunConfig, edge_id: int, delay: InjectedDelay = InjectedDelay(),
                 problem=None):
        cfg.validate()
        problem = problem or resolve_problem(cfg)
        if not 0 <= edge_id < problem.K:
            raise EngineError(f"edge id {edge_id} outside [0, {problem.K})")
        shard = problem.train.shard(edge_id, problem.K) if problem.K > 1 else problem.train
        eps = problem.epsilons[edge_id] if cfg.algorithm in PRIVATE else None
        self.edge = Edge(edge_id, problem.spec, shard, cfg.batch, eps, cfg.delta,
                         edge_rng(cfg.seed, edge_id))
        self.delay = delay
        self.delay_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(edge_id, 1)))
        self.steps = 0

    async def run(self, host: str, port: int, retries: int = 20, backoff: float = 0.1) -> int:
        for attempt in range(retries + 1):
            try:
                reader, writer = await asyncio.open_connection(host, port)
                break
            except OSError as exc:
                if attempt == retries:
                    log.error("edge %d: cloud unreachable at %s:%d (%s)",
                              self.edge.edge_id, host, port, exc)
                    return EXIT_UNREACHABLE
                await asyncio.sleep(backoff * min(2 ** attempt, 20))
        edge = self.edge
        try:
            writer.write(wire.encode(wire.Register(edge.edge_id, edge.epsilon or 0.0)))
            await writer.drain()
            while True:
                msg = await wire.read_message(reader)
                if isinstance(msg, wire.Halt):
                    return EXIT_HALTED
                if not isinstance(msg, wire.Model):
                    raise wire.WireError(f"unexpected {type(msg).__name__} from cloud")
                pause = self.delay.draw(self.delay_rng)
                if pause:
                    await asyncio.sleep(pause)
                sens = msg.sensitivity if msg.sensitivity > 0 else None
                g = edge.step(msg.x, int(msg.t), sens)
                writer.write(wire.encode(wire.Gradient(g.origin_iteration, edge.edge_id,
                                                       g.clip_bound_used, g.payload)))
                await writer.drain()
                self.steps += 1
        except (asyncio.IncompleteReadError, ConnectionError, wire.WireError) as exc:
            log.warning("edge %d lost the cloud after %d steps: %s", edge.edge_id, self.steps, exc)
            return EXIT_LOST
        finally:
            writer.close()


def run_edge(host: str, port: int, cfg: RunConfig, edge_id: int,
             delay: InjectedDelay = InjectedDelay(), retries: int = 20) -> int:
    return asyncio.run(EdgeWorker(cfg, edge_id, delay).run(host, port, retries))


async def loopback_async(cfg: RunConfig, delays=None, timeout: Optional[float] = None):
    """Cloud plus all edges in one event loop over real loopback sockets.

    Returns ``(record, exit_codes)``.
    """
    server = CloudServer(cfg)
    port = await server.start()
    problem = resolve_problem(cfg)
    delays = delays or {}
    workers = [EdgeWorker(cfg, k, delays.get(k, InjectedDelay()), problem)
               for k in range(server.expected)]
    edge_tasks = [asyncio.create_task(w.run("127.0.0.1", port)) for w in workers]
    record = await asyncio.wait_for(server.run(), timeout)
    codes = await asyncio.wait_for(asyncio.gather(*edge_tasks), timeout)
    return record, list(codes)


def run_loopback(cfg: RunConfig, delays=None, timeout: Optional[float] = None):
    return asyncio.run(loopback_async(cfg, delays, timeout))
