"""Filtered inference over a TCP socket, with breach-triggered rotation.

Wire protocol: UTF-8 newline-delimited JSON, one request per line, one
response line per request.

Requests (dispatch on the key present):
  {"classify": [p_0, ..., p_{d-1}]}   pixel list, task input dimension
  {"breach": null}                    operator-declared breach event
  {"status": null}                    counters and latency aggregates

Responses:
  classify -> {"label": int, "flagged": bool, "delta": float|null,
               "version": int, "rotations": int}
      delta is null before the first breach (no filter yet); version and
      rotations always come from one atomic snapshot.
  breach   -> {"ok": true, "retired": int, "deployed": int, "rotations": int}
  status   -> {"deployed": int, "rotations": int, "queries": int,
               "flagged": int, "breached": int,
               "latency_ms": {"count": int, "mean": float, "max": float}}
  errors   -> {"error": "<message>"}; the connection stays open.

Classification handlers read an immutable state snapshot; a breach trains
and calibrates the replacement off to the side and swaps the snapshot in
one reference assignment, so no response ever mixes an old model with a
new filter or vice versa.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
import time
from dataclasses import dataclass

import numpy as np

from . import datagen, filtering, nnet, versioning
from .filtering import FilterState
from .nnet import TrainConfig
from .versioning import ModelVersion, VersionStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GatewaySnapshot:
    """What one query sees: a version, its filter (if any), a rotation count."""

    deployed: ModelVersion
    filter_state: FilterState | None
    rotations: int


class Gateway:
    """Service logic, transport-free (the TCP layer delegates here)."""

    def __init__(
        self,
        store: VersionStore,
        task: datagen.TaskDataset,
        config: TrainConfig,
        spread: float = datagen.DEFAULT_SPREAD,
        samples_per_label: int = datagen.DEFAULT_SAMPLES_PER_LABEL,
        latent_dim: int = datagen.LATENT_DIM,
        target_fpr: float = 0.05,
        seed: int = 0,
    ):
        if store.deployed() is None:
            raise ValueError("store has no deployed version; train one first")
        self.store = store
        self.task = task
        self.config = config
        self.spread = spread
        self.samples_per_label = samples_per_label
        self.latent_dim = latent_dim
        self.target_fpr = target_fpr
        self._rng = np.random.default_rng(seed)
        self._rotation_lock = threading.Lock()
        self._counter_lock = threading.Lock()
        self._queries = 0
        self._flagged = 0
        self._latency_count = 0
        self._latency_sum = 0.0
        self._latency_max = 0.0
        self._snapshot = self._build_snapshot(rotations=len(store.retired()))

    def _build_snapshot(self, rotations: int) -> GatewaySnapshot:
        deployed = self.store.deployed()
        retired = self.store.retired()
        state = None
        if retired:
            state = filtering.calibrate(
                deployed.model,
                [v.model for v in retired],
                self.task.val_x,
                self.target_fpr,
            )
        return GatewaySnapshot(deployed=deployed, filter_state=state, rotations=rotations)

    # -- request handlers

    def classify(self, pixels) -> dict:
        start = time.perf_counter()
        snap = self._snapshot  # one atomic read; everything below uses snap only
        x = np.asarray(pixels, dtype=float)
        if x.ndim != 1 or len(x) != self.task.input_dim:
            return {"error": f"classify expects {self.task.input_dim} values, got {x.shape}"}
        if not np.isfinite(x).all():
            return {"error": "classify input contains non-finite values"}
        if snap.filter_state is None:
            label = int(nnet.predict_batch(snap.deployed.model, x[None, :])[0])
            flagged, delta = False, None
        else:
            verdict = filtering.judge(x, snap.filter_state)
            label, flagged, delta = verdict.label, verdict.flagged, verdict.delta_max
        elapsed_ms = (time.perf_counter() - start) * 1e3
        with self._counter_lock:
            self._queries += 1
            self._flagged += int(flagged)
            self._latency_count += 1
            self._latency_sum += elapsed_ms
            self._latency_max = max(self._latency_max, elapsed_ms)
        return {
            "label": label,
            "flagged": bool(flagged),
            "delta": delta,
            "version": snap.deployed.version_id,
            "rotations": snap.rotations,
        }

    def breach(self) -> dict:
        with self._rotation_lock:
            old = self.store.deployed()
            versioning.retire_and_replace(
                self.store,
                self.task,
                self.spread,
                self.config,
                self._rng,
                samples_per_label=self.samples_per_label,
                latent_dim=self.latent_dim,
            )
            snap = self._build_snapshot(rotations=self._snapshot.rotations + 1)
            self._snapshot = snap
        logger.info("rotated after breach: %d -> %d", old.version_id, snap.deployed.version_id)
        return {
            "ok": True,
            "retired": old.version_id,
            "deployed": snap.deployed.version_id,
            "rotations": snap.rotations,
        }

    def status(self) -> dict:
        snap = self._snapshot
        with self._counter_lock:
            count = self._latency_count
            mean = self._latency_sum / count if count else 0.0
            peak = self._latency_max
            queries, flagged = self._queries, self._flagged
        return {
            "deployed": snap.deployed.version_id,
            "rotations": snap.rotations,
            "queries": queries,
            "flagged": flagged,
            "breached": len(snap.filter_state.breached) if snap.filter_state else 0,
            "latency_ms": {"count": count, "mean": mean, "max": peak},
        }

    def handle_line(self, line: str) -> dict:
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            return {"error": f"bad JSON: {exc}"}
        if not isinstance(request, dict):
            return {"error": "request must be a JSON object"}
        if "classify" in request:
            return self.classify(request["classify"])
        if "breach" in request:
            return self.breach()
        if "status" in request:
            return self.status()
        return {"error": "unknown request; expected classify, breach, or status"}


class _LineHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            line = self.rfile.readline()
            if not line:
                break
            text = line.decode("utf-8", errors="replace").strip()
            if not text:
                continue
            response = self.server.gateway.handle_line(text)  # type: ignore[attr-defined]
            self.wfile.write((json.dumps(response) + "\n").encode("utf-8"))


class GatewayServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, bind, gateway: Gateway):
        super().__init__(bind, _LineHandler)
        self.gateway = gateway


def serve(store: VersionStore, bind: tuple[str, int], task, config, **gateway_kwargs) -> GatewayServer:
    """Build a server bound to `bind`; call serve_forever() on the result.

    Loopback binding is the intended deployment; this is a lab tool.
    """
    gateway = Gateway(store, task, config, **gateway_kwargs)
    server = GatewayServer(bind, gateway)
    logger.info("gateway listening on %s:%d", *server.server_address)
    return server
