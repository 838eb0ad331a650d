"""End-to-end scripted simulation: one server core and one edge client
joined by a simulated dial-up link.

Script actions (see :mod:`cxrelay.netsim` for the line format)::

    outage <start> <end>          link down over [start, end)
    t=<s> provision               first-time model download
    t=<s> scan <id> <bright|dark> scan arrival at the workstation
    t=<s> confirm <id> <yes|no>   reviewer marks a previous scan
    t=<s> sync                    cache flush + update check
    t=<s> publish <seed>          server publishes a fresh model build

Everything is deterministic: scan pixels derive from the id, times come
from the virtual clock, and the event log is fit for golden-file tests.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

from .client import EdgeClient
from .imaging import PreprocessConfig
from .netsim import EventLog, LinkProfile, Scenario, SimClock, SimTransport, parse_script, run_scenario
from .nn import build_artifact, reference_architecture
from .nn.model import compact_architecture
from .server import ServerCore
from .synthetic import make_disc_image


class SimWorld:
    """Holds the simulated deployment and drives a scenario against it."""

    def __init__(self, workdir, profile: LinkProfile | None = None,
                 arch: str = "compact", seed: int = 0, input_side: int = 128,
                 timeout_s: float = 10.0):
        self.workdir = str(workdir)
        self.clock = SimClock()
        self.log = EventLog()
        self.arch = arch
        self.seed = seed
        self.input_side = input_side
        self.profile = profile or LinkProfile()
        self.server = ServerCore(os.path.join(self.workdir, "server"),
                                 arch=arch, seed=seed, input_side=input_side)
        self.transport = SimTransport(self.server.handle_frame, self.profile,
                                      self.clock, log=self.log,
                                      timeout_s=timeout_s)
        self.client = EdgeClient(os.path.join(self.workdir, "client"),
                                 self.transport,
                                 preprocess_cfg=PreprocessConfig(
                                     gamma=2.8, target_side=input_side),
                                 clock=self.clock, log=self.log)

    def _image_for(self, scan_id: str, shade: str):
        label = 1 if shade == "bright" else 0
        rng = np.random.default_rng(zlib.crc32(scan_id.encode()))
        # oversized raw scan; the client preprocesses it down to input_side
        return make_disc_image(label, rng, side=self.input_side * 2)

    def handlers(self) -> dict:
        def provision():
            self.log.log(self.clock.now, "action", name="provision")
            self.client.provision()

        def scan(scan_id, shade="bright"):
            self.log.log(self.clock.now, "action", name="scan", id=scan_id)
            self.client.handle_scan(self._image_for(scan_id, shade),
                                    scan_id=scan_id)

        def confirm(scan_id, answer="yes"):
            self.log.log(self.clock.now, "action", name="confirm", id=scan_id)
            self.client.record_confirmation(scan_id, answer == "yes")

        def sync():
            self.log.log(self.clock.now, "action", name="sync")
            self.client.sync_cycle()

        def publish(seed="1"):
            self.log.log(self.clock.now, "action", name="publish")
            layers = (reference_architecture() if self.arch == "reference"
                      else compact_architecture())
            artifact = build_artifact(
                layers, input_shape=(self.input_side, self.input_side, 1),
                seed=int(seed))
            entry = self.server.publish_artifact(artifact)
            self.log.log(self.clock.now, "published", version=entry.version,
                         digest=entry.restored_digest[:12])

        return {"provision": provision, "scan": scan, "confirm": confirm,
                "sync": sync, "publish": publish}

    def run(self, scenario: Scenario | str) -> EventLog:
        if isinstance(scenario, str):
            scenario = parse_script(scenario)
        if scenario.outages:
            profile = LinkProfile(self.profile.bandwidth_kbps,
                                  self.profile.latency_ms, scenario.outages)
            self.profile = profile
            self.transport.profile = profile
        return run_scenario(scenario, self.handlers(), self.clock, self.log)

    def ledger_matches_link(self) -> bool:
        totals = self.client.ledger.totals()
        return (totals["bytes_up"] == self.transport.counters.bytes_up
                and totals["bytes_down"] == self.transport.counters.bytes_down)
