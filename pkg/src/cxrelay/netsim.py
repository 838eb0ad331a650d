"""Deterministic virtual-time link simulation.

No wall-clock throttling: a :class:`SimClock` carries virtual seconds and
every transfer advances it analytically. Transfers move bytes only outside
the profile's outage windows; a transfer that cannot finish before its
timeout raises :class:`cxrelay.protocol.LinkError` after consuming exactly
the timeout. Interactive exchanges therefore observe dial-up pacing, while
tests stay fast and bit-reproducible.

Scenario scripts are plain text, one action per line::

    t=<seconds> <action> [args...]

Lines may also declare ``outage <start> <end>`` windows. Actions are
dispatched, in time order, to handler callables supplied by the caller.
"""

from __future__ import annotations

from dataclasses import dataclass

from .protocol import LinkError, Transport


class ScenarioError(Exception):
    pass


@dataclass(frozen=True)
class LinkProfile:
    bandwidth_kbps: float = 56.0        # kilobits per second
    latency_ms: float = 10.0            # one-way
    outages: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.bandwidth_kbps <= 0:
            raise ScenarioError("bandwidth must be > 0")
        last_end = -1.0
        for start, end in self.outages:
            if start >= end:
                raise ScenarioError(f"empty outage ({start}, {end})")
            if start < last_end:
                raise ScenarioError("outages must be ordered and disjoint")
            last_end = end

    def down(self, t: float) -> bool:
        return any(start <= t < end for start, end in self.outages)


def _advance_through_outages(t: float, active_needed: float,
                             outages) -> float:
    """Earliest completion time for ``active_needed`` seconds of link
    activity starting at ``t``, pausing inside outage windows."""
    for start, end in outages:
        if end <= t:
            continue
        if t < start:
            usable = start - t
            if usable >= active_needed:
                return t + active_needed
            active_needed -= usable
        t = max(t, end)
    return t + active_needed


def transfer_time(n_bytes: int, profile: LinkProfile,
                  start: float = 0.0) -> float:
    """Seconds to move ``n_bytes`` one round trip: payload serialization at
    the profile bandwidth plus two one-way latencies, paused during outages."""
    if n_bytes < 0:
        raise ScenarioError("byte count must be >= 0")
    active = n_bytes * 8.0 / (profile.bandwidth_kbps * 1000.0)
    active += 2.0 * profile.latency_ms / 1000.0
    return _advance_through_outages(start, active, profile.outages) - start


@dataclass
class SimClock:
    now: float = 0.0

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ScenarioError("time cannot move backwards")
        self.now += dt

    def advance_to(self, t: float) -> None:
        if t > self.now:
            self.now = t


class EventLog:
    """Line-oriented deterministic log for golden-file comparison."""

    def __init__(self):
        self.lines: list[str] = []

    def log(self, t: float, event: str, **fields) -> None:
        parts = [f"t={t:.3f}", event]
        parts.extend(f"{k}={v}" for k, v in fields.items())
        self.lines.append(" ".join(parts))

    def text(self) -> str:
        return "\n".join(self.lines) + ("\n" if self.lines else "")


@dataclass
class LinkCounters:
    bytes_up: int = 0
    bytes_down: int = 0
    exchanges: int = 0


class SimTransport(Transport):
    """Request/response exchange over a simulated link.

    The request serializes up-link, the handler runs instantly at the
    server, and the response serializes down-link. Bytes count only for
    completed exchanges; an exchange that cannot finish inside
    ``timeout_s`` consumes the timeout and raises LinkError.
    """

    def __init__(self, handler, profile: LinkProfile, clock: SimClock,
                 log: EventLog | None = None, timeout_s: float = 10.0):
        self.handler = handler
        self.profile = profile
        self.clock = clock
        self.log = log
        self.timeout_s = timeout_s
        self.counters = LinkCounters()

    def _one_way_seconds(self, n_bytes: int) -> float:
        return (n_bytes * 8.0 / (self.profile.bandwidth_kbps * 1000.0)
                + self.profile.latency_ms / 1000.0)

    def exchange(self, request: bytes) -> bytes:
        start = self.clock.now
        up = self._one_way_seconds(len(request))
        arrive = _advance_through_outages(start, up, self.profile.outages)
        if arrive - start > self.timeout_s:
            self.clock.advance(self.timeout_s)
            if self.log:
                self.log.log(self.clock.now, "timeout", bytes=len(request))
            raise LinkError("request timed out")
        response = self.handler(request)
        down = self._one_way_seconds(len(response))
        done = _advance_through_outages(arrive, down, self.profile.outages)
        if done - start > self.timeout_s:
            self.clock.advance(self.timeout_s)
            if self.log:
                self.log.log(self.clock.now, "timeout", bytes=len(request))
            raise LinkError("response timed out")
        self.clock.advance_to(done)
        self.counters.bytes_up += len(request)
        self.counters.bytes_down += len(response)
        self.counters.exchanges += 1
        return response


# --- scenario scripts --------------------------------------------------------

@dataclass(frozen=True)
class ScenarioAction:
    t: float
    action: str
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class Scenario:
    actions: tuple[ScenarioAction, ...]
    outages: tuple[tuple[float, float], ...]


def parse_script(text: str) -> Scenario:
    actions = []
    outages = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0] == "outage":
            if len(parts) != 3:
                raise ScenarioError(f"line {lineno}: outage needs start and end")
            outages.append((float(parts[1]), float(parts[2])))
            continue
        if not parts[0].startswith("t="):
            raise ScenarioError(f"line {lineno}: expected 't=<seconds>'")
        try:
            t = float(parts[0][2:])
        except ValueError:
            raise ScenarioError(f"line {lineno}: bad timestamp {parts[0]!r}")
        if len(parts) < 2:
            raise ScenarioError(f"line {lineno}: missing action")
        actions.append(ScenarioAction(t, parts[1], tuple(parts[2:])))
    actions.sort(key=lambda a: a.t)
    outages.sort()
    return Scenario(tuple(actions), tuple(outages))


def run_scenario(scenario: Scenario, handlers: dict, clock: SimClock,
                 log: EventLog) -> EventLog:
    """Dispatch script actions in time order against handler callables.

    Each handler receives the action's argument tuple; the clock jumps to
    the action's scheduled time first unless earlier work overran it.
    """
    for action in scenario.actions:
        if action.action not in handlers:
            raise ScenarioError(f"no handler for action {action.action!r}")
        clock.advance_to(action.t)
        handlers[action.action](*action.args)
    return log
