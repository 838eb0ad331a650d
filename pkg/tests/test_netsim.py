import pytest

from cxrelay.netsim import (
    EventLog,
    LinkProfile,
    Scenario,
    ScenarioError,
    SimClock,
    SimTransport,
    parse_script,
    run_scenario,
    transfer_time,
)
from cxrelay.protocol import LinkError

DIALUP = LinkProfile(bandwidth_kbps=56.0, latency_ms=0.0)


class TestTransferTime:
    def test_paper_compressed_model_download(self):
        # 6.9 MB at 56 kbit/s: about 16 and a half minutes
        seconds = transfer_time(6_900_000, DIALUP)
        assert 15 * 60 <= seconds <= 18 * 60
        assert seconds == pytest.approx(6_900_000 * 8 / 56_000, abs=1e-6)

    def test_zero_bytes_handshake_only(self):
        profile = LinkProfile(bandwidth_kbps=56.0, latency_ms=150.0)
        assert transfer_time(0, profile) == pytest.approx(0.3)

    def test_predict_payload_few_seconds(self):
        seconds = transfer_time(17408, DIALUP)
        assert seconds == pytest.approx(2.4869, abs=1e-3)
        assert seconds < 5.0

    def test_outage_pauses_transfer(self):
        profile = LinkProfile(bandwidth_kbps=56.0, latency_ms=0.0,
                              outages=((1.0, 11.0),))
        # one second of activity fits before the outage, the rest after
        seconds = transfer_time(17408, profile, start=0.0)
        assert seconds == pytest.approx(2.4869 + 10.0, abs=1e-3)

    def test_throughput_never_exceeds_bandwidth(self):
        # delivered bytes over elapsed time stays within the cap for
        # any window of at least one second
        for n_bytes in (7_000, 70_000, 700_000):
            seconds = transfer_time(n_bytes, DIALUP)
            assert n_bytes * 8 / seconds <= 56_000 * 1.0001


class TestLinkProfile:
    def test_rejects_overlapping_outages(self):
        with pytest.raises(ScenarioError):
            LinkProfile(outages=((0.0, 5.0), (3.0, 8.0)))

    def test_down_query(self):
        profile = LinkProfile(outages=((10.0, 20.0),))
        assert not profile.down(9.9)
        assert profile.down(10.0)
        assert profile.down(19.9)
        assert not profile.down(20.0)


class TestSimTransport:
    def echo_handler(self, request):
        return request

    def test_advances_clock_and_counts_bytes(self):
        clock = SimClock()
        transport = SimTransport(self.echo_handler, DIALUP, clock)
        out = transport.exchange(b"x" * 7000)
        assert out == b"x" * 7000
        assert clock.now == pytest.approx(2 * 7000 * 8 / 56_000)
        assert transport.counters.bytes_up == 7000
        assert transport.counters.bytes_down == 7000

    def test_timeout_during_outage(self):
        clock = SimClock(now=5.0)
        profile = LinkProfile(bandwidth_kbps=56.0, latency_ms=0.0,
                              outages=((0.0, 1e9),))
        transport = SimTransport(self.echo_handler, profile, clock,
                                 timeout_s=10.0)
        with pytest.raises(LinkError):
            transport.exchange(b"ping")
        assert clock.now == pytest.approx(15.0)
        assert transport.counters.bytes_up == 0   # nothing delivered

    def test_byte_conservation_on_failure(self):
        calls = []

        def handler(request):
            calls.append(request)
            return b"r" * 10

        profile = LinkProfile(bandwidth_kbps=56.0, latency_ms=0.0,
                              outages=((0.0, 30.0),))
        transport = SimTransport(handler, profile, SimClock(), timeout_s=5.0)
        with pytest.raises(LinkError):
            transport.exchange(b"q" * 10)
        assert calls == []                         # server never saw it
        assert transport.counters.exchanges == 0


class TestScenarioScript:
    def test_parse_and_order(self):
        script = """
        # comment
        outage 100 500
        t=50 provision
        t=240 scan s3 bright
        t=120 scan s1 dark
        """
        scenario = parse_script(script)
        assert scenario.outages == ((100.0, 500.0),)
        assert [a.t for a in scenario.actions] == [50.0, 120.0, 240.0]
        assert scenario.actions[1].args == ("s1", "dark")

    def test_malformed_rejected(self):
        with pytest.raises(ScenarioError):
            parse_script("q=12 scan s1")
        with pytest.raises(ScenarioError):
            parse_script("t=abc scan s1")
        with pytest.raises(ScenarioError):
            parse_script("outage 5")

    def test_dispatch_deterministic(self):
        log = EventLog()
        clock = SimClock()
        seen = []

        def scan(name):
            seen.append((clock.now, name))
            log.log(clock.now, "scan", id=name)
            clock.advance(3.0)

        scenario = parse_script("t=10 scan a\nt=11 scan b\nt=30 scan c\n")
        run_scenario(scenario, {"scan": scan}, clock, log)
        # second action starts late because the first overran its slot
        assert seen == [(10.0, "a"), (13.0, "b"), (30.0, "c")]
        assert log.lines == [
            "t=10.000 scan id=a",
            "t=13.000 scan id=b",
            "t=30.000 scan id=c",
        ]

    def test_unknown_action_rejected(self):
        with pytest.raises(ScenarioError):
            run_scenario(Scenario((parse_script("t=1 zap").actions), ()),
                         {}, SimClock(), EventLog())
