from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from driftmark.config import EngineConfig, config_from_dict
from driftmark.errors import (
    InvalidParameters,
    LengthMismatch,
    LiveSourceNotResumable,
    NoCheckpoint,
)
from driftmark.evalloop import (
    EvalEngine,
    RunManifest,
    RunPaths,
    file_sha256,
    resume_run,
    significance_test,
    token_budget_sweep,
    verify_run,
)
from driftmark.market_data import generate_synthetic, save_feed, save_outcomes
from driftmark.reporting import iter_events


def make_engine(root, seed=42, agents=("market_copier", "momentum"), markets=40, cycles=5, run_id=None, mode="execution"):
    return EvalEngine.create(
        root,
        seed=seed,
        agent_ids=list(agents),
        feed_source={"kind": "synthetic", "n_markets": markets},
        cycles=cycles,
        run_id=run_id,
        mode=mode,
    )


class TestRunBasics:
    def test_counts_and_artifacts(self, tmp_path):
        result = make_engine(tmp_path, cycles=5).run()
        assert result.cycles_run == 5
        paths = RunPaths(tmp_path, result.run_id)
        assert paths.manifest.exists()
        assert paths.events.exists()
        assert paths.events_sha.exists()
        events = list(iter_events(paths.events))
        cycle_starts = [e for e in events if e["kind"] == "cycle_start"]
        assert len(cycle_starts) == 5
        # one record per (cycle, agent): batches
        batches = [e for e in events if e["kind"] == "batch"]
        assert len(batches) == 10

    def test_manifest_written_before_cycles_and_immutable(self, tmp_path):
        engine = make_engine(tmp_path, cycles=3, run_id="mani")
        result = engine.run()
        manifest = RunManifest.from_json(
            (tmp_path / "mani" / "manifest.json").read_text(encoding="utf-8")
        )
        assert manifest.run_id == "mani"
        assert manifest.cycles == 3
        assert manifest.seed == 42
        rebuilt = config_from_dict(manifest.metric_config)
        assert rebuilt == EngineConfig()

    def test_too_few_markets_rejected(self, tmp_path):
        with pytest.raises(InvalidParameters):
            make_engine(tmp_path, markets=10).run()

    def test_forecast_events_per_agent_market_cycle(self, tmp_path):
        result = make_engine(tmp_path, agents=("market_copier",), markets=31, cycles=4).run()
        events = list(iter_events(result.events_path))
        forecasts = [e for e in events if e["kind"] == "forecast"]
        assert len(forecasts) == 31 * 4

    def test_baselines_follow_agent_schedule(self, tmp_path):
        result = make_engine(tmp_path, agents=("market_copier",), markets=31, cycles=3).run()
        events = list(iter_events(result.events_path))
        baselines = [e for e in events if e["kind"] == "baseline"]
        # four baseline kinds per market per cycle
        assert len(baselines) == 4 * 31 * 3
        agent_times = {(e["cycle"], e["sampled_at"]) for e in events if e["kind"] == "forecast"}
        baseline_times = {(e["cycle"], e["as_of"]) for e in baselines}
        assert baseline_times == agent_times

    def test_drift_starts_at_cycle_two(self, tmp_path):
        result = make_engine(tmp_path, agents=("momentum",), markets=31, cycles=4).run()
        drift = [
            e
            for e in iter_events(result.events_path)
            if e["kind"] == "drift" and e["agent_id"] == "momentum"
        ]
        assert sorted(e["cycle"] for e in drift) == [2, 3, 4]

    def test_observation_mode_trades_nothing(self, tmp_path):
        result = make_engine(tmp_path, cycles=3, mode="observation").run()
        ledger = [e for e in iter_events(result.events_path) if e["kind"] == "ledger"]
        # resolution settlements are also skipped: no positions ever open
        assert ledger == []

    def test_flaky_agent_degrades_not_aborts(self, tmp_path):
        result = make_engine(tmp_path, agents=("flaky", "market_copier"), cycles=4, run_id="fl").run()
        events = list(iter_events(result.events_path))
        failures = [e for e in events if e["kind"] == "agent_failure"]
        assert failures  # cycle 3 fails (3 % 3 == 0)
        assert all(e["agent_id"] == "flaky" for e in failures)
        batches = [e for e in events if e["kind"] == "batch" and e["agent_id"] == "flaky"]
        # one batch or one failure per cycle
        assert len(batches) + len(failures) == 4
        assert any(e["kind"] == "run_completed" for e in events)


class TestDeterminism:
    def test_same_manifest_same_bytes(self, tmp_path):
        r1 = make_engine(tmp_path / "a", cycles=6, run_id="same").run()
        r2 = make_engine(tmp_path / "b", cycles=6, run_id="same").run()
        assert r1.event_log_sha256 == r2.event_log_sha256
        assert (tmp_path / "a/same/events.jsonl").read_bytes() == (
            tmp_path / "b/same/events.jsonl"
        ).read_bytes()

    def test_different_seed_changes_log(self, tmp_path):
        r1 = make_engine(tmp_path / "a", seed=1, run_id="x").run()
        r2 = make_engine(tmp_path / "b", seed=2, run_id="x").run()
        assert r1.event_log_sha256 != r2.event_log_sha256

    def test_copier_null_invariants(self, tmp_path):
        result = make_engine(
            tmp_path, agents=("market_copier",), markets=40, cycles=6, run_id="null"
        ).run()
        for ev in iter_events(result.events_path):
            if ev["kind"] == "drift" and ev["agent_id"] == "market_copier":
                assert abs(ev["market_divergence"]) <= 1e-12
                assert abs(ev["d_temporal_difference"]) <= 1e-12
        copier = result.final_reports["market_copier"]
        market = result.final_reports["baseline:market"]
        assert abs(copier["score"]["brier"] - market["score"]["brier"]) <= 1e-12


class TestCheckpointResume:
    def test_resume_matches_uninterrupted(self, tmp_path):
        full = make_engine(tmp_path, cycles=6, run_id="ck").run()
        # resume from an intermediate checkpoint: recompute cycles 4-6
        resumed = resume_run(tmp_path, "ck", at_cycle=3)
        assert resumed.event_log_sha256 == full.event_log_sha256

    def test_resume_every_boundary(self, tmp_path):
        full = make_engine(tmp_path, cycles=5, run_id="all").run()
        for cycle in range(1, 5):
            resumed = resume_run(tmp_path, "all", at_cycle=cycle)
            assert resumed.event_log_sha256 == full.event_log_sha256, f"cycle {cycle}"

    def test_missing_checkpoint(self, tmp_path):
        make_engine(tmp_path, cycles=3, run_id="nock").run()
        with pytest.raises(NoCheckpoint):
            resume_run(tmp_path, "nock", at_cycle=99)
        with pytest.raises(NoCheckpoint):
            resume_run(tmp_path, "never-ran")

    def test_live_not_resumable(self, tmp_path):
        engine = make_engine(tmp_path, cycles=3, run_id="liveck")
        engine.run()
        manifest_path = tmp_path / "liveck" / "manifest.json"
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
        data["feed_source"] = {"kind": "live", "endpoint": "http://x", "condition_ids": []}
        manifest_path.write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(LiveSourceNotResumable):
            resume_run(tmp_path, "liveck")


class TestReplaySource:
    def test_replay_feed_run(self, tmp_path):
        feed = generate_synthetic(9, 35, 4)
        feed_path = tmp_path / "feed.jsonl"
        outcome_path = tmp_path / "outcomes.jsonl"
        save_feed(feed.snapshots, feed_path)
        save_outcomes(feed.outcomes, outcome_path)
        engine = EvalEngine.create(
            tmp_path,
            seed=9,
            agent_ids=["market_copier"],
            feed_source={
                "kind": "replay",
                "feed": str(feed_path),
                "outcomes": str(outcome_path),
            },
            cycles=4,
            run_id="replayed",
        )
        result = engine.run()
        assert result.cycles_run == 4
        resolutions = [
            e for e in iter_events(result.events_path) if e["kind"] == "resolution"
        ]
        assert len(resolutions) == 35

    def test_replay_equals_synthetic_run(self, tmp_path):
        # the same markets through the replay path give the same forecasts
        feed = generate_synthetic(3, 32, 3)
        feed_path = tmp_path / "feed.jsonl"
        save_feed(feed.snapshots, feed_path)
        r_syn = EvalEngine.create(
            tmp_path / "s",
            seed=3,
            agent_ids=["market_copier"],
            feed_source={"kind": "synthetic", "n_markets": 32},
            cycles=3,
            run_id="twin",
        ).run()
        r_rep = EvalEngine.create(
            tmp_path / "r",
            seed=3,
            agent_ids=["market_copier"],
            feed_source={"kind": "replay", "feed": str(feed_path)},
            cycles=3,
            run_id="twin2",
        ).run()
        syn_probs = [
            (e["cycle"], e["condition_id"], e["probability"])
            for e in iter_events(r_syn.events_path)
            if e["kind"] == "forecast"
        ]
        rep_probs = [
            (e["cycle"], e["condition_id"], e["probability"])
            for e in iter_events(r_rep.events_path)
            if e["kind"] == "forecast"
        ]
        assert syn_probs == rep_probs


class TestLiveSource:
    def test_live_run_via_local_endpoint(self, tmp_path):
        import threading
        from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
        from urllib.parse import parse_qs, urlparse

        cids = [f"0x{i:040x}" for i in range(31)]

        class Handler(BaseHTTPRequestHandler):
            def do_GET(self):
                cid = parse_qs(urlparse(self.path).query)["condition_id"][0]
                idx = cids.index(cid)
                yes = 0.3 + 0.01 * idx
                body = json.dumps(
                    {
                        "condition_id": cid,
                        "question": f"Will the market index {idx:05d} close higher this period?",
                        "yes_price": yes,
                        "no_price": round(1 - yes, 10),
                        "liquidity_tier": "medium",
                        "end_time": "2030-01-01T00:00:00Z",
                    }
                ).encode()
                self.send_response(200)
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        from driftmark.config import LoopConfig, MarketConfig

        server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            engine = EvalEngine.create(
                tmp_path,
                seed=1,
                agent_ids=["market_copier"],
                feed_source={
                    "kind": "live",
                    "endpoint": f"http://127.0.0.1:{server.server_address[1]}/price",
                    "condition_ids": cids,
                },
                cycles=2,
                run_id="live",
                config=EngineConfig(
                    loop=LoopConfig(cycle_interval_sec=0),
                    market=MarketConfig(rate_limit_per_sec=10_000.0),
                ),
            )
            result = engine.run()
        finally:
            server.shutdown()
        forecasts = [e for e in iter_events(result.events_path) if e["kind"] == "forecast"]
        assert len(forecasts) == 31 * 2
        # live runs cannot be resumed
        with pytest.raises(LiveSourceNotResumable):
            resume_run(tmp_path, "live")


class TestVerify:
    def test_clean_run_verifies(self, tmp_path):
        make_engine(tmp_path, cycles=3, run_id="v").run()
        report = verify_run(tmp_path, "v")
        assert report.ok and report.events_ok

    def test_event_log_tampering_detected(self, tmp_path):
        make_engine(tmp_path, cycles=3, run_id="t").run()
        events_path = tmp_path / "t" / "events.jsonl"
        data = bytearray(events_path.read_bytes())
        data[len(data) // 2] ^= 0x01
        events_path.write_bytes(bytes(data))
        report = verify_run(tmp_path, "t")
        assert not report.ok and not report.events_ok

    def test_contract_tampering_detected(self, tmp_path):
        make_engine(tmp_path, cycles=3, run_id="c").run()
        contract_file = next((tmp_path / "c" / "contracts").glob("*.contract.json"))
        raw = bytearray(contract_file.read_bytes())
        raw[40] ^= 0x02
        contract_file.write_bytes(bytes(raw))
        report = verify_run(tmp_path, "c")
        assert not report.ok
        assert not all(report.contracts.values())


class TestSignificance:
    def test_identical_scores_p_near_one(self):
        scores = list(np.linspace(0.1, 0.4, 50))
        assert significance_test(scores, scores, seed=1) > 0.9

    def test_separated_scores_tiny_p(self):
        a = [0.0] * 100
        b = [0.25] * 100
        assert significance_test(a, b, seed=1) < 0.001

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            significance_test([0.1] * 10, [0.1] * 9)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        a = list(rng.uniform(0, 1, 40))
        b = list(rng.uniform(0, 1, 40))
        assert significance_test(a, b, seed=5) == significance_test(a, b, seed=5)

    def test_moderate_difference_detected(self):
        rng = np.random.default_rng(8)
        base = rng.uniform(0.1, 0.3, 200)
        a = list(base)
        b = list(base + 0.05)
        assert significance_test(a, b, seed=2) < 0.01


class TestTokenBudgetSweep:
    def test_noise_agent_strictly_decreasing(self, tmp_path):
        report = token_budget_sweep(
            tmp_path,
            seed=11,
            agent_ids=["budget_noise", "market_copier"],
            feed_source={"kind": "synthetic", "n_markets": 35},
            cycles=5,
            mode="observation",
        )
        noise_rows = sorted(
            (r for r in report.rows if r.agent_id == "budget_noise"), key=lambda r: r.budget
        )
        dprobs = [r.mean_abs_dprob for r in noise_rows]
        assert all(a > b for a, b in zip(dprobs, dprobs[1:]))
        d_temporals = [r.mean_d_temporal for r in noise_rows]
        assert all(a > b for a, b in zip(d_temporals, d_temporals[1:]))

    def test_insensitive_agent_identical(self, tmp_path):
        report = token_budget_sweep(
            tmp_path,
            seed=11,
            agent_ids=["market_copier"],
            feed_source={"kind": "synthetic", "n_markets": 35},
            cycles=4,
            mode="observation",
            budgets=(500, 2000),
        )
        for row in report.rows:
            assert row.max_prob_gap_vs_first_budget == 0.0

    def test_trace_truncated_to_budget(self, tmp_path):
        report = token_budget_sweep(
            tmp_path,
            seed=11,
            agent_ids=["market_copier"],
            feed_source={"kind": "synthetic", "n_markets": 35},
            cycles=3,
            mode="observation",
            budgets=(500,),
            run_id_prefix="tb",
        )
        events_path = Path(tmp_path) / report.run_ids[0] / "events.jsonl"
        for ev in iter_events(events_path):
            if ev["kind"] == "forecast":
                assert ev["output_tokens"] <= 500


class TestFallbackBatch:
    def test_rejected_batch_defaults_to_holds(self, tmp_path):
        # shrink the batch size so agent batches (size 30) get rejected
        from driftmark.config import AgentConfig

        config = EngineConfig(agents=AgentConfig(batch_size=30))
        engine = make_engine(tmp_path, agents=("market_copier",), cycles=2, run_id="fb")
        result = engine.run()
        batches = [e for e in iter_events(result.events_path) if e["kind"] == "batch"]
        assert all(b["accepted"] for b in batches)
