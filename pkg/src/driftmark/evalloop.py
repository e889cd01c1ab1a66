"""The closed evaluation loop: lock, baseline, deploy, execute, measure.

A run is fully described by its manifest (seed, contracts, agents, feed,
cycle count, config snapshot). On replay and synthetic sources the event
log is a pure function of the manifest: all timestamps are virtual, agents
derive randomness from the seed, and reports are folds over the log.
Checkpoints at cycle boundaries allow byte-identical resumption.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import time as _time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import reporting
from .agents import (
    Action,
    CalibrationWindow,
    ClosedPosition,
    Decision,
    DecisionBatch,
    ForecastRecord,
    ScriptedAgent,
    build_agent,
    build_decision_batch,
    parse_decision_wire,
    sample_forecast,
    validate_decision_batch,
)
from .baselines import (
    BaselineKind,
    heuristic_baseline,
    historical_frequency_baseline,
    market_baseline,
    uniform_baseline,
)
from .config import EngineConfig, config_from_dict
from .contract import (
    ContractHash,
    ContractStore,
    DEFAULT_TEMPLATE,
    PromptContract,
    lock_contract,
    render_instruction,
)
from .errors import (
    AgentTimeout,
    FatalFeedError,
    InvalidParameters,
    LengthMismatch,
    LiveSourceNotResumable,
    MalformedAgentOutput,
    NoCheckpoint,
)
from .market_data import (
    EventCategory,
    MarketSnapshot,
    RateLimiter,
    categorize_event,
    fetch_snapshot,
    generate_synthetic,
    load_outcomes,
    replay_feed,
    ResolvedOutcome,
)
from .metrics import narrative_drift, price_volatility, risk_category, temporal_drift
from .simulator import (
    EntryKind,
    LedgerWriter,
    Mode,
    Portfolio,
    Trigger,
    _value_cents,
    entry_to_record,
    evaluate_triggers,
    portfolio_from_record,
    portfolio_to_record,
    resolve_market,
    step,
)
from .timeutil import to_iso, utc_now

_MASK64 = (1 << 64) - 1


# --- manifest -------------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    run_id: str
    seed: int
    contract_hashes: tuple[str, ...]
    agent_ids: tuple[str, ...]
    feed_source: dict
    cycle_interval_sec: int
    cycles: int
    metric_config: dict
    started_at: str
    mode: str = "execution"

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        data = json.loads(text)
        return cls(
            run_id=data["run_id"],
            seed=int(data["seed"]),
            contract_hashes=tuple(data["contract_hashes"]),
            agent_ids=tuple(data["agent_ids"]),
            feed_source=data["feed_source"],
            cycle_interval_sec=int(data["cycle_interval_sec"]),
            cycles=int(data["cycles"]),
            metric_config=data["metric_config"],
            started_at=data["started_at"],
            mode=data["mode"],
        )


class RunPaths:
    def __init__(self, out_root: str | Path, run_id: str):
        self.root = Path(out_root) / run_id
        self.manifest = self.root / "manifest.json"
        self.events = self.root / "events.jsonl"
        self.events_sha = self.root / "events.sha256"
        self.contracts = self.root / "contracts"
        self.ledgers = self.root / "ledgers"
        self.checkpoints = self.root / "checkpoints"
        self.reports = self.root / "reports"

    def ensure(self) -> "RunPaths":
        for p in (self.root, self.contracts, self.ledgers, self.checkpoints, self.reports):
            p.mkdir(parents=True, exist_ok=True)
        return self


def _safe_name(agent_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", agent_id)


def event_line(event: dict) -> str:
    return json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n"


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# --- engine ----------------------------------------------------------------------


@dataclass
class _AgentState:
    agent: ScriptedAgent
    portfolio: Portfolio
    window: CalibrationWindow
    prev_forecasts: dict[str, ForecastRecord] = field(default_factory=dict)
    ledger_lines: int = 0


@dataclass(frozen=True)
class RunResult:
    run_id: str
    cycles_run: int
    events_path: Path
    event_log_sha256: str
    final_reports: dict[str, dict]


class EvalEngine:
    """Executes one manifest end to end."""

    def __init__(
        self,
        manifest: RunManifest,
        config: EngineConfig,
        out_root: str | Path,
        contracts: dict[str, tuple[PromptContract, ContractHash]],
    ):
        if len(manifest.contract_hashes) != 1:
            raise InvalidParameters("exactly one contract per run")
        digest = manifest.contract_hashes[0]
        if digest not in contracts:
            raise InvalidParameters(f"contract {digest} not supplied")
        self.manifest = manifest
        self.config = config
        self.paths = RunPaths(out_root, manifest.run_id)
        self.contract, self.contract_hash = contracts[digest]
        if not self.contract.locked:
            raise InvalidParameters("contract must be locked")
        self.mode = Mode(manifest.mode)
        # Previous cycle's baseline probabilities, for baseline drift events.
        self._prev_baseline_probs_map: dict[str, dict[str, float]] | None = None

    # -- construction helpers --

    @classmethod
    def create(
        cls,
        out_root: str | Path,
        *,
        seed: int,
        agent_ids: Sequence[str],
        feed_source: dict,
        cycles: int,
        config: EngineConfig | None = None,
        contract: tuple[PromptContract, ContractHash] | None = None,
        run_id: str | None = None,
        mode: str = "execution",
        token_budget: int = 1000,
    ) -> "EvalEngine":
        config = config or EngineConfig()
        if contract is None:
            contract = lock_contract(
                DEFAULT_TEMPLATE,
                "v1",
                token_budget,
                horizon_cycles=cycles,
                allowed_budgets=tuple(config.contract.allowed_token_budgets),
                allow_any_budget=config.contract.allow_any_budget,
                algorithm_id=config.contract.hash_algorithm,
            )
        locked, chash = contract
        if run_id is None:
            run_id = f"{feed_source.get('kind', 'run')}-s{seed}-c{cycles}-{mode}"
        manifest = RunManifest(
            run_id=run_id,
            seed=int(seed) & _MASK64,
            contract_hashes=(chash.digest,),
            agent_ids=tuple(agent_ids),
            feed_source=dict(feed_source),
            cycle_interval_sec=config.loop.cycle_interval_sec,
            cycles=cycles,
            metric_config=config.to_dict(),
            started_at=to_iso(utc_now()),
            mode=mode,
        )
        return cls(manifest, config, out_root, {chash.digest: (locked, chash)})

    # -- feed loading --

    def _load_feed(self) -> tuple[list[list[MarketSnapshot]], list[ResolvedOutcome]]:
        src = self.manifest.feed_source
        kind = src.get("kind")
        if kind == "synthetic":
            feed = generate_synthetic(
                seed=self.manifest.seed,
                n_markets=int(src["n_markets"]),
                steps=self.manifest.cycles,
                interval_seconds=self.manifest.cycle_interval_sec,
            )
            return feed.cycles(), feed.outcomes
        if kind == "replay":
            try:
                snapshots = list(
                    replay_feed(src["feed"], spread_tolerance=self.config.market.spread_tolerance)
                )
            except OSError as exc:
                raise FatalFeedError(f"cannot read feed {src['feed']}: {exc}") from exc
            grouped: dict = {}
            for s in snapshots:
                grouped.setdefault(s.observed_at, []).append(s)
            cycles = [grouped[ts] for ts in sorted(grouped)][: self.manifest.cycles]
            outcomes = load_outcomes(src["outcomes"]) if src.get("outcomes") else []
            return cycles, outcomes
        if kind == "live":
            return [], []  # fetched lazily inside run()
        raise InvalidParameters(f"unknown feed source kind {kind!r}")

    def _live_cycle(self, limiter: RateLimiter) -> list[MarketSnapshot]:
        import os

        from .market_data import ENDPOINT_ENV_VAR

        src = self.manifest.feed_source
        endpoint = src.get("endpoint") or os.environ.get(ENDPOINT_ENV_VAR)
        if not endpoint:
            raise FatalFeedError(
                f"live feed needs an endpoint in the manifest or ${ENDPOINT_ENV_VAR}"
            )
        snaps = []
        for cid in src["condition_ids"]:
            snaps.append(
                fetch_snapshot(
                    endpoint,
                    cid,
                    rate_limiter=limiter,
                    spread_tolerance=self.config.market.spread_tolerance,
                    timeout=self.config.market.request_timeout_sec,
                )
            )
        return snaps

    # -- checkpointing --

    def _checkpoint_path(self, cycle: int) -> Path:
        return self.paths.checkpoints / f"cycle_{cycle:05d}.json"

    def _write_checkpoint(self, cycle: int, states: dict[str, _AgentState],
                          price_history: dict[str, list[float]], events_lines: int) -> None:
        payload = {
            "next_cycle": cycle + 1,
            "events_lines": events_lines,
            "price_history": price_history,
            "agents": {
                aid: {
                    "portfolio": portfolio_to_record(st.portfolio),
                    "window": [
                        [e.condition_id, e.side, e.pnl_cents] for e in st.window.entries
                    ],
                    "state": st.agent.get_state(),
                    "prev_forecasts": {
                        cid: {
                            "p": rec.probability,
                            "trace": rec.reasoning_trace,
                            "confidence": rec.confidence,
                        }
                        for cid, rec in st.prev_forecasts.items()
                    },
                    "ledger_lines": st.ledger_lines,
                }
                for aid, st in states.items()
            },
        }
        self._checkpoint_path(cycle).write_text(
            json.dumps(payload, sort_keys=True), encoding="utf-8"
        )

    def _latest_checkpoint(self, at_cycle: int | None = None) -> dict:
        if at_cycle is not None:
            path = self._checkpoint_path(at_cycle)
            if not path.exists():
                raise NoCheckpoint(f"no checkpoint at cycle {at_cycle}")
            return json.loads(path.read_text(encoding="utf-8"))
        candidates = sorted(self.paths.checkpoints.glob("cycle_*.json"))
        if not candidates:
            raise NoCheckpoint(f"no checkpoints under {self.paths.checkpoints}")
        return json.loads(candidates[-1].read_text(encoding="utf-8"))

    @staticmethod
    def _truncate_lines(path: Path, keep: int) -> None:
        if not path.exists():
            return
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
        with open(path, "w", encoding="utf-8") as fh:
            fh.writelines(lines[:keep])

    # -- the run --

    def run(self, resume: bool = False, resume_cycle: int | None = None) -> RunResult:
        self.paths.ensure()
        live = self.manifest.feed_source.get("kind") == "live"
        if resume and live:
            raise LiveSourceNotResumable("live feeds cannot be resumed deterministically")
        cycles_data, outcomes = self._load_feed()
        cfg = self.config
        batch_size = cfg.agents.batch_size
        if not live:
            n_markets = len(cycles_data[0]) if cycles_data else 0
            if n_markets < batch_size:
                raise InvalidParameters(
                    f"need at least {batch_size} markets per cycle, got {n_markets}"
                )
        total_cycles = min(self.manifest.cycles, len(cycles_data)) if not live else self.manifest.cycles

        # Mutable run state.
        states: dict[str, _AgentState] = {}
        price_history: dict[str, list[float]] = {}
        categories: dict[str, EventCategory] = {}
        start_cycle = 1
        events_mode = "w"

        if resume:
            ckpt = self._latest_checkpoint(resume_cycle)
            start_cycle = int(ckpt["next_cycle"])
            self._truncate_lines(self.paths.events, int(ckpt["events_lines"]))
            events_mode = "a"
            price_history = {k: list(v) for k, v in ckpt["price_history"].items()}
            for aid in self.manifest.agent_ids:
                saved = ckpt["agents"][aid]
                agent = build_agent(aid, self.manifest.seed)
                agent.set_state(saved["state"])
                window = CalibrationWindow(
                    entries=tuple(
                        ClosedPosition(cid, side, int(pnl)) for cid, side, pnl in saved["window"]
                    ),
                    size=cfg.agents.calibration_window_size,
                )
                st = _AgentState(
                    agent=agent,
                    portfolio=portfolio_from_record(saved["portfolio"]),
                    window=window,
                    ledger_lines=int(saved["ledger_lines"]),
                )
                for cid, rec in saved["prev_forecasts"].items():
                    st.prev_forecasts[cid] = _thin_record(
                        cid, aid, rec["p"], rec["trace"], int(rec["confidence"]), self.contract_hash
                    )
                states[aid] = st
                self._truncate_lines(
                    self.paths.ledgers / f"{_safe_name(aid)}.jsonl", st.ledger_lines
                )
            # Rebuild static categories deterministically from cycle 1.
            if cycles_data:
                for snap in cycles_data[0]:
                    categories[snap.condition_id] = self._categorize(snap)
            # Baseline drift at the resume boundary needs the previous
            # cycle's baseline probabilities; baselines are pure functions
            # of the snapshots, so recompute them.
            if start_cycle >= 2 and cycles_data:
                prev_snaps = cycles_data[start_cycle - 2]
                probs: dict[str, dict[str, float]] = {k.value: {} for k in BaselineKind}
                for s in prev_snaps:
                    cat = categories.get(s.condition_id) or self._categorize(s)
                    probs[BaselineKind.MARKET.value][s.condition_id] = market_baseline(
                        s, cfg.baselines.market_use_mid
                    ).probability
                    probs[BaselineKind.UNIFORM.value][s.condition_id] = 0.5
                    probs[BaselineKind.HISTORICAL.value][s.condition_id] = (
                        historical_frequency_baseline(cat, [], snapshot=s).probability
                    )
                    probs[BaselineKind.HEURISTIC.value][s.condition_id] = heuristic_baseline(
                        s,
                        cfg.baselines.heuristic_favorite_prob,
                        cfg.baselines.heuristic_longshot_prob,
                    ).probability
                self._prev_baseline_probs_map = probs
        else:
            if not self.paths.manifest.exists():
                self.paths.manifest.write_text(self.manifest.to_json(), encoding="utf-8")
            store = ContractStore(self.paths.contracts)
            store.save(self.contract, self.contract_hash)
            for aid in self.manifest.agent_ids:
                states[aid] = _AgentState(
                    agent=build_agent(aid, self.manifest.seed),
                    portfolio=Portfolio.fresh(
                        cfg.simulator.initial_capital_cents, cfg.simulator.max_open_positions
                    ),
                    window=CalibrationWindow(size=cfg.agents.calibration_window_size),
                )

        ledgers = {
            aid: LedgerWriter(self.paths.ledgers / f"{_safe_name(aid)}.jsonl")
            for aid in self.manifest.agent_ids
        }
        events = open(self.paths.events, events_mode, encoding="utf-8")
        events_lines = int(ckpt["events_lines"]) if resume else 0

        def emit(ev: dict) -> None:
            nonlocal events_lines
            events.write(event_line(ev))
            events_lines += 1

        try:
            if not resume:
                emit(
                    {
                        "kind": "run_started",
                        "run_id": self.manifest.run_id,
                        "seed": self.manifest.seed,
                        "cycles": total_cycles,
                        "mode": self.manifest.mode,
                        "agent_ids": list(self.manifest.agent_ids),
                        "contract_hashes": list(self.manifest.contract_hashes),
                        "feed_source": self.manifest.feed_source,
                        "cycle_interval_sec": self.manifest.cycle_interval_sec,
                    }
                )
                for aid in self.manifest.agent_ids:
                    emit(
                        {
                            "kind": "agent_meta",
                            "agent_id": aid,
                            "agent_count": 1,
                            "unique_users": None,
                        }
                    )

            limiter = RateLimiter(cfg.market.rate_limit_per_sec) if live else None
            resolved_so_far: list[tuple[ResolvedOutcome, EventCategory]] = []

            cycle = start_cycle
            while cycle <= total_cycles:
                if live:
                    if cycle > start_cycle and self.manifest.cycle_interval_sec > 0:
                        _time.sleep(self.manifest.cycle_interval_sec)
                    snaps = self._live_cycle(limiter)
                else:
                    snaps = cycles_data[cycle - 1]
                if not snaps:
                    raise FatalFeedError(f"cycle {cycle} produced no snapshots")
                now = snaps[0].observed_at
                snap_map = {s.condition_id: s for s in snaps}
                known = set(snap_map)

                emit({"kind": "cycle_start", "cycle": cycle, "time": to_iso(now)})
                if cycle == 1:
                    for s in snaps:
                        categories[s.condition_id] = self._categorize(s)
                        cat = categories[s.condition_id]
                        emit(
                            {
                                "kind": "market_meta",
                                "condition_id": s.condition_id,
                                "question": s.question,
                                "liquidity": s.liquidity_tier.value,
                                "risk": cat.risk.value,
                                "domain": cat.domain.value,
                                "horizon": cat.horizon.value,
                                "end_time": to_iso(s.end_time),
                            }
                        )
                elif not categories:
                    for s in snaps:
                        categories.setdefault(s.condition_id, self._categorize(s))

                for s in snaps:
                    emit(
                        {
                            "kind": "snapshot",
                            "cycle": cycle,
                            "condition_id": s.condition_id,
                            "yes_price": s.yes_price,
                            "no_price": s.no_price,
                            "observed_at": to_iso(s.observed_at),
                        }
                    )
                    price_history.setdefault(s.condition_id, []).append(s.yes_price)
                    # Volatility window only needs the recent tail.
                    if len(price_history[s.condition_id]) > cfg.metrics.volatility_window + 1:
                        price_history[s.condition_id] = price_history[s.condition_id][
                            -(cfg.metrics.volatility_window + 1):
                        ]

                risk_by_market = {
                    cid: risk_category(
                        categories.get(cid, self._categorize(snap_map[cid])),
                        price_volatility(price_history.get(cid, []), cfg.metrics.volatility_window),
                        cfg.metrics.volatility_threshold,
                    )
                    for cid in snap_map
                }

                for aid in self.manifest.agent_ids:
                    st = states[aid]
                    budget = self.contract.token_budget
                    records: dict[str, ForecastRecord] = {}
                    batch: DecisionBatch | None = None
                    try:
                        for s in snaps:
                            instruction = render_instruction(
                                self.contract, s, st.portfolio.summary()
                            )
                            rec = sample_forecast(
                                st.agent,
                                instruction,
                                s,
                                budget,
                                contract_hash=self.contract_hash,
                                sampled_at=now,
                                cycle_index=cycle,
                            )
                            records[s.condition_id] = rec
                            emit(
                                {
                                    "kind": "forecast",
                                    "cycle": cycle,
                                    "agent_id": aid,
                                    "condition_id": s.condition_id,
                                    "probability": rec.probability,
                                    "confidence": rec.confidence,
                                    "trace": rec.reasoning_trace,
                                    "strategy": rec.strategy.value,
                                    "input_tokens": rec.input_tokens,
                                    "output_tokens": rec.output_tokens,
                                    "latency_ms": rec.latency_ms,
                                    "sampled_at": to_iso(rec.sampled_at),
                                    "contract_digest": rec.contract_hash.digest,
                                }
                            )
                        if cycle >= 2 and st.prev_forecasts:
                            emit(
                                self._drift_event(
                                    aid, cycle, st.prev_forecasts, records, snap_map, price_history
                                )
                            )
                        trigger_closes = self._trigger_closes(st.portfolio, snap_map)
                        wire = build_decision_batch(
                            st.agent,
                            records,
                            snaps,
                            st.window,
                            {p.condition_id for p in st.portfolio.open_positions},
                            risk_by_market=risk_by_market,
                            trigger_closes=trigger_closes,
                            cfg=cfg.agents,
                            produced_at=now,
                        )
                        batch, violations = parse_decision_wire(
                            wire, agent_id=aid, produced_at=now, lenient=cfg.agents.lenient_json
                        )
                        validation = validate_decision_batch(
                            batch,
                            known | {p.condition_id for p in st.portfolio.open_positions},
                            st.window,
                            cfg.agents,
                        )
                        emit(
                            {
                                "kind": "batch",
                                "cycle": cycle,
                                "agent_id": aid,
                                "accepted": validation.ok,
                                "issues": [
                                    {"code": i.code, "detail": i.detail} for i in validation.issues
                                ],
                                "wire_violations": violations,
                                "n_decisions": len(batch.decisions),
                                "n_buys": sum(
                                    1
                                    for d in batch.decisions
                                    if d.action in (Action.BUY_YES, Action.BUY_NO)
                                ),
                            }
                        )
                        if not validation.ok:
                            batch = self._fallback_batch(aid, now, snaps)
                    except (MalformedAgentOutput, AgentTimeout) as exc:
                        emit(
                            {
                                "kind": "agent_failure",
                                "cycle": cycle,
                                "agent_id": aid,
                                "error": str(exc),
                            }
                        )
                        records = {}
                        batch = self._fallback_batch(aid, now, snaps)

                    result = step(
                        st.portfolio,
                        batch,
                        snap_map,
                        self.mode,
                        cfg.simulator.edge_delta,
                        now=now,
                        stop_loss=cfg.simulator.stop_loss_ratio,
                        target_win=cfg.simulator.target_win_ratio,
                    )
                    st.portfolio = result.portfolio
                    for entry in result.entries:
                        ledgers[aid].append(entry)
                        st.ledger_lines += 1
                        emit(
                            {
                                "kind": "ledger",
                                "cycle": cycle,
                                "agent_id": aid,
                                "entry_kind": entry.kind.value,
                                **{
                                    k: v
                                    for k, v in entry_to_record(entry).items()
                                    if k != "kind"
                                },
                            }
                        )
                        if entry.kind == EntryKind.CLOSE:
                            st.window = st.window.record(
                                ClosedPosition(
                                    entry.condition_id, entry.side.value, entry.cash_delta_cents
                                )
                            )
                    for skip in result.skipped:
                        emit(
                            {
                                "kind": "skip",
                                "cycle": cycle,
                                "agent_id": aid,
                                "market_id": skip.market_id,
                                "action": skip.action,
                                "reason": skip.reason,
                            }
                        )
                    if records:
                        st.prev_forecasts = records

                # Baselines observe the exact same snapshots and timestamps.
                baseline_probs: dict[str, dict[str, float]] = {k.value: {} for k in BaselineKind}
                for s in snaps:
                    cat = categories.get(s.condition_id) or self._categorize(s)
                    forecasts = (
                        market_baseline(s, cfg.baselines.market_use_mid),
                        uniform_baseline(s),
                        historical_frequency_baseline(cat, resolved_so_far, snapshot=s),
                        heuristic_baseline(
                            s,
                            cfg.baselines.heuristic_favorite_prob,
                            cfg.baselines.heuristic_longshot_prob,
                        ),
                    )
                    for bf in forecasts:
                        baseline_probs[bf.kind.value][s.condition_id] = bf.probability
                        emit(
                            {
                                "kind": "baseline",
                                "cycle": cycle,
                                "baseline": bf.kind.value,
                                "condition_id": bf.condition_id,
                                "probability": bf.probability,
                                "as_of": to_iso(bf.as_of),
                            }
                        )
                self._emit_baseline_drift(emit, cycle, baseline_probs, snap_map, price_history)

                emit(
                    {
                        "kind": "cycle_end",
                        "cycle": cycle,
                        "time": to_iso(now),
                        "portfolios": {
                            aid: {
                                "total_capital_cents": states[aid].portfolio.total_capital_cents,
                                "available_cents": states[aid].portfolio.available_cents,
                                "deployed_cents": states[aid].portfolio.deployed_cents,
                                "open": len(states[aid].portfolio.open_positions),
                            }
                            for aid in self.manifest.agent_ids
                        },
                    }
                )
                for writer in ledgers.values():
                    writer.sync()
                events.flush()
                if cfg.loop.checkpoint_every and cycle % cfg.loop.checkpoint_every == 0 and not live:
                    self._write_checkpoint(cycle, states, price_history, events_lines)
                cycle += 1

            # Resolution and settlement after the last cycle.
            resolution_cycle = total_cycles + 1
            for outcome in outcomes:
                emit(
                    {
                        "kind": "resolution",
                        "condition_id": outcome.condition_id,
                        "outcome": outcome.outcome,
                        "resolved_at": to_iso(outcome.resolved_at),
                    }
                )
                cat = categories.get(outcome.condition_id)
                if cat is not None:
                    resolved_so_far.append((outcome, cat))
                for aid in self.manifest.agent_ids:
                    st = states[aid]
                    st.portfolio, entry = resolve_market(st.portfolio, outcome)
                    if entry is not None:
                        ledgers[aid].append(entry)
                        st.ledger_lines += 1
                        emit(
                            {
                                "kind": "ledger",
                                "cycle": resolution_cycle,
                                "agent_id": aid,
                                "entry_kind": entry.kind.value,
                                **{
                                    k: v
                                    for k, v in entry_to_record(entry).items()
                                    if k != "kind"
                                },
                            }
                        )
                        st.window = st.window.record(
                            ClosedPosition(
                                entry.condition_id, entry.side.value, entry.cash_delta_cents
                            )
                        )
            for writer in ledgers.values():
                writer.sync()
            events.flush()

            # Final reports are a fold over the log written so far.
            fold = reporting.EventFold().consume(reporting.iter_events(self.paths.events))
            final = reporting.final_reports_from_fold(fold, cfg)
            for subject in sorted(final):
                emit({"kind": "final_report", "subject": subject, **final[subject]})
            emit({"kind": "run_completed", "cycles_run": total_cycles})
        finally:
            events.close()
            for writer in ledgers.values():
                writer.close()

        sha = file_sha256(self.paths.events)
        self.paths.events_sha.write_text(sha + "\n", encoding="utf-8")
        return RunResult(
            run_id=self.manifest.run_id,
            cycles_run=total_cycles,
            events_path=self.paths.events,
            event_log_sha256=sha,
            final_reports=final,
        )

    # -- helpers --

    def _categorize(self, snap: MarketSnapshot) -> EventCategory:
        m = self.config.market
        return categorize_event(
            snap.question,
            snap.end_time,
            snap.observed_at,
            snap.yes_price,
            risk_high_below=m.risk_high_below,
            risk_low_at_least=m.risk_low_at_least,
            horizon_short_days=m.horizon_short_days,
            horizon_medium_days=m.horizon_medium_days,
        )

    def _trigger_closes(
        self, portfolio: Portfolio, snap_map: dict[str, MarketSnapshot]
    ) -> list[str]:
        triggered = []
        for p in portfolio.open_positions:
            snap = snap_map.get(p.condition_id)
            if snap is None:
                continue
            value = _value_cents(p.quantity_micro, p.side_price(snap))
            marked = replace(p, unrealized_pnl_cents=value - p.cost_basis_cents)
            if (
                evaluate_triggers(
                    marked,
                    self.config.simulator.stop_loss_ratio,
                    self.config.simulator.target_win_ratio,
                )
                != Trigger.NONE
            ):
                triggered.append(p.condition_id)
        return triggered

    def _fallback_batch(
        self, agent_id: str, now, snaps: Sequence[MarketSnapshot]
    ) -> DecisionBatch:
        """30 HOLDs on known markets; triggers still fire inside step()."""
        size = self.config.agents.batch_size
        holds = tuple(
            Decision(market_id=s.condition_id, action=Action.HOLD, reasoning="fallback")
            for s in snaps[:size]
        )
        return DecisionBatch(
            decisions=holds,
            overall_reasoning="fallback after failure",
            agent_id=agent_id,
            produced_at=now,
        )

    def _drift_event(
        self,
        agent_id: str,
        cycle: int,
        prev: dict[str, ForecastRecord],
        curr: dict[str, ForecastRecord],
        snap_map: dict[str, MarketSnapshot],
        price_history: dict[str, list[float]],
    ) -> dict:
        form = self.config.metrics.temporal_drift_form
        dn_parts: list[float] = []
        dt_diff_parts: list[float] = []
        dt_prod_parts: list[float] = []
        for cid, rec in curr.items():
            prev_rec = prev.get(cid)
            history = price_history.get(cid, [])
            if prev_rec is None or len(history) < 2:
                continue
            m_prev, m_curr = history[-2], history[-1]
            dn_parts.append(narrative_drift(prev_rec.reasoning_trace, rec.reasoning_trace))
            dt_diff_parts.append(
                temporal_drift(
                    prev_rec.probability, rec.probability, m_prev, m_curr, "difference"
                )
            )
            dt_prod_parts.append(
                temporal_drift(prev_rec.probability, rec.probability, m_prev, m_curr, "product")
            )
        divergence_parts = [
            abs(rec.probability - snap_map[cid].yes_price)
            for cid, rec in curr.items()
            if cid in snap_map
        ]
        mean = lambda xs: (sum(xs) / len(xs)) if xs else 0.0  # noqa: E731
        dn = mean(dn_parts)
        dt_diff = mean(dt_diff_parts)
        dt_prod = mean(dt_prod_parts)
        dt = dt_diff if form == "difference" else dt_prod
        dc = 0.0  # nothing resolved mid-run; see the post-hoc fold
        return {
            "kind": "drift",
            "cycle": cycle,
            "agent_id": agent_id,
            "d_narrative": dn,
            "d_temporal": dt,
            "d_temporal_difference": dt_diff,
            "d_temporal_product": dt_prod,
            "d_confidence": dc,
            "d_total": dn + dt + dc,
            "market_divergence": mean(divergence_parts),
            "low_evidence": True,
        }

    def _emit_baseline_drift(
        self,
        emit,
        cycle: int,
        baseline_probs: dict[str, dict[str, float]],
        snap_map: dict[str, MarketSnapshot],
        price_history: dict[str, list[float]],
    ) -> None:
        prev = self._prev_baseline_probs_map
        if cycle >= 2 and prev:
            form = self.config.metrics.temporal_drift_form
            for bkind, probs in baseline_probs.items():
                prev_probs = prev.get(bkind, {})
                dt_diff_parts: list[float] = []
                dt_prod_parts: list[float] = []
                divergence_parts: list[float] = []
                for cid, p_curr in probs.items():
                    if cid in snap_map:
                        divergence_parts.append(abs(p_curr - snap_map[cid].yes_price))
                    p_prev = prev_probs.get(cid)
                    history = price_history.get(cid, [])
                    if p_prev is None or len(history) < 2:
                        continue
                    m_prev, m_curr = history[-2], history[-1]
                    dt_diff_parts.append(
                        temporal_drift(p_prev, p_curr, m_prev, m_curr, "difference")
                    )
                    dt_prod_parts.append(
                        temporal_drift(p_prev, p_curr, m_prev, m_curr, "product")
                    )
                mean = lambda xs: (sum(xs) / len(xs)) if xs else 0.0  # noqa: E731
                dt_diff = mean(dt_diff_parts)
                dt_prod = mean(dt_prod_parts)
                dt = dt_diff if form == "difference" else dt_prod
                emit(
                    {
                        "kind": "drift",
                        "cycle": cycle,
                        "agent_id": reporting.BASELINE_PREFIX + bkind,
                        "d_narrative": 0.0,
                        "d_temporal": dt,
                        "d_temporal_difference": dt_diff,
                        "d_temporal_product": dt_prod,
                        "d_confidence": 0.0,
                        "d_total": dt,
                        "market_divergence": mean(divergence_parts),
                        "low_evidence": True,
                    }
                )
        self._prev_baseline_probs_map = baseline_probs


def _thin_record(
    cid: str, agent_id: str, p: float, trace: str, confidence: int, chash: ContractHash
) -> ForecastRecord:
    """Reconstruct the slice of a ForecastRecord that drift needs."""
    from .agents import Strategy
    from .timeutil import EPOCH

    return ForecastRecord(
        condition_id=cid,
        agent_id=agent_id,
        probability=p,
        confidence=confidence,
        reasoning_trace=trace,
        strategy=Strategy.NONE,
        input_tokens=0,
        output_tokens=0,
        latency_ms=0.0,
        sampled_at=EPOCH,
        contract_hash=chash,
    )


# --- statistics ----------------------------------------------------------------------


def significance_test(
    scores_a: Sequence[float],
    scores_b: Sequence[float],
    resamples: int = 10_000,
    seed: int = 0,
) -> float:
    """Two-sided paired bootstrap p-value for a difference in mean scores.

    The null distribution resamples the mean of centered paired differences;
    add-one smoothing keeps the p-value strictly positive.
    """
    if len(scores_a) != len(scores_b):
        raise LengthMismatch(f"paired scores differ in length: {len(scores_a)} vs {len(scores_b)}")
    if len(scores_a) == 0:
        raise LengthMismatch("need at least one paired score")
    diffs = np.asarray(scores_a, dtype=float) - np.asarray(scores_b, dtype=float)
    observed = float(diffs.mean())
    centered = diffs - observed
    rng = np.random.default_rng([int(seed) & _MASK64, 0x51F7])
    n = len(diffs)
    hits = 0
    chunk = max(1, min(resamples, 2_000_000 // max(n, 1)))
    remaining = resamples
    while remaining > 0:
        take = min(chunk, remaining)
        idx = rng.integers(0, n, size=(take, n))
        means = centered[idx].mean(axis=1)
        hits += int(np.sum(np.abs(means) >= abs(observed)))
        remaining -= take
    return (1 + hits) / (resamples + 1)


# --- token budget sweep -----------------------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    budget: int
    agent_id: str
    mean_abs_dprob: float | None
    mean_d_temporal: float
    avg_output_tokens: float | None
    max_prob_gap_vs_first_budget: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class SweepReport:
    budgets: tuple[int, ...]
    rows: tuple[SweepRow, ...]
    run_ids: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "budgets": list(self.budgets),
            "run_ids": list(self.run_ids),
            "rows": [r.to_dict() for r in self.rows],
        }


def token_budget_sweep(
    out_root: str | Path,
    *,
    seed: int,
    agent_ids: Sequence[str],
    feed_source: dict,
    cycles: int,
    config: EngineConfig | None = None,
    budgets: Sequence[int] | None = None,
    mode: str = "execution",
    run_id_prefix: str = "sweep",
) -> SweepReport:
    """One full run per token budget on an identical seed and feed.

    Reports per-agent probability adjustment depth and drift per budget,
    plus each run's maximum probability gap against the first budget
    (zero for budget-insensitive agents).
    """
    config = config or EngineConfig()
    budgets = tuple(budgets or config.loop.sweep_budgets)
    rows: list[SweepRow] = []
    run_ids: list[str] = []
    prob_tables: dict[int, dict[str, dict[tuple[str, int], float]]] = {}

    for budget in budgets:
        engine = EvalEngine.create(
            out_root,
            seed=seed,
            agent_ids=agent_ids,
            feed_source=feed_source,
            cycles=cycles,
            config=config,
            run_id=f"{run_id_prefix}-b{budget}",
            mode=mode,
            token_budget=budget,
        )
        result = engine.run()
        run_ids.append(result.run_id)
        fold = reporting.EventFold().consume(reporting.iter_events(result.events_path))
        table: dict[str, dict[tuple[str, int], float]] = {}
        for aid in agent_ids:
            table[aid] = {
                (cid, c): p
                for cid, rows_ in fold.forecasts.get(aid, {}).items()
                for (c, p, *_rest) in rows_
            }
        prob_tables[budget] = table
        for aid in agent_ids:
            dprob, _, _ = fold.adjustment_depth(aid)
            dn, dt, _ = fold.drift_means(aid)
            _, avg_out = fold.token_averages(aid)
            first_table = prob_tables[budgets[0]][aid]
            gap = 0.0
            for key, p in table[aid].items():
                if key in first_table:
                    gap = max(gap, abs(p - first_table[key]))
            rows.append(
                SweepRow(
                    budget=budget,
                    agent_id=aid,
                    mean_abs_dprob=dprob,
                    mean_d_temporal=dt,
                    avg_output_tokens=avg_out,
                    max_prob_gap_vs_first_budget=gap,
                )
            )
    return SweepReport(budgets=budgets, rows=tuple(rows), run_ids=tuple(run_ids))


# --- resumption and verification -----------------------------------------------------------


def resume_run(out_root: str | Path, run_id: str, at_cycle: int | None = None) -> RunResult:
    """Resume an interrupted run from its latest (or given) checkpoint."""
    paths = RunPaths(out_root, run_id)
    if not paths.manifest.exists():
        raise NoCheckpoint(f"no manifest for run {run_id}")
    manifest = RunManifest.from_json(paths.manifest.read_text(encoding="utf-8"))
    if manifest.feed_source.get("kind") == "live":
        raise LiveSourceNotResumable("live feeds cannot be resumed deterministically")
    config = config_from_dict(manifest.metric_config)
    store = ContractStore(paths.contracts)
    contracts = {}
    for digest in manifest.contract_hashes:
        contract, chash = store.load(digest)
        contracts[digest] = (contract, chash)
    engine = EvalEngine(manifest, config, out_root, contracts)
    return engine.run(resume=True, resume_cycle=at_cycle)


@dataclass(frozen=True)
class VerifyReport:
    ok: bool
    events_ok: bool
    contracts: dict[str, bool]
    messages: tuple[str, ...]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "events_ok": self.events_ok,
            "contracts": self.contracts,
            "messages": list(self.messages),
        }


def verify_run(out_root: str | Path, run_id: str) -> VerifyReport:
    """Recompute the event-log hash and every stored contract digest."""
    paths = RunPaths(out_root, run_id)
    messages: list[str] = []
    events_ok = False
    if not paths.events.exists() or not paths.events_sha.exists():
        messages.append("event log or recorded hash missing")
    else:
        recorded = paths.events_sha.read_text(encoding="utf-8").strip()
        actual = file_sha256(paths.events)
        events_ok = recorded == actual
        if not events_ok:
            messages.append(f"event log hash mismatch: recorded {recorded[:12]}…, actual {actual[:12]}…")

    contracts: dict[str, bool] = {}
    store = ContractStore(paths.contracts)
    for digest in store.digests():
        contracts[digest] = store.verify_stored(digest)
        if not contracts[digest]:
            messages.append(f"contract {digest[:12]}… failed verification")
    if paths.manifest.exists():
        manifest = RunManifest.from_json(paths.manifest.read_text(encoding="utf-8"))
        for digest in manifest.contract_hashes:
            if digest not in contracts:
                contracts[digest] = False
                messages.append(f"manifest contract {digest[:12]}… not stored")
    ok = events_ok and all(contracts.values()) and bool(contracts)
    return VerifyReport(ok=ok, events_ok=events_ok, contracts=contracts, messages=tuple(messages))
