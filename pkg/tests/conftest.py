from __future__ import annotations

import sys
from datetime import datetime, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from driftmark.market_data import Liquidity, MarketSnapshot


@pytest.fixture
def now():
    return datetime(2026, 2, 1, tzinfo=timezone.utc)


@pytest.fixture
def snapshot(now):
    return MarketSnapshot(
        condition_id="0x" + "ab" * 20,
        question="Will the election be won by the incumbent?",
        yes_price=0.62,
        no_price=0.38,
        liquidity_tier=Liquidity.HIGH,
        end_time=datetime(2026, 3, 1, tzinfo=timezone.utc),
        observed_at=now,
    )


def make_snapshot(
    cid="0x" + "cd" * 20,
    question="Will the market index close higher this period?",
    yes=0.5,
    no=None,
    observed=None,
    end=None,
    liquidity=Liquidity.MEDIUM,
):
    observed = observed or datetime(2026, 2, 1, tzinfo=timezone.utc)
    end = end or datetime(2026, 6, 1, tzinfo=timezone.utc)
    return MarketSnapshot(
        condition_id=cid,
        question=question,
        yes_price=yes,
        no_price=(1.0 - yes) if no is None else no,
        liquidity_tier=liquidity,
        end_time=end,
        observed_at=observed,
    )
