"""Seller reputation from on-chain rating events.

A buyer's view of a seller combines three windowed components: its own
direct experience (positive-event ratio), recommendations from friends
(trust-weighted opinions), and the average opinion of strangers. Absent
components drop out and the weights renormalize over what is present;
with nothing at all, the prior applies. Everything here is pure
computation over immutable event snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

POSITIVE = "positive"
NEGATIVE = "negative"

PRIOR_REPUTATION = 0.5


@dataclass(frozen=True)
class InteractionEvent:
    buyer: str
    seller: str
    round_time: int
    outcome: str   # POSITIVE | NEGATIVE

    def __post_init__(self):
        if self.outcome not in (POSITIVE, NEGATIVE):
            raise ValueError(f"outcome must be positive/negative, got {self.outcome!r}")
        if self.round_time < 0:
            raise ValueError("round_time must be nonnegative")


@dataclass(frozen=True)
class AggregationWeights:
    direct: float = 0.6
    recommended: float = 0.25
    referenced: float = 0.15

    def __post_init__(self):
        for w in (self.direct, self.recommended, self.referenced):
            if not 0.0 <= w <= 1.0:
                raise ValueError("aggregation weights must lie in [0,1]")
        if abs(self.direct + self.recommended + self.referenced - 1.0) > 1e-12:
            raise ValueError("aggregation weights must sum to 1")


@dataclass(frozen=True)
class IntegratedReputation:
    value: float
    direct: float | None
    recommended: float | None
    referenced: float | None
    window: int


class TrustGraph:
    """Buyer-to-buyer trust weights in [0,1]; absent pairs mean no friendship."""

    def __init__(self, weights: Mapping[tuple[str, str], float] | None = None):
        self._w: dict[tuple[str, str], float] = {}
        for (i, k), w in (weights or {}).items():
            self.set_trust(i, k, w)

    def set_trust(self, buyer: str, friend: str, weight: float) -> None:
        if buyer == friend:
            raise ValueError("a buyer cannot befriend itself")
        if not 0.0 <= weight <= 1.0:
            raise ValueError(f"trust weight must lie in [0,1], got {weight}")
        self._w[(buyer, friend)] = weight

    def trust_weight(self, buyer: str, friend: str) -> float:
        return self._w.get((buyer, friend), 0.0)

    def friends(self, buyer: str) -> list[str]:
        return sorted(k for (i, k) in self._w if i == buyer)


def direct_reputation(events: Iterable[InteractionEvent], window: int,
                      now: int) -> float | None:
    """Positive-event ratio over events with round_time in (now-window, now];
    None when the window is empty."""
    if window <= 0:
        raise ValueError("window must be positive")
    pos = total = 0
    for ev in events:
        if now - window < ev.round_time <= now:
            total += 1
            pos += ev.outcome == POSITIVE
    if total == 0:
        return None
    return pos / total


def recommended_reputation(buyer: str, graph: TrustGraph,
                           friend_opinions: Mapping[str, float]) -> float | None:
    """Trust-weighted mean of friends' opinions of the seller; None when no
    friend holds an opinion or all trust weights are zero."""
    num = den = 0.0
    for friend in graph.friends(buyer):
        opinion = friend_opinions.get(friend)
        if opinion is None:
            continue
        if not 0.0 <= opinion <= 1.0:
            raise ValueError(f"opinion out of range: {opinion}")
        w = graph.trust_weight(buyer, friend)
        num += w * opinion
        den += w
    if den == 0.0:
        return None
    return num / den


def referenced_reputation(stranger_opinions: Sequence[float]) -> float | None:
    """Plain mean of strangers' opinions; None on an empty list."""
    ops = list(stranger_opinions)
    if not ops:
        return None
    for o in ops:
        if not 0.0 <= o <= 1.0:
            raise ValueError(f"opinion out of range: {o}")
    return sum(ops) / len(ops)


def integrated_reputation(direct: float | None, recommended: float | None,
                          referenced: float | None,
                          weights: AggregationWeights = AggregationWeights(),
                          *, window: int = 20,
                          prior: float = PRIOR_REPUTATION) -> IntegratedReputation:
    """Weighted sum over the present components, weights renormalized over
    the present subset; the prior when everything is absent."""
    pairs = [(weights.direct, direct),
             (weights.recommended, recommended),
             (weights.referenced, referenced)]
    num = den = 0.0
    for w, comp in pairs:
        if comp is None:
            continue
        if not 0.0 <= comp <= 1.0:
            raise ValueError(f"reputation component out of range: {comp}")
        num += w * comp
        den += w
    value = prior if den == 0.0 else num / den
    return IntegratedReputation(value=value, direct=direct,
                                recommended=recommended, referenced=referenced,
                                window=window)


def filter_sellers(sellers: Sequence[str], reputations: Mapping[str, float],
                   permitted: float) -> list[str]:
    """Sellers meeting the permitted-reputation floor, order preserved."""
    if not 0.0 <= permitted <= 1.0:
        raise ValueError("permitted reputation must lie in [0,1]")
    return [s for s in sellers if reputations[s] >= permitted]


class ReputationEngine:
    """Incrementally maintained reputation table over committed rating events.

    Friendship is operationalized for this market as rating agreement:
    buyers who have both rated at least one common seller are friends, and
    the trust weight is the fraction of co-rated sellers where their latest
    ratings agree. Strangers are the remaining buyers holding an opinion.
    Recomputing from a replayed event list yields the identical table.
    """

    def __init__(self, buyers: Sequence[str], sellers: Sequence[str],
                 weights: AggregationWeights = AggregationWeights(),
                 window: int = 20, prior: float = PRIOR_REPUTATION):
        self.buyers = list(buyers)
        self.sellers = list(sellers)
        self.weights = weights
        self.window = window
        self.prior = prior
        self._events: list[InteractionEvent] = []

    def ingest(self, events: Iterable[InteractionEvent]) -> None:
        self._events.extend(events)

    def events(self) -> list[InteractionEvent]:
        return list(self._events)

    def _pair_events(self, buyer: str, seller: str) -> list[InteractionEvent]:
        return [e for e in self._events if e.buyer == buyer and e.seller == seller]

    def _direct(self, buyer: str, seller: str, now: int) -> float | None:
        return direct_reputation(self._pair_events(buyer, seller),
                                 self.window, now)

    def _latest_outcome(self, buyer: str, seller: str, now: int) -> str | None:
        latest = None
        for e in self._events:
            if e.buyer == buyer and e.seller == seller and \
                    now - self.window < e.round_time <= now:
                latest = e.outcome
        return latest

    def trust_graph(self, now: int) -> TrustGraph:
        graph = TrustGraph()
        for i in self.buyers:
            for k in self.buyers:
                if i == k:
                    continue
                common = agree = 0
                for s in self.sellers:
                    a = self._latest_outcome(i, s, now)
                    b = self._latest_outcome(k, s, now)
                    if a is not None and b is not None:
                        common += 1
                        agree += a == b
                if common > 0:
                    graph.set_trust(i, k, agree / common)
        return graph

    def integrated(self, buyer: str, seller: str, now: int) -> IntegratedReputation:
        graph = self.trust_graph(now)
        friends = set(graph.friends(buyer))
        direct = self._direct(buyer, seller, now)
        friend_opinions = {}
        stranger_opinions = []
        for other in self.buyers:
            if other == buyer:
                continue
            opinion = self._direct(other, seller, now)
            if opinion is None:
                continue
            if other in friends:
                friend_opinions[other] = opinion
            else:
                stranger_opinions.append(opinion)
        rec = recommended_reputation(buyer, graph, friend_opinions)
        ref = referenced_reputation(stranger_opinions)
        return integrated_reputation(direct, rec, ref, self.weights,
                                     window=self.window, prior=self.prior)

    def market_view(self, now: int) -> dict[str, float]:
        """One reputation per seller: mean integrated value over buyers."""
        table = {}
        for s in self.sellers:
            vals = [self.integrated(b, s, now).value for b in self.buyers]
            table[s] = sum(vals) / len(vals) if vals else self.prior
        return table
