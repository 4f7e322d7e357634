"""Round loop tying the market together, plus the two batch experiments.

Per round: sellers publish signed listings; buyers read the committed
chain, score every listed seller through the reputation engine, and drop
those below the permitted threshold (the low-reputation variant skips the
drop); the mechanism prices and allocates; winning buyers fine-tune the
bought model on their own target data, rate the result against the
accuracy threshold, and the trade plus rating records commit in the
round's block. All randomness flows from one master seed through named
substreams, so adding a mechanism or reordering cells never shifts
another run's draws.

The revenue experiment trains the learned mechanism for the filtered
market and for the unfiltered one (poisoned sellers present) and logs test
revenue per epoch next to both second-price baselines. Buyer values there
are informed: the base U[0,1] draw scaled by the seller's model quality
(1 - attack strength), with base draws shared across mechanisms so the
comparison is paired. The reliability experiment sweeps attack strength
and permitted reputation over seeded cells and reports mean traded-model
accuracy per cell.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import auction, ledger, reputation, tltask
from .auction import AuctionNet, MarketShape, TrainConfig
from .reputation import AggregationWeights, InteractionEvent, ReputationEngine
from .tltask import AttackConfig, SyntheticTaskSpec

MECHANISMS = ("DLA", "DLA-LR", "SPA")
TASK_TAG = "sign-classification"
DELEGATES = ("rsu0", "rsu1", "rsu2")


def substream(master_seed: int, *keys) -> np.random.Generator:
    """Named, order-independent child stream of the master seed."""
    ints = [int(master_seed) & 0xFFFFFFFF]
    for k in keys:
        digest = hashlib.sha256(repr(k).encode("ascii")).digest()
        ints.append(int.from_bytes(digest[:4], "little"))
    return np.random.default_rng(np.random.SeedSequence(ints))


@dataclass(frozen=True)
class ScenarioConfig:
    n_buyers: int = 3
    n_sellers: int = 3
    rounds: int = 20
    mechanism: str = "SPA"
    permitted_reputation: float = 0.5
    attack_strengths: tuple[float, ...] = (0.0, 0.0, 0.0)
    weights: AggregationWeights = AggregationWeights()
    rating_threshold: float = 0.75
    window: int = 20
    reputation_prior: float = 1.0    # optimistic start so strict markets boot
    master_seed: int = 0
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    fine_tune_epochs: int = 8
    auction_net: AuctionNet | None = None   # required for DLA/DLA-LR rounds

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"mechanism must be one of {MECHANISMS}")
        if len(self.attack_strengths) != self.n_sellers:
            raise ValueError("need one attack strength per seller")
        if not 0.0 <= self.permitted_reputation <= 1.0:
            raise ValueError("permitted reputation must lie in [0,1]")
        for a in self.attack_strengths:
            AttackConfig(a)


@dataclass(frozen=True)
class TradeResult:
    buyer: str
    seller: str
    item: int
    price: float
    accuracy: float
    rating: str


@dataclass(frozen=True)
class RoundOutcome:
    round: int
    eligible_sellers: tuple[str, ...]
    payments: tuple[float, ...]
    revenue: float
    trades: tuple[TradeResult, ...]
    skipped: bool
    block_height: int | None


class MarketEnv:
    """Mutable market state for one scenario run."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.buyers = [f"buyer{i}" for i in range(config.n_buyers)]
        self.sellers = [f"seller{j}" for j in range(config.n_sellers)]
        self.ledger = ledger.Ledger(list(DELEGATES),
                                    ledger.SignatureScheme(config.master_seed))
        for who in self.buyers + self.sellers:
            self.ledger.register_identity(who)
        self.engine = ReputationEngine(self.buyers, self.sellers,
                                       weights=config.weights,
                                       window=config.window,
                                       prior=config.reputation_prior)
        self._nonces: dict[str, int] = {}
        self._event_cursor = 0

        # sellers pretrain once; buyers hold fixed target tasks
        self.seller_models = {}
        self.seller_claims = {}
        self.ask_prices = {}
        for j, seller in enumerate(self.sellers):
            seed = int(substream(config.master_seed, "pretrain", j)
                       .integers(0, 2 ** 31))
            source, _, _ = tltask.gen_task(config.task, seed)
            attack = AttackConfig(config.attack_strengths[j])
            model = tltask.pretrain(source, attack, seed)
            poisoned_view = tltask.flip_labels(
                source, attack,
                np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0]))
            self.seller_models[seller] = model
            # sellers grade themselves on their own (possibly falsified) data
            self.seller_claims[seller] = tltask.evaluate(model, poisoned_view).accuracy
            self.ask_prices[seller] = float(
                substream(config.master_seed, "ask", j).uniform(0.1, 0.9))
        self.buyer_tasks = {}
        for i, buyer in enumerate(self.buyers):
            seed = int(substream(config.master_seed, "task", i).integers(0, 2 ** 31))
            _, target_train, target_test = tltask.gen_task(config.task, seed)
            self.buyer_tasks[buyer] = (target_train, target_test)

    def _next_nonce(self, author: str) -> int:
        n = self._nonces.get(author, 0)
        self._nonces[author] = n + 1
        return n

    def _submit(self, author: str, kind: str, payload: dict) -> None:
        tx = ledger.make_transaction(self.ledger.scheme, author, kind, payload,
                                     self._next_nonce(author))
        ok, reason = self.ledger.submit_transaction(tx)
        if not ok:
            raise RuntimeError(f"market produced an invalid transaction: {reason}")

    def _sync_engine(self) -> None:
        events = self.ledger.query_reputation_events()
        fresh = events[self._event_cursor:]
        self._event_cursor = len(events)
        self.engine.ingest(InteractionEvent(e["buyer"], e["seller"], e["round"],
                                            e["outcome"]) for e in fresh)

    def listed_sellers(self) -> list[str]:
        seen = []
        for listing in self.ledger.query_model_listings(TASK_TAG):
            if listing.owner not in seen:
                seen.append(listing.owner)
        return sorted(seen, key=self.sellers.index)

    def final_reputation_table(self, now: int) -> dict[str, float]:
        """Seller reputations with every committed rating ingested."""
        self._sync_engine()
        return self.engine.market_view(now=now)


def _select_winners(alloc_probs: np.ndarray, rng: np.random.Generator) -> list[int | None]:
    """Sample one winner (or no sale) per item column from the allocation."""
    n, m = alloc_probs.shape
    winners: list[int | None] = []
    for j in range(m):
        col = alloc_probs[:, j]
        rest = max(0.0, 1.0 - col.sum())
        p = np.append(col, rest)
        p = np.maximum(p, 0.0)
        p /= p.sum()
        pick = int(rng.choice(n + 1, p=p))
        winners.append(None if pick == n else pick)
    return winners


def run_trading_round(env: MarketEnv, round_: int) -> RoundOutcome:
    """One full market round; see the module docstring for the phases."""
    cfg = env.config

    # sellers publish fresh listings (committed with this round's block)
    for j, seller in enumerate(env.sellers):
        env._submit(seller, ledger.KIND_MODEL_INFO, {
            "owner": seller, "task": TASK_TAG,
            "claimed_accuracy": float(env.seller_claims[seller]),
            "model_size_kb": 64, "ask_price": env.ask_prices[seller],
            "timestamp": round_,
        })

    env._sync_engine()
    listed = env.listed_sellers()
    rep_table = env.engine.market_view(now=round_)
    if cfg.mechanism == "DLA-LR":
        eligible = listed
    else:
        eligible = reputation.filter_sellers(listed, rep_table,
                                             cfg.permitted_reputation)

    trades: list[TradeResult] = []
    payments = np.zeros(cfg.n_buyers)
    if eligible:
        m = len(eligible)
        values = substream(cfg.master_seed, "values", round_).uniform(
            size=(cfg.n_buyers, m))
        bids = values   # truthful reporting under the regret-trained mechanism
        reps = np.array([rep_table[s] for s in eligible])
        if cfg.mechanism in ("DLA", "DLA-LR"):
            if cfg.auction_net is None:
                raise ValueError("DLA rounds need a trained auction_net")
            outcome, winners = _dla_round(cfg.auction_net, bids, reps,
                                          substream(cfg.master_seed, "alloc", round_))
            item_prices = None
        else:
            outcome = auction.spa_outcome(bids)
            winners = [int(bids[:, j].argmax()) for j in range(m)]
            item_prices = [auction.spa_run(bids[:, j])[1] for j in range(m)]
        payments = np.asarray(outcome.payments, dtype=np.float64)

        for j, seller in enumerate(eligible):
            i = winners[j]
            if i is None:
                continue
            buyer = env.buyers[i]
            target_train, target_test = env.buyer_tasks[buyer]
            tuned = tltask.fine_tune(env.seller_models[seller], target_train,
                                     cfg.fine_tune_epochs, seed=round_)
            report = tltask.evaluate(tuned, target_test, seed=cfg.master_seed)
            rating = tltask.rate_outcome(report, cfg.rating_threshold)
            if item_prices is not None:
                price = float(item_prices[j])
            else:
                frac = payments[i] / max(1e-300, float((outcome.allocation[i] * bids[i]).sum()))
                price = float(frac * outcome.allocation[i, j] * bids[i, j])
            trades.append(TradeResult(buyer=buyer, seller=seller, item=j,
                                      price=price, accuracy=report.accuracy,
                                      rating=rating))
            env._submit(buyer, ledger.KIND_TRADE_RECORD, {
                "buyer": buyer, "seller": seller, "task": TASK_TAG,
                "price": price, "round": round_,
            })
            env._submit(buyer, ledger.KIND_REPUTATION_RATING, {
                "buyer": buyer, "seller": seller, "round": round_,
                "outcome": rating,
            })

    block = env.ledger.propose_and_commit(round_)
    revenue = float(payments.sum())
    return RoundOutcome(round=round_, eligible_sellers=tuple(eligible),
                        payments=tuple(float(p) for p in payments),
                        revenue=revenue, trades=tuple(trades),
                        skipped=not eligible,
                        block_height=None if block is None else block.height)


def _dla_round(anet: AuctionNet, bids: np.ndarray, reps: np.ndarray,
               rng: np.random.Generator):
    """Run the trained net on a possibly smaller eligible market by padding
    missing item columns with zero bids and zero reputation; padded columns
    cannot charge anyone (payment terms are bid-weighted) and their
    allocations are discarded."""
    n_round, m_round = bids.shape
    n, m = anet.shape.n_buyers, anet.shape.n_items
    if n_round != n or m_round > m:
        raise ValueError(f"trained net expects up to {n}x{m} markets, "
                         f"got {n_round}x{m_round}")
    full_bids = np.zeros((n, m))
    full_bids[:, :m_round] = bids
    full_reps = np.zeros(m)
    full_reps[:m_round] = reps
    out = auction.dla_forward(anet, full_bids, full_reps)
    alloc = out.allocation[:, :m_round]
    winners = _select_winners(alloc, rng)
    return auction.AuctionOutcome(alloc, out.payments), winners


def run_scenario(config: ScenarioConfig) -> tuple[MarketEnv, list[RoundOutcome]]:
    env = MarketEnv(config)
    outcomes = [run_trading_round(env, r) for r in range(1, config.rounds + 1)]
    return env, outcomes


# ---------------------------------------------------------------------------
# revenue experiment (training curves)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RevenueExperimentConfig:
    n_buyers: int = 3
    n_items: int = 3
    n_poisoned: int = 1              # poisoned slots in the unfiltered market
    poison_strength: float = 0.5
    permitted_reputation: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    master_seed: int = 0
    mechanisms: tuple[str, ...] = ("DLA", "DLA-LR", "SPA", "SPA-unfiltered")
    regret_eval_samples: int = 1024
    regret_eval_steps: int = 150

    def __post_init__(self):
        if not 0 <= self.n_poisoned <= self.n_items:
            raise ValueError("n_poisoned must lie in [0, n_items]")
        AttackConfig(self.poison_strength)


def quality_vector(cfg: RevenueExperimentConfig) -> np.ndarray:
    q = np.ones(cfg.n_items)
    q[:cfg.n_poisoned] = 1.0 - cfg.poison_strength
    return q


def run_revenue_experiment(cfg: RevenueExperimentConfig,
                           *, log=None) -> dict:
    """Train the learned mechanisms and evaluate the baselines on shared
    base draws. Returns {mechanism: [per-epoch rows]} plus trained nets
    under "nets"; every mechanism row list has exactly train.epochs rows."""
    shape = MarketShape(cfg.n_buyers, cfg.n_items)
    quality = quality_vector(cfg)
    permitted = cfg.permitted_reputation

    def base_sampler(rng, n):
        return auction.uniform_value_sampler(rng, n, shape)

    def values_lr(rng, n):
        return base_sampler(rng, n) * quality[None, None, :]

    def rep_filtered(rng, n):
        return rng.uniform(permitted, 1.0, size=(n, cfg.n_items))

    def rep_unfiltered(rng, n):
        reps = rng.uniform(permitted, 1.0, size=(n, cfg.n_items))
        if cfg.n_poisoned:
            reps[:, :cfg.n_poisoned] = rng.uniform(
                0.0, permitted, size=(n, cfg.n_poisoned))
        return reps

    test_n = cfg.train.test_samples
    base_test = base_sampler(substream(cfg.master_seed, "test-values"), test_n)
    rep_test_f = rep_filtered(substream(cfg.master_seed, "test-reps-f"), test_n)
    rep_test_u = rep_unfiltered(substream(cfg.master_seed, "test-reps-u"), test_n)

    variants = {
        "DLA": (base_sampler, rep_filtered, base_test, rep_test_f),
        "DLA-LR": (values_lr, rep_unfiltered, base_test * quality[None, None, :],
                   rep_test_u),
    }
    series: dict[str, list[dict]] = {}
    nets: dict[str, AuctionNet] = {}
    for mech in cfg.mechanisms:
        if mech in ("SPA", "SPA-unfiltered"):
            test_v = base_test if mech == "SPA" else base_test * quality[None, None, :]
            rev = float(auction.spa_outcome(test_v).revenue().mean())
            series[mech] = [{"epoch": e, "mechanism": mech, "revenue": rev,
                             "mean_regret": 0.0}
                            for e in range(cfg.train.epochs)]
            continue
        sampler, reps, test_v, test_r = variants[mech]
        if log:
            log(f"training {mech} ({cfg.n_buyers}x{cfg.n_items}, "
                f"{cfg.train.epochs} epochs)")
        anet, metrics = auction.train_dla(shape, sampler, reps, cfg.train,
                                          test_set=(test_v, test_r))
        nets[mech] = anet
        series[mech] = [{"epoch": m["epoch"], "mechanism": mech,
                         "revenue": m["revenue"],
                         "mean_regret": m["mean_regret"]} for m in metrics]
    series["nets"] = nets
    return series


def final_regret(cfg: RevenueExperimentConfig, anet: AuctionNet,
                 mech: str) -> float:
    """Converged-net regret on fresh draws from the mechanism's own market."""
    shape = MarketShape(cfg.n_buyers, cfg.n_items)
    n = cfg.regret_eval_samples
    quality = quality_vector(cfg)
    rng_v = substream(cfg.master_seed, "regret-values", mech)
    rng_r = substream(cfg.master_seed, "regret-reps", mech)
    values = auction.uniform_value_sampler(rng_v, n, shape)
    if mech == "DLA-LR":
        values = values * quality[None, None, :]
        reps = rng_r.uniform(0.0, 1.0, size=(n, cfg.n_items))
    else:
        reps = rng_r.uniform(cfg.permitted_reputation, 1.0, size=(n, cfg.n_items))
    rgt = auction.estimate_regret(anet, values, reps,
                                  steps=cfg.regret_eval_steps, lr=0.05)
    return float(rgt.mean())


# ---------------------------------------------------------------------------
# reliability experiment (attack strength x permitted reputation grid)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReliabilityGridConfig:
    attack_strengths: tuple[float, ...] = (0.0, 0.25, 0.5)
    permitted_reputations: tuple[float, ...] = (0.0, 0.5, 0.8)
    seeds: int = 20
    rounds: int = 20
    n_buyers: int = 3
    n_sellers: int = 3
    n_malicious: int = 1
    mechanism: str = "SPA"
    rating_threshold: float = 0.75
    window: int = 20
    weights: AggregationWeights = AggregationWeights()
    reputation_prior: float = 1.0
    master_seed: int = 0
    task: SyntheticTaskSpec = SyntheticTaskSpec()
    fine_tune_epochs: int = 8
    auction_net: AuctionNet | None = None

    def __post_init__(self):
        if not self.attack_strengths or not self.permitted_reputations or self.seeds < 1:
            raise ValueError("the reliability grid must be nonempty")
        if not 0 <= self.n_malicious <= self.n_sellers:
            raise ValueError("n_malicious must lie in [0, n_sellers]")


def reliability_cell_config(grid: ReliabilityGridConfig, attack: float,
                            permitted: float, seed: int) -> ScenarioConfig:
    strengths = tuple(attack if j < grid.n_malicious else 0.0
                      for j in range(grid.n_sellers))
    # the cell seed depends on the seed index only, so cells with the same
    # index share every market draw and grid axes compare paired runs
    cell_seed = int(substream(grid.master_seed, "cell", seed).integers(0, 2 ** 31))
    return ScenarioConfig(
        n_buyers=grid.n_buyers, n_sellers=grid.n_sellers, rounds=grid.rounds,
        mechanism=grid.mechanism, permitted_reputation=permitted,
        attack_strengths=strengths, weights=grid.weights,
        rating_threshold=grid.rating_threshold, window=grid.window,
        reputation_prior=grid.reputation_prior, master_seed=cell_seed,
        task=grid.task, fine_tune_epochs=grid.fine_tune_epochs,
        auction_net=grid.auction_net)


def run_reliability_cell(grid: ReliabilityGridConfig, attack: float,
                         permitted: float, seed: int,
                         *, with_artifacts: bool = False):
    config = reliability_cell_config(grid, attack, permitted, seed)
    env, outcomes = run_scenario(config)
    accs = [t.accuracy for o in outcomes for t in o.trades]
    row = {
        "attack_strength": attack,
        "permitted_reputation": permitted,
        "seed": seed,
        "mean_accuracy": float(np.mean(accs)) if accs else None,
        "trades_executed": len(accs),
    }
    if not with_artifacts:
        return row
    artifacts = {
        "chain_text": env.ledger.dump_chain(),
        "reputation_table": env.final_reputation_table(now=config.rounds),
        "config": config,
        "outcomes": outcomes,
    }
    return row, artifacts


def run_reliability_experiment(grid: ReliabilityGridConfig, *, jobs: int = 1,
                               log=None) -> list[dict]:
    """Full sweep; rows ordered by (attack, permitted, seed) regardless of
    execution order. Cells are independent, so jobs > 1 fans them out."""
    cells = [(a, p, s) for a in grid.attack_strengths
             for p in grid.permitted_reputations for s in range(grid.seeds)]
    if jobs <= 1:
        rows = []
        for a, p, s in cells:
            if log and s == 0:
                log(f"reliability cell attack={a} permitted={p} "
                    f"({grid.seeds} seeds)")
            rows.append(run_reliability_cell(grid, a, p, s))
        return rows
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_reliability_cell, grid, a, p, s)
                   for a, p, s in cells]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# replay checks
# ---------------------------------------------------------------------------

def reputation_table_from_chain(chain: list[ledger.Block],
                                delegates: Sequence[str],
                                scheme: ledger.SignatureScheme,
                                config: ScenarioConfig,
                                now: int) -> dict[str, float]:
    """Rebuild the end-of-run seller reputation table from a raw chain."""
    state = ledger.replay_chain(list(chain), list(delegates), scheme)
    engine = ReputationEngine([f"buyer{i}" for i in range(config.n_buyers)],
                              [f"seller{j}" for j in range(config.n_sellers)],
                              weights=config.weights, window=config.window,
                              prior=config.reputation_prior)
    engine.ingest(InteractionEvent(e["buyer"], e["seller"], e["round"],
                                   e["outcome"]) for e in state.rating_events)
    return engine.market_view(now=now)
