"""Learned auction for the model market, with classic baselines.

The mechanism net consumes a flattened bid matrix plus per-seller
reputations and emits, per item, a softmax allocation over the buyers
and one no-sale slot, plus a per-buyer payment fraction in (0,1).
Payments are frac_i * sum_j z_ij * b_ij, so utility at a truthful
report is (1 - frac_i) * sum_j z_ij * v_ij >= 0: individual rationality
holds by construction.

Training minimizes negated expected revenue subject to zero expected
ex-post regret, via the augmented Lagrangian method. Regret per buyer is
estimated with projected gradient ascent over that buyer's own bid
entries, others held at truth; the found misreports are treated as
constants when differentiating the outer loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import kernels, nn


@dataclass(frozen=True)
class MarketShape:
    n_buyers: int
    n_items: int

    def __post_init__(self):
        if self.n_buyers < 1 or self.n_items < 1:
            raise ValueError(f"market shape must be positive, got {self}")


@dataclass(frozen=True)
class AuctionOutcome:
    allocation: np.ndarray   # (..., n_buyers, n_items) winning probabilities
    payments: np.ndarray     # (..., n_buyers)

    def revenue(self):
        return self.payments.sum(axis=-1)


@dataclass(frozen=True)
class AuctionNet:
    shape: MarketShape
    trunk: nn.DenseNet

    def __post_init__(self):
        n, m = self.shape.n_buyers, self.shape.n_items
        if self.trunk.input_dim != n * m + m:
            raise ValueError(
                f"trunk input dim {self.trunk.input_dim} does not match "
                f"{n}x{m} market (expected {n * m + m})"
            )
        if self.trunk.output_dim != m * (n + 1) + n:
            raise ValueError(
                f"trunk output dim {self.trunk.output_dim} does not match "
                f"{n}x{m} market (expected {m * (n + 1) + n})"
            )


def build_auction_net(shape: MarketShape, hidden: Sequence[int] = (100, 100), *,
                      rng: np.random.Generator) -> AuctionNet:
    n, m = shape.n_buyers, shape.n_items
    dims = [n * m + m, *hidden, m * (n + 1) + n]
    return AuctionNet(shape, nn.init_net(dims, rng=rng))


# ---------------------------------------------------------------------------
# forward / backward through the mechanism heads
# ---------------------------------------------------------------------------

def _as_batched(shape: MarketShape, bids, rep):
    bids = np.ascontiguousarray(bids, dtype=np.float64)
    rep = np.ascontiguousarray(rep, dtype=np.float64)
    n, m = shape.n_buyers, shape.n_items
    squeezed = bids.ndim == 2
    if squeezed:
        bids = bids[None]
    if bids.ndim != 3 or bids.shape[1:] != (n, m):
        raise ValueError(f"bid profile shape {bids.shape} does not match {n}x{m} market")
    if rep.ndim == 1 and rep.shape == (m,):
        rep = np.broadcast_to(rep, (bids.shape[0], m)).copy()
    if rep.shape != (bids.shape[0], m):
        raise ValueError(f"reputation shape {rep.shape} does not match {m} items")
    if not np.all(np.isfinite(bids)) or np.any(bids < 0):
        raise ValueError("bids must be finite and nonnegative")
    return bids, rep, squeezed


class _Flow:
    """Intermediates of one mechanism evaluation, kept for the backward pass."""

    __slots__ = ("bids", "rep", "cache", "probs", "alloc", "frac", "pay")

    def __init__(self, bids, rep, cache, probs, alloc, frac):
        self.bids = bids
        self.rep = rep
        self.cache = cache
        self.probs = probs          # (B, M, N+1) softmax incl. no-sale slot
        self.alloc = alloc          # (B, N, M)
        self.frac = frac            # (B, N)
        self.pay = frac * (alloc * bids).sum(axis=2)


def _flow_forward(anet: AuctionNet, bids, rep) -> _Flow:
    n, m = anet.shape.n_buyers, anet.shape.n_items
    batch = bids.shape[0]
    x = np.concatenate([bids.reshape(batch, n * m), rep], axis=1)
    raw, cache = nn.forward_cache(anet.trunk, x)
    scores = np.ascontiguousarray(raw[:, : m * (n + 1)].reshape(batch, m, n + 1))
    probs = kernels.slot_softmax(scores)
    alloc = np.ascontiguousarray(probs[:, :, :n].transpose(0, 2, 1))
    frac = kernels.sigmoid_kernel(np.ascontiguousarray(raw[:, m * (n + 1):]))
    return _Flow(bids, rep, cache, probs, alloc, frac)


def _flow_backward(anet: AuctionNet, flow: _Flow, d_alloc, d_frac, *,
                   need_param_grads: bool):
    """Pull gradients w.r.t. allocation and payment fraction back to the
    trunk parameters and the bid inputs (through the net only)."""
    n, m = anet.shape.n_buyers, anet.shape.n_items
    batch = flow.bids.shape[0]
    d_probs = np.zeros_like(flow.probs)
    d_probs[:, :, :n] = d_alloc.transpose(0, 2, 1)
    d_scores = kernels.slot_softmax_grad(flow.probs, d_probs)
    d_logits = d_frac * flow.frac * (1.0 - flow.frac)
    upstream = np.concatenate(
        [d_scores.reshape(batch, m * (n + 1)), d_logits], axis=1)
    if need_param_grads:
        param_grads, d_input = nn.backward(anet.trunk, flow.cache, upstream)
    else:
        param_grads, d_input = None, nn.backward_input(anet.trunk, flow.cache, upstream)
    d_bids_net = d_input[:, : n * m].reshape(batch, n, m)
    return param_grads, d_bids_net


def dla_forward(anet: AuctionNet, bids, rep) -> AuctionOutcome:
    """Evaluate the mechanism on one or a batch of bid profiles."""
    bids, rep, squeezed = _as_batched(anet.shape, bids, rep)
    flow = _flow_forward(anet, bids, rep)
    if squeezed:
        return AuctionOutcome(flow.alloc[0], flow.pay[0])
    return AuctionOutcome(flow.alloc, flow.pay)


def utility(value: float, allocation: float, payment: float) -> float:
    """Allocation-weighted valuation minus payment."""
    return value * allocation - payment


def _utilities(flow: _Flow, values) -> np.ndarray:
    # (B, N): sum_j z_ij v_ij - pay_i
    return (flow.alloc * values).sum(axis=2) - flow.pay


# ---------------------------------------------------------------------------
# regret estimation
# ---------------------------------------------------------------------------

def _stacked_market(values, rep, n):
    """One block per buyer: block i is the batch with buyer i's bids free."""
    batch = values.shape[0]
    mis = np.tile(values, (n, 1, 1))
    rep_s = np.tile(rep, (n, 1))
    vals_s = np.tile(values, (n, 1, 1))
    rows = np.arange(n * batch)
    free = np.repeat(np.arange(n), batch)
    return mis, vals_s, rep_s, rows, free


def _own_utility_grad(flow: _Flow, vals_s, rows, free):
    """du_free/d(alloc), du_free/d(frac), and the direct payment term on bids."""
    own_v = vals_s[rows, free, :]                       # (R, M) true values
    own_b = flow.bids[rows, free, :]                    # (R, M) current reports
    own_z = flow.alloc[rows, free, :]                   # (R, M)
    own_f = flow.frac[rows, free]                       # (R,)
    d_alloc = np.zeros_like(flow.alloc)
    d_alloc[rows, free, :] = own_v - own_f[:, None] * own_b
    d_frac = np.zeros_like(flow.frac)
    d_frac[rows, free] = -(own_z * own_b).sum(axis=1)
    direct_own = -own_f[:, None] * own_z                # du/db'_ij outside the net
    return d_alloc, d_frac, direct_own


def _misreport_ascent(anet: AuctionNet, values, rep, steps: int, lr: float):
    """Projected gradient ascent on each buyer's own reports from truth.

    Returns the stacked misreport profiles plus the index helpers."""
    n = anet.shape.n_buyers
    mis, vals_s, rep_s, rows, free = _stacked_market(values, rep, n)
    for _ in range(steps):
        flow = _flow_forward(anet, mis, rep_s)
        d_alloc, d_frac, direct_own = _own_utility_grad(flow, vals_s, rows, free)
        _, d_bids_net = _flow_backward(anet, flow, d_alloc, d_frac,
                                       need_param_grads=False)
        own_grad = d_bids_net[rows, free, :] + direct_own
        mis[rows, free, :] = np.clip(mis[rows, free, :] + lr * own_grad, 0.0, 1.0)
    return mis, vals_s, rep_s, rows, free


def estimate_regret(anet: AuctionNet, values, rep, *, steps: int = 25,
                    lr: float = 0.1) -> np.ndarray:
    """Per-buyer ex-post regret lower bound: best found misreport utility
    minus truthful utility, floored at zero.

    `values` may be one (N, M) profile or a batch (B, N, M); the result is
    (N,) or (B, N) accordingly.
    """
    if steps < 1:
        raise ValueError("misreport search needs at least one step")
    values, rep, squeezed = _as_batched(anet.shape, values, rep)
    n = anet.shape.n_buyers
    batch = values.shape[0]
    u_truth = _utilities(_flow_forward(anet, values, rep), values)
    mis, vals_s, rep_s, rows, free = _misreport_ascent(anet, values, rep, steps, lr)
    flow_m = _flow_forward(anet, mis, rep_s)
    u_all = _utilities(flow_m, vals_s)
    if not (np.all(np.isfinite(u_all)) and np.all(np.isfinite(u_truth))):
        raise RuntimeError("non-finite utility encountered in misreport search")
    u_mis = u_all[rows, free].reshape(n, batch).T
    regret = np.maximum(0.0, u_mis - u_truth)
    return regret[0] if squeezed else regret


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def lagrangian_loss(revenue: float, regrets, lam, rho: float) -> float:
    """Negated revenue plus multiplier and quadratic penalty terms."""
    regrets = np.asarray(regrets, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    if rho <= 0:
        raise ValueError("penalty weight must be positive")
    return float(-revenue + np.dot(lam, regrets) + 0.5 * rho * np.sum(regrets ** 2))


@dataclass
class TrainConfig:
    epochs: int = 80
    batch_size: int = 128
    batches_per_epoch: int = 25
    learning_rate: float = 1e-3
    misreport_steps: int = 25
    misreport_lr: float = 0.1
    lambda_init: float = 5.0
    rho: float = 1.0
    rho_growth: float = 1.0            # multiplies rho at each multiplier update
    rho_max: float = 5000.0
    multiplier_update_period: int = 2  # epochs between lambda steps
    hidden: tuple[int, ...] = (100, 100)
    seed: int = 0
    test_samples: int = 2048

    def __post_init__(self):
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.misreport_steps < 1:
            raise ValueError("misreport_steps must be >= 1")
        if self.epochs < 1 or self.batch_size < 1 or self.batches_per_epoch < 1:
            raise ValueError("epochs, batch size, and batches per epoch must be >= 1")


def uniform_value_sampler(rng: np.random.Generator, n: int, shape: MarketShape):
    return rng.uniform(0.0, 1.0, size=(n, shape.n_buyers, shape.n_items))


def train_dla(shape: MarketShape,
              value_sampler: Callable[[np.random.Generator, int], np.ndarray],
              rep_source: Callable[[np.random.Generator, int], np.ndarray],
              config: TrainConfig,
              *, test_set: tuple[np.ndarray, np.ndarray] | None = None,
              log: Callable[[str], None] | None = None):
    """Augmented-Lagrangian training of the mechanism net.

    value_sampler(rng, n) -> (n, N, M) bid/value profiles; rep_source(rng, n)
    -> (n, M) seller reputations. The per-epoch revenue metric is computed on
    `test_set` (values, reps) when given, else on a held-out draw from the
    same samplers. Returns (trained net, per-epoch metrics), metrics rows
    keyed epoch / revenue / mean_regret / max_regret / loss. Deterministic
    for a fixed config.
    """
    n, m = shape.n_buyers, shape.n_items
    root = np.random.SeedSequence(config.seed)
    init_ss, train_ss, test_ss = root.spawn(3)
    anet = build_auction_net(shape, config.hidden, rng=np.random.default_rng(init_ss))
    params = nn.net_params(anet.trunk)
    opt = nn.make_adam(config.learning_rate)
    lam = np.full(n, float(config.lambda_init))
    rho = float(config.rho)

    if test_set is None:
        test_rng = np.random.default_rng(test_ss)
        test_values = value_sampler(test_rng, config.test_samples)
        test_rep = rep_source(test_rng, config.test_samples)
    else:
        test_values, test_rep = test_set
    train_rng = np.random.default_rng(train_ss)

    metrics: list[dict] = []
    bsz = config.batch_size
    for epoch in range(config.epochs):
        epoch_rgt = np.zeros(n)
        epoch_loss = 0.0
        for _ in range(config.batches_per_epoch):
            values = value_sampler(train_rng, bsz)
            rep = rep_source(train_rng, bsz)
            values, rep, _ = _as_batched(shape, values, rep)

            flow_t = _flow_forward(anet, values, rep)
            u_truth = _utilities(flow_t, values)
            revenue = float(flow_t.pay.sum(axis=1).mean())

            mis, vals_s, rep_s, rows, free = _misreport_ascent(
                anet, values, rep, config.misreport_steps, config.misreport_lr)
            flow_m = _flow_forward(anet, mis, rep_s)
            u_mis = _utilities(flow_m, vals_s)[rows, free].reshape(n, bsz).T
            if not np.all(np.isfinite(u_mis)):
                raise RuntimeError(f"training diverged at epoch {epoch}: "
                                   "non-finite misreport utility")
            adv = u_mis - u_truth
            gate = adv > 0                      # (B, N)
            rgt = np.maximum(0.0, adv).mean(axis=0)
            coeff = lam + rho * rgt             # (N,)

            # upstream at the truthful profiles: revenue term plus the
            # subtracted truthful utility inside each gated regret term
            w_t = -(coeff * gate) / bsz         # (B, N)
            d_alloc_t = (-1.0 / bsz) * flow_t.frac[:, :, None] * values \
                + w_t[:, :, None] * (1.0 - flow_t.frac[:, :, None]) * values
            d_frac_t = (-1.0 / bsz) * (flow_t.alloc * values).sum(axis=2) \
                + w_t * (-(flow_t.alloc * values).sum(axis=2))
            g_truth, _ = _flow_backward(anet, flow_t, d_alloc_t, d_frac_t,
                                        need_param_grads=True)

            # upstream at the found misreports (constants for this gradient)
            w_m = (coeff * gate) / bsz          # (B, N)
            w_rows = w_m.T.reshape(-1)          # (N*B,) aligned with the stack
            d_alloc_m, d_frac_m, _ = _own_utility_grad(flow_m, vals_s, rows, free)
            d_alloc_m *= w_rows[:, None, None]
            d_frac_m *= w_rows[:, None]
            g_mis, _ = _flow_backward(anet, flow_m, d_alloc_m, d_frac_m,
                                      need_param_grads=True)

            grads = [tw + tm for tw, tm in
                     zip(nn.flat_param_grads(g_truth), nn.flat_param_grads(g_mis))]
            loss = lagrangian_loss(revenue, rgt, lam, rho)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged at epoch {epoch}: loss is not finite")
            params, opt = nn.optim_step(params, grads, opt)
            anet = AuctionNet(shape, nn.with_params(anet.trunk, params))
            epoch_rgt += rgt
            epoch_loss += loss

        epoch_rgt /= config.batches_per_epoch
        epoch_loss /= config.batches_per_epoch
        test_rev = float(dla_forward(anet, test_values, test_rep)
                         .revenue().mean())
        metrics.append({
            "epoch": epoch,
            "revenue": test_rev,
            "mean_regret": float(epoch_rgt.mean()),
            "max_regret": float(epoch_rgt.max()),
            "loss": epoch_loss,
        })
        if log is not None:
            log(f"epoch {epoch}: revenue {test_rev:.4f} "
                f"mean_regret {epoch_rgt.mean():.5f} loss {epoch_loss:.4f}")
        if (epoch + 1) % config.multiplier_update_period == 0:
            lam = lam + rho * epoch_rgt
            rho = min(rho * config.rho_growth, config.rho_max)
    return anet, metrics


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------

def spa_run(bids) -> tuple[int, float]:
    """Second-price auction for one item: (winner index, price).

    Ties break to the lowest index; a lone bidder pays zero.
    """
    bids = np.asarray(bids, dtype=np.float64)
    if bids.ndim != 1 or bids.size == 0:
        raise ValueError("spa_run needs a nonempty 1-D bid vector")
    winner = int(np.argmax(bids))
    if bids.size == 1:
        return winner, 0.0
    price = float(np.partition(bids, -2)[-2])
    return winner, price


def spa_outcome(bids) -> AuctionOutcome:
    """Per-item second-price auction over an (N, M) or (B, N, M) bid tensor."""
    bids = np.asarray(bids, dtype=np.float64)
    squeezed = bids.ndim == 2
    if squeezed:
        bids = bids[None]
    batch, n, m = bids.shape
    alloc = np.zeros_like(bids)
    pay = np.zeros((batch, n))
    winners = bids.argmax(axis=1)                       # (B, M)
    if n == 1:
        prices = np.zeros((batch, m))
    else:
        prices = np.partition(bids, -2, axis=1)[:, -2, :]
    b_idx = np.repeat(np.arange(batch), m)
    m_idx = np.tile(np.arange(m), batch)
    w_idx = winners.reshape(-1)
    alloc[b_idx, w_idx, m_idx] = 1.0
    np.add.at(pay, (b_idx, w_idx), prices.reshape(-1))
    if squeezed:
        return AuctionOutcome(alloc[0], pay[0])
    return AuctionOutcome(alloc, pay)


def myerson_oracle(n_bidders: int, samples: int, *, seed: int = 0):
    """Monte Carlo revenue of the optimal single-item auction for i.i.d.
    U[0,1] values: second-price over virtual values with reserve 0.5.

    Returns (mean revenue, standard error).
    """
    if n_bidders < 1:
        raise ValueError("need at least one bidder")
    if samples < 10_000:
        raise ValueError("need at least 1e4 samples for a usable oracle")
    rng = np.random.default_rng(seed)
    v = rng.uniform(size=(samples, n_bidders))
    top = v.max(axis=1)
    sold = top >= 0.5
    if n_bidders == 1:
        price = np.full(samples, 0.5)
    else:
        second = np.partition(v, -2, axis=1)[:, -2]
        price = np.maximum(0.5, second)
    revenue = np.where(sold, price, 0.0)
    return float(revenue.mean()), float(revenue.std(ddof=1) / np.sqrt(samples))


# ---------------------------------------------------------------------------
# checkpoint io
# ---------------------------------------------------------------------------

AUCTION_MAGIC = "modelmarket-auction v1"


def auction_net_to_text(anet: AuctionNet) -> str:
    return (f"{AUCTION_MAGIC}\nmarket {anet.shape.n_buyers} {anet.shape.n_items}\n"
            + nn.net_to_text(anet.trunk))


def auction_net_from_text(text: str) -> AuctionNet:
    head, _, body = text.partition("\n")
    if head != AUCTION_MAGIC:
        raise ValueError(f"not a {AUCTION_MAGIC!r} checkpoint")
    shape_line, _, body = body.partition("\n")
    tag, n, m = shape_line.split()
    if tag != "market":
        raise ValueError("malformed auction checkpoint header")
    return AuctionNet(MarketShape(int(n), int(m)), nn.net_from_text(body))


def save_auction_net(anet: AuctionNet, path) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(auction_net_to_text(anet))


def load_auction_net(path) -> AuctionNet:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read()
    try:
        return auction_net_from_text(text)
    except ValueError as exc:
        raise ValueError(f"{exc}: {path}") from None
