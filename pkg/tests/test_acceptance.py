"""Acceptance suite: one test per criterion, one PASS/FAIL line each.

Run with `pytest tests/test_acceptance.py -v -s`. The learned-auction
criteria train real mechanisms (a couple of minutes total); everything is
seeded, so reruns are bit-for-bit repeatable.
"""

import contextlib
import json
import hashlib
import time

import numpy as np
import pytest
from scipy import stats

from modelmarket import auction, cli, kernels, ledger, marketsim as ms, nn
from modelmarket import reputation as rep
from modelmarket.auction import MarketShape, TrainConfig
from modelmarket.marketsim import ReliabilityGridConfig, RevenueExperimentConfig


@contextlib.contextmanager
def criterion(number, description):
    try:
        yield
    except BaseException:
        print(f"[FAIL] criterion {number}: {description}")
        raise
    print(f"[PASS] criterion {number}: {description}")


# ---------------------------------------------------------------------------
# shared trained mechanisms (session fixtures so criteria 2/4/5 share work)
# ---------------------------------------------------------------------------

MYERSON_TRAIN = TrainConfig(
    epochs=140, batch_size=128, batches_per_epoch=30, learning_rate=1e-3,
    misreport_steps=25, misreport_lr=0.1, lambda_init=5.0, rho=1.0,
    rho_growth=1.2, rho_max=5000.0, multiplier_update_period=2,
    hidden=(32, 32), seed=0, test_samples=4096)

REVENUE_CFG = RevenueExperimentConfig(
    n_buyers=3, n_items=3, n_poisoned=1, poison_strength=0.5,
    permitted_reputation=0.5, master_seed=0,
    train=TrainConfig(epochs=50, batch_size=128, batches_per_epoch=20,
                      learning_rate=1e-3, misreport_steps=25, misreport_lr=0.1,
                      lambda_init=5.0, rho=1.0, rho_growth=1.2, rho_max=5000.0,
                      multiplier_update_period=2, hidden=(24, 24), seed=0,
                      test_samples=4096))


@pytest.fixture(scope="session")
def trained_1x2():
    shape = MarketShape(2, 1)
    sampler = lambda rng, n: auction.uniform_value_sampler(rng, n, shape)
    reps = lambda rng, n: np.ones((n, 1))
    anet, metrics = auction.train_dla(shape, sampler, reps, MYERSON_TRAIN)
    return anet, metrics


@pytest.fixture(scope="session")
def revenue_series():
    return ms.run_revenue_experiment(REVENUE_CFG)


# ---------------------------------------------------------------------------
# 1. gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_1_gradients():
    desc = "backprop matches central differences on 50 random nets (<1e-4, <10s)"
    with criterion(1, desc):
        kernels.warmup()
        rng = np.random.default_rng(314159)
        t0 = time.time()
        worst = 0.0
        for _ in range(50):
            depth = int(rng.integers(2, 4))
            dims = [int(rng.integers(2, 17)) for _ in range(depth + 1)]
            # tanh hidden layers: the architecture every trained net uses,
            # and smooth everywhere so central differences are well posed
            net = nn.init_net(dims, rng=rng)
            x = rng.normal(size=dims[0])
            coeffs = rng.normal(size=dims[-1])
            _, cache = nn.forward_cache(net, x)
            grads, gx = nn.backward(net, cache, coeffs)
            flat = nn.flat_param_grads(grads)

            h = 1e-5
            params = nn.net_params(net)

            def loss(ps, xv):
                return float(np.sum(coeffs * nn.forward(nn.with_params(net, ps), xv)))

            for k, p in enumerate(params):
                fd = np.zeros_like(p)
                for idx in range(p.size):
                    bumped = [q.copy() for q in params]
                    bumped[k].ravel()[idx] += h
                    up = loss(bumped, x)
                    bumped[k].ravel()[idx] -= 2 * h
                    down = loss(bumped, x)
                    fd.ravel()[idx] = (up - down) / (2 * h)
                err = np.abs(flat[k] - fd) / np.maximum(
                    1e-3, np.maximum(np.abs(flat[k]), np.abs(fd)))
                worst = max(worst, float(err.max()))
            fdx = np.zeros_like(x)
            for idx in range(x.size):
                xp = x.copy()
                xp[idx] += h
                up = loss(params, xp)
                xp[idx] -= 2 * h
                down = loss(params, xp)
                fdx[idx] = (up - down) / (2 * h)
            err = np.abs(gx - fdx) / np.maximum(1e-3, np.maximum(np.abs(gx), np.abs(fdx)))
            worst = max(worst, float(err.max()))
        elapsed = time.time() - t0
        print(f"    max relative error {worst:.2e}, elapsed {elapsed:.1f}s")
        assert worst < 1e-4
        assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. optimal-auction recovery (1 item, 2 bidders, U[0,1])
# ---------------------------------------------------------------------------

def test_criterion_2_myerson_recovery(trained_1x2):
    desc = "trained mechanism within +-0.015 of the Myerson oracle, regret < 0.005"
    with criterion(2, desc):
        anet, _ = trained_1x2
        oracle, se = auction.myerson_oracle(2, 1_000_000, seed=7)
        rng = np.random.default_rng(987)
        test_v = rng.uniform(size=(16384, 2, 1))
        test_r = np.ones((16384, 1))
        revenue = float(auction.dla_forward(anet, test_v, test_r).revenue().mean())
        regret = auction.estimate_regret(anet, test_v[:4096], test_r[:4096],
                                         steps=200, lr=0.05)
        print(f"    revenue {revenue:.4f} vs oracle {oracle:.4f} (+-{se:.4f}), "
              f"mean regret {regret.mean():.5f}")
        assert abs(revenue - oracle) <= 0.015
        assert regret.mean() < 0.005


# ---------------------------------------------------------------------------
# 3. SPA sanity
# ---------------------------------------------------------------------------

def test_criterion_3_spa_revenue():
    desc = "Monte Carlo SPA revenue for 3 U[0,1] bidders = 0.500 +- 0.002"
    with criterion(3, desc):
        rng = np.random.default_rng(555)
        bids = rng.uniform(size=(1_000_000, 3, 1))
        revenue = float(auction.spa_outcome(bids).revenue().mean())
        print(f"    revenue {revenue:.4f} (closed form (n-1)/(n+1) = 0.5)")
        assert abs(revenue - 0.5) <= 0.002


# ---------------------------------------------------------------------------
# 4. revenue-curve ordering on the 3x3 market
# ---------------------------------------------------------------------------

def test_criterion_4_revenue_ordering(revenue_series):
    desc = "converged DLA >= SPA and >= DLA-LR on shared draws, regret < 0.01"
    with criterion(4, desc):
        series = revenue_series
        tail = 5   # converged revenue = mean over the final epochs

        def conv(mech):
            return float(np.mean([r["revenue"] for r in series[mech][-tail:]]))

        dla, dla_lr = conv("DLA"), conv("DLA-LR")
        spa, spa_u = conv("SPA"), conv("SPA-unfiltered")
        rgt_dla = ms.final_regret(REVENUE_CFG, series["nets"]["DLA"], "DLA")
        rgt_lr = ms.final_regret(REVENUE_CFG, series["nets"]["DLA-LR"], "DLA-LR")
        print(f"    DLA {dla:.4f} | DLA-LR {dla_lr:.4f} | SPA {spa:.4f} | "
              f"SPA-unfiltered {spa_u:.4f}")
        print(f"    final regret: DLA {rgt_dla:.5f}, DLA-LR {rgt_lr:.5f}")
        assert dla >= spa
        assert dla >= dla_lr
        assert dla_lr >= spa_u      # each mechanism beats its own baseline
        assert rgt_dla < 0.01 and rgt_lr < 0.01


# ---------------------------------------------------------------------------
# 5. individual rationality
# ---------------------------------------------------------------------------

def test_criterion_5_individual_rationality(trained_1x2):
    desc = "utility at the reported bid >= -1e-6 over 1e4 random profiles"
    with criterion(5, desc):
        anet, _ = trained_1x2
        rng = np.random.default_rng(2468)
        bids = rng.uniform(size=(10_000, 2, 1))
        reps = rng.uniform(size=(10_000, 1))
        out = auction.dla_forward(anet, bids, reps)
        utility = (out.allocation * bids).sum(axis=2) - out.payments
        print(f"    minimum truthful utility {utility.min():.2e}")
        assert utility.min() >= -1e-6


# ---------------------------------------------------------------------------
# 6. reliability trends
# ---------------------------------------------------------------------------

def test_criterion_6_reliability_trends():
    desc = "accuracy falls with attack strength and rises with the reputation floor"
    with criterion(6, desc):
        grid = ReliabilityGridConfig(seeds=20, rounds=20, master_seed=0)
        rows = ms.run_reliability_experiment(grid)

        def cell(a, p):
            return np.array([r["mean_accuracy"] for r in rows
                             if r["attack_strength"] == a
                             and r["permitted_reputation"] == p])

        strengths = grid.attack_strengths
        floors = grid.permitted_reputations
        # seed-mean accuracy is monotone along both acceptance axes
        for p in floors:
            means = [cell(a, p).mean() for a in strengths]
            assert all(x >= y for x, y in zip(means, means[1:])), \
                f"attack trend broken at floor {p}: {means}"
        thr_means = [cell(0.5, p).mean() for p in floors]
        assert all(x <= y for x, y in zip(thr_means, thr_means[1:])), \
            f"floor trend broken: {thr_means}"
        # one-sided paired tests at the 5% level
        t_attack = stats.ttest_rel(cell(strengths[0], floors[0]),
                                   cell(strengths[-1], floors[0]),
                                   alternative="greater")
        t_floor = stats.ttest_rel(cell(0.5, floors[-1]), cell(0.5, floors[0]),
                                  alternative="greater")
        print(f"    attack trend p={t_attack.pvalue:.2e}, "
              f"floor trend p={t_floor.pvalue:.2e}")
        for p in floors:
            t = stats.ttest_rel(cell(strengths[0], p), cell(strengths[-1], p),
                                alternative="greater")
            print(f"    attack effect at floor {p}: "
                  f"{cell(strengths[0], p).mean():.3f} -> "
                  f"{cell(strengths[-1], p).mean():.3f} (p={t.pvalue:.2e})")
        assert t_attack.pvalue < 0.05
        assert t_floor.pvalue < 0.05


# ---------------------------------------------------------------------------
# 7. ledger integrity
# ---------------------------------------------------------------------------

def _experiment_chain(n_blocks=50):
    lg = ledger.Ledger(list(ms.DELEGATES), ledger.SignatureScheme(42))
    for who in ("alice", "bob", "carol"):
        lg.register_identity(who)
    rng = np.random.default_rng(42)
    nonce = 0
    authors = ("alice", "bob", "carol")
    while len(lg.chain) < n_blocks:
        r = len(lg.chain)
        for _ in range(int(rng.integers(1, 4))):
            author = authors[int(rng.integers(3))]
            if rng.uniform() < 0.5:
                payload = {"owner": author, "task": "signs",
                           "claimed_accuracy": float(np.round(rng.uniform(), 3)),
                           "model_size_kb": int(rng.integers(10, 300)),
                           "ask_price": float(np.round(rng.uniform(), 3)),
                           "timestamp": r}
                kind = ledger.KIND_MODEL_INFO
            else:
                payload = {"buyer": author, "seller": "alice", "round": r,
                           "outcome": "positive" if rng.uniform() < 0.6 else "negative"}
                kind = ledger.KIND_REPUTATION_RATING
            lg.submit_transaction(ledger.make_transaction(
                lg.scheme, author, kind, payload, nonce))
            nonce += 1
        lg.propose_and_commit(r)
    return lg


def test_criterion_7_ledger_integrity():
    desc = "1000/1000 single-byte mutations detected; replay matches live table"
    with criterion(7, desc):
        lg = _experiment_chain(50)
        dump = lg.dump_chain().encode("ascii")
        assert ledger.verify_chain_text(dump.decode("ascii"),
                                        list(ms.DELEGATES), lg.scheme) is None
        rng = np.random.default_rng(99)
        detected = 0
        for _ in range(1000):
            pos = int(rng.integers(len(dump)))
            old = dump[pos]
            new = old
            while new == old:
                new = int(rng.integers(9, 127))   # printable-ish ASCII + tab
            mutated = dump[:pos] + bytes([new]) + dump[pos + 1:]
            verdict = ledger.verify_chain_text(
                mutated.decode("ascii", errors="replace"),
                list(ms.DELEGATES), lg.scheme)
            detected += verdict is not None
        print(f"    detected {detected}/1000 mutations "
              f"on a {len(lg.chain)}-block chain")
        assert detected == 1000

        cfg = ms.ScenarioConfig(rounds=12, attack_strengths=(0.5, 0.0, 0.0),
                                master_seed=17)
        env, _ = ms.run_scenario(cfg)
        live = env.final_reputation_table(now=cfg.rounds)
        replayed = ms.reputation_table_from_chain(
            env.ledger.chain, list(ms.DELEGATES), env.ledger.scheme, cfg,
            now=cfg.rounds)
        assert replayed == live
        # and through the serialized form
        blocks = ledger.parse_chain(env.ledger.dump_chain())
        replayed2 = ms.reputation_table_from_chain(
            blocks, list(ms.DELEGATES), env.ledger.scheme, cfg, now=cfg.rounds)
        assert replayed2 == live


# ---------------------------------------------------------------------------
# 8. reputation formulas
# ---------------------------------------------------------------------------

def test_criterion_8_reputation_formulas():
    desc = "direct/referenced/integrated formulas exact on hand-computed cases"
    with criterion(8, desc):
        events = [rep.InteractionEvent("b", "s", t, rep.POSITIVE) for t in (1, 2, 3)]
        events.append(rep.InteractionEvent("b", "s", 4, rep.NEGATIVE))
        assert rep.direct_reputation(events, window=10, now=5) == 0.75
        assert rep.referenced_reputation([0.4, 0.6]) == 0.5
        assert rep.referenced_reputation([1.0, 0.0, 0.5, 0.5]) == 0.5
        w = rep.AggregationWeights(0.6, 0.25, 0.15)
        assert rep.integrated_reputation(1.0, 0.8, 0.5, w).value == pytest.approx(0.875)
        assert rep.integrated_reputation(0.9, None, None, w).value == pytest.approx(0.9)
        assert rep.integrated_reputation(None, 0.4, 0.8, w).value == pytest.approx(
            (0.25 * 0.4 + 0.15 * 0.8) / 0.4)
        assert rep.integrated_reputation(None, None, None, w).value == 0.5
        print("    direct=0.75, referenced means, renormalized sums, prior=0.5")


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------

CLI_CFG = """
seed = 3
market.n_buyers = 2
market.n_items = 1
market.permitted_reputation = 1.0
train.epochs = 4
train.batches_per_epoch = 4
train.batch_size = 32
train.hidden = 8
train.misreport_steps = 5
train.test_samples = 128
reliability.seeds = 3
reliability.rounds = 6
reliability.attack_strengths = 0,0.5
reliability.permitted_reputations = 0,0.8
"""


def test_criterion_9_cli_determinism(tmp_path):
    desc = "reruns with the same manifest emit byte-identical CSVs"
    with criterion(9, desc):
        cfg = tmp_path / "scenario.cfg"
        cfg.write_text(CLI_CFG)

        def digest(path):
            return hashlib.sha256(path.read_bytes()).hexdigest()

        pairs = []
        for sub, outfile in (("train-auction", "train.csv"),
                             ("revenue", "revenue.csv"),
                             ("reliability", "reliability.csv")):
            d1, d2 = tmp_path / f"{sub}-1", tmp_path / f"{sub}-2"
            assert cli.main([sub, "--config", str(cfg), "--out", str(d1),
                             "--quiet"]) == 0
            assert cli.main([sub, "--config", str(cfg), "--out", str(d2),
                             "--quiet"]) == 0
            h1, h2 = digest(d1 / outfile), digest(d2 / outfile)
            pairs.append((outfile, h1 == h2))
            assert h1 == h2, f"{outfile} differs between reruns"
            m1 = json.loads((d1 / "manifest.json").read_text())
            m2 = json.loads((d2 / "manifest.json").read_text())
            m1.pop("out_dir"), m2.pop("out_dir")
            assert m1 == m2
        print("    " + ", ".join(f"{name} stable" for name, ok in pairs))
