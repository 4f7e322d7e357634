"""CLI tests: exit codes, output schemas, byte-identical reruns."""

import hashlib
import json

import pytest

from modelmarket import auction, cli, nn
from modelmarket.cli import EXIT_BAD_CHAIN, EXIT_CONFIG, EXIT_OK

TINY = """
seed = 7
market.n_buyers = 2
market.n_items = 1
market.permitted_reputation = 1.0
train.epochs = 3
train.batches_per_epoch = 3
train.batch_size = 32
train.hidden = 8
train.misreport_steps = 4
train.test_samples = 128
reliability.seeds = 2
reliability.rounds = 5
reliability.attack_strengths = 0,1.0
reliability.permitted_reputations = 0,1.0
reliability.n_malicious = 1
"""

GRID_3 = """
seed = 5
market.n_buyers = 3
market.n_items = 3
train.epochs = 2
train.batches_per_epoch = 2
train.batch_size = 16
train.hidden = 6
train.misreport_steps = 3
train.test_samples = 64
reliability.seeds = 2
reliability.rounds = 5
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return p


@pytest.fixture
def grid_cfg(tmp_path):
    p = tmp_path / "grid.cfg"
    p.write_text(GRID_3)
    return p


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# config errors
# ---------------------------------------------------------------------------

def test_missing_required_key_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("market.n_items = 3\n")
    code = run("train-auction", "--config", p, "--out", tmp_path / "o")
    assert code == EXIT_CONFIG
    assert "market.n_buyers" in capsys.readouterr().err


def test_unknown_key_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("market.n_buyers = 2\nmarket.n_items = 1\nmarket.bogus = 3\n")
    code = run("revenue", "--config", p, "--out", tmp_path / "o")
    assert code == EXIT_CONFIG
    assert "market.bogus" in capsys.readouterr().err


def test_untypeable_value_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("market.n_buyers = two\nmarket.n_items = 1\n")
    code = run("train-auction", "--config", p, "--out", tmp_path / "o")
    assert code == EXIT_CONFIG
    assert "market.n_buyers" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train-auction
# ---------------------------------------------------------------------------

def test_train_auction_outputs_and_roundtrip(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    assert run("train-auction", "--config", tiny_cfg, "--out", out,
               "--quiet") == EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["master_seed"] == 7
    assert manifest["config_sha256"] == hashlib.sha256(
        tiny_cfg.read_bytes()).hexdigest()
    ckpt = auction.load_auction_net(out / "auction.ckpt")
    auction.save_auction_net(ckpt, out / "again.ckpt")
    assert (out / "auction.ckpt").read_bytes() == (out / "again.ckpt").read_bytes()
    header = (out / "train.csv").read_text().splitlines()[0]
    assert header == "epoch,revenue,mean_regret,max_regret,loss"


def test_train_auction_rerun_byte_identical(tiny_cfg, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run("train-auction", "--config", tiny_cfg, "--out", out1, "--quiet") == EXIT_OK
    assert run("train-auction", "--config", tiny_cfg, "--out", out2, "--quiet") == EXIT_OK
    assert (out1 / "train.csv").read_bytes() == (out2 / "train.csv").read_bytes()
    assert (out1 / "auction.ckpt").read_bytes() == (out2 / "auction.ckpt").read_bytes()


def test_seed_flag_overrides_config(tiny_cfg, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run("train-auction", "--config", tiny_cfg, "--out", out1, "--quiet",
               "--seed", 99) == EXIT_OK
    assert run("train-auction", "--config", tiny_cfg, "--out", out2, "--quiet") == EXIT_OK
    m1 = json.loads((out1 / "manifest.json").read_text())
    assert m1["master_seed"] == 99
    assert (out1 / "train.csv").read_bytes() != (out2 / "train.csv").read_bytes()


# ---------------------------------------------------------------------------
# revenue
# ---------------------------------------------------------------------------

def test_revenue_csv_schema(tiny_cfg, tmp_path):
    out = tmp_path / "rev"
    assert run("revenue", "--config", tiny_cfg, "--out", out, "--quiet") == EXIT_OK
    lines = (out / "revenue.csv").read_text().splitlines()
    assert lines[0] == "epoch,mechanism,revenue,mean_regret"
    body = [l.split(",") for l in lines[1:]]
    assert len(body) == 3 * 4      # epochs x mechanisms
    assert all(len(cells) == 4 and all(c != "" for c in cells) for cells in body)
    spa_revs = {cells[2] for cells in body if cells[1] == "SPA"}
    assert len(spa_revs) == 1      # flat baseline
    mechs = {cells[1] for cells in body}
    assert mechs == {"DLA", "DLA-LR", "SPA", "SPA-unfiltered"}


# ---------------------------------------------------------------------------
# reliability
# ---------------------------------------------------------------------------

def test_reliability_rows_and_empty_cells(tiny_cfg, tmp_path):
    out = tmp_path / "rel"
    assert run("reliability", "--config", tiny_cfg, "--out", out, "--quiet") == EXIT_OK
    lines = (out / "reliability.csv").read_text().splitlines()
    assert lines[0] == "attack_strength,permitted_reputation,seed,mean_accuracy,trades_executed"
    body = [l.split(",") for l in lines[1:]]
    assert len(body) == 2 * 2 * 2
    for cells in body:
        if cells[4] == "0":
            assert cells[3] == ""    # empty-marked, not zero
        else:
            assert cells[3] != ""


def test_reliability_rerun_identical_hash(grid_cfg, tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert run("reliability", "--config", grid_cfg, "--out", out1, "--quiet") == EXIT_OK
    assert run("reliability", "--config", grid_cfg, "--out", out2, "--quiet") == EXIT_OK
    h1 = hashlib.sha256((out1 / "reliability.csv").read_bytes()).hexdigest()
    h2 = hashlib.sha256((out2 / "reliability.csv").read_bytes()).hexdigest()
    assert h1 == h2


def test_reliability_jobs_flag_matches_serial(grid_cfg, tmp_path):
    out1, out2 = tmp_path / "serial", tmp_path / "par"
    assert run("reliability", "--config", grid_cfg, "--out", out1, "--quiet") == EXIT_OK
    assert run("reliability", "--config", grid_cfg, "--out", out2, "--quiet",
               "--jobs", 2) == EXIT_OK
    assert (out1 / "reliability.csv").read_bytes() == (out2 / "reliability.csv").read_bytes()


# ---------------------------------------------------------------------------
# verify-chain / replay
# ---------------------------------------------------------------------------

def test_verify_and_replay_flow(grid_cfg, tmp_path, capsys):
    out = tmp_path / "dump"
    assert run("reliability", "--config", grid_cfg, "--out", out, "--quiet",
               "--dump-chains") == EXIT_OK
    cells = json.loads((out / "cells.json").read_text())
    entry = cells[0]
    chain = out / entry["file"]
    assert run("verify-chain", "--in", chain,
               "--registry-seed", entry["scenario_seed"]) == EXIT_OK
    # tamper -> exit 4
    data = bytearray(chain.read_bytes())
    data[len(data) // 2] ^= 0x01
    bad = tmp_path / "bad.ndjson"
    bad.write_bytes(bytes(data))
    assert run("verify-chain", "--in", bad,
               "--registry-seed", entry["scenario_seed"]) == EXIT_BAD_CHAIN
    # replay writes the reputation table
    rep_out = tmp_path / "rep"
    assert run("replay", "--config", grid_cfg, "--out", rep_out, "--in", chain,
               "--registry-seed", entry["scenario_seed"], "--quiet") == EXIT_OK
    lines = (rep_out / "reputation.csv").read_text().splitlines()
    assert lines[0] == "seller,reputation"
    assert len(lines) == 1 + 3
