"""Simulated consortium ledger for the model market.

A fixed delegate set takes turns proposing blocks of signed transactions;
a block commits when at least ceil(2/3) of the delegates re-validate every
transaction and countersign the header. Committed transactions dispatch to
the two contract handlers: the listing registry (model-info sharing) and
the trade/rating log (model trading). There is no networking, no forks,
and no stake dynamics: one logical state machine, one block per round.

Hashing is SHA-256 over canonical JSON (sorted keys, no whitespace).
Signatures are a toy keyed scheme - secret key XOR payload digest - which
gives the simulation tamper evidence, not cryptographic strength; swap
SignatureScheme for anything stronger if needed.

Chain dumps are newline-delimited canonical JSON, one block per line, and
round-trip bit-exactly; verify_chain_file additionally rejects lines that
are not in canonical form.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

GENESIS_HASH = "0" * 64

KIND_MODEL_INFO = "ModelInfo"
KIND_TRADE_RECORD = "TradeRecord"
KIND_REPUTATION_RATING = "ReputationRating"
TX_KINDS = (KIND_MODEL_INFO, KIND_TRADE_RECORD, KIND_REPUTATION_RATING)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=True, allow_nan=False)


def sha256_hex(data: str) -> str:
    return hashlib.sha256(data.encode("ascii")).hexdigest()


class SignatureScheme:
    """Toy keyed-hash signatures over a registry of known identities.

    sign(identity, digest) = secret(identity) XOR digest; verification
    recovers the secret and compares. Any payload or signature byte flip
    breaks verification, which is all the simulation needs.
    """

    def __init__(self, registry_seed: int = 0):
        self._seed = registry_seed
        self._secrets: dict[str, bytes] = {}

    def register(self, identity: str) -> None:
        if identity not in self._secrets:
            material = f"key:{self._seed}:{identity}".encode("ascii")
            self._secrets[identity] = hashlib.sha256(material).digest()

    def known(self, identity: str) -> bool:
        return identity in self._secrets

    def sign(self, identity: str, digest_hex: str) -> str:
        secret = self._secrets[identity]
        digest = bytes.fromhex(digest_hex)
        return bytes(a ^ b for a, b in zip(secret, digest)).hex()

    def verify(self, identity: str, digest_hex: str, signature_hex: str) -> bool:
        secret = self._secrets.get(identity)
        if secret is None:
            return False
        try:
            sig = bytes.fromhex(signature_hex)
            digest = bytes.fromhex(digest_hex)
        except ValueError:
            return False
        if len(sig) != len(secret) or len(digest) != len(secret):
            return False
        return bytes(a ^ b for a, b in zip(sig, digest)) == secret


# ---------------------------------------------------------------------------
# transactions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Transaction:
    kind: str
    payload: Mapping
    author: str
    nonce: int
    signature: str

    def signing_digest(self) -> str:
        body = {"kind": self.kind, "payload": dict(self.payload),
                "author": self.author, "nonce": self.nonce}
        return sha256_hex(canonical_json(body))

    def tx_hash(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "payload": dict(self.payload),
                "author": self.author, "nonce": self.nonce,
                "signature": self.signature}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Transaction":
        return cls(kind=d["kind"], payload=d["payload"], author=d["author"],
                   nonce=d["nonce"], signature=d["signature"])


def make_transaction(scheme: SignatureScheme, author: str, kind: str,
                     payload: Mapping, nonce: int) -> Transaction:
    tx = Transaction(kind=kind, payload=dict(payload), author=author,
                     nonce=nonce, signature="")
    return Transaction(kind=tx.kind, payload=tx.payload, author=author,
                       nonce=nonce,
                       signature=scheme.sign(author, tx.signing_digest()))


_MODEL_INFO_FIELDS = {"owner": str, "task": str, "claimed_accuracy": float,
                      "model_size_kb": int, "ask_price": float, "timestamp": int}
_TRADE_FIELDS = {"buyer": str, "seller": str, "task": str, "price": float,
                 "round": int}
_RATING_FIELDS = {"buyer": str, "seller": str, "round": int, "outcome": str}


def validate_payload(kind: str, payload: Mapping) -> str | None:
    """Schema check; returns a reason string on failure, None when valid."""
    schemas = {KIND_MODEL_INFO: _MODEL_INFO_FIELDS,
               KIND_TRADE_RECORD: _TRADE_FIELDS,
               KIND_REPUTATION_RATING: _RATING_FIELDS}
    if kind not in schemas:
        return f"unknown transaction kind {kind!r}"
    schema = schemas[kind]
    if set(payload) != set(schema):
        return f"payload fields {sorted(payload)} do not match {sorted(schema)}"
    for name, typ in schema.items():
        v = payload[name]
        if typ is float:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                return f"field {name!r} must be numeric"
        elif not isinstance(v, typ) or isinstance(v, bool):
            return f"field {name!r} must be {typ.__name__}"
    if kind == KIND_MODEL_INFO:
        if not 0.0 <= payload["claimed_accuracy"] <= 1.0:
            return "claimed_accuracy must lie in [0,1]"
        if payload["model_size_kb"] <= 0:
            return "model_size_kb must be positive"
        if payload["ask_price"] < 0 or payload["timestamp"] < 0:
            return "ask_price and timestamp must be nonnegative"
    if kind == KIND_TRADE_RECORD and payload["price"] < 0:
        return "price must be nonnegative"
    if kind == KIND_REPUTATION_RATING and payload["outcome"] not in ("positive", "negative"):
        return "outcome must be positive or negative"
    return None


# ---------------------------------------------------------------------------
# blocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Block:
    height: int
    round: int
    prev_hash: str
    tx_root: str
    transactions: tuple[Transaction, ...]
    proposer: str
    quorum_signatures: tuple[tuple[str, str], ...]   # sorted (delegate, sig)

    def header_digest(self) -> str:
        head = {"height": self.height, "round": self.round,
                "prev_hash": self.prev_hash, "tx_root": self.tx_root,
                "proposer": self.proposer}
        return sha256_hex(canonical_json(head))

    def block_hash(self) -> str:
        return sha256_hex(canonical_json(self.to_dict()))

    def to_dict(self) -> dict:
        return {"height": self.height, "round": self.round,
                "prev_hash": self.prev_hash, "tx_root": self.tx_root,
                "transactions": [t.to_dict() for t in self.transactions],
                "proposer": self.proposer,
                "quorum_signatures": [list(q) for q in self.quorum_signatures]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Block":
        return cls(height=d["height"], round=d["round"],
                   prev_hash=d["prev_hash"], tx_root=d["tx_root"],
                   transactions=tuple(Transaction.from_dict(t)
                                      for t in d["transactions"]),
                   proposer=d["proposer"],
                   quorum_signatures=tuple((q[0], q[1])
                                           for q in d["quorum_signatures"]))


def tx_root_hash(transactions: Iterable[Transaction]) -> str:
    return sha256_hex(canonical_json([t.tx_hash() for t in transactions]))


def quorum_threshold(n_delegates: int) -> int:
    return -(-2 * n_delegates // 3)   # ceil(2n/3)


# ---------------------------------------------------------------------------
# contract state
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelListing:
    owner: str
    task: str
    claimed_accuracy: float
    model_size_kb: int
    ask_price: float
    timestamp: int
    signature: str
    height: int   # block that committed it


@dataclass
class ContractState:
    listings: list[ModelListing] = field(default_factory=list)
    trades: list[dict] = field(default_factory=list)
    rating_events: list[dict] = field(default_factory=list)

    def apply(self, tx: Transaction, height: int) -> None:
        p = dict(tx.payload)
        if tx.kind == KIND_MODEL_INFO:
            self.listings.append(ModelListing(
                owner=p["owner"], task=p["task"],
                claimed_accuracy=p["claimed_accuracy"],
                model_size_kb=p["model_size_kb"], ask_price=p["ask_price"],
                timestamp=p["timestamp"], signature=tx.signature,
                height=height))
        elif tx.kind == KIND_TRADE_RECORD:
            p["height"] = height
            self.trades.append(p)
        elif tx.kind == KIND_REPUTATION_RATING:
            p["height"] = height
            self.rating_events.append(p)


# ---------------------------------------------------------------------------
# the ledger state machine
# ---------------------------------------------------------------------------

class Ledger:
    def __init__(self, delegates: list[str], scheme: SignatureScheme | None = None):
        if not delegates:
            raise ValueError("need at least one delegate")
        self.delegates = list(delegates)
        self.scheme = scheme or SignatureScheme()
        for d in self.delegates:
            self.scheme.register(d)
        self.chain: list[Block] = []
        self.mempool: list[Transaction] = []
        self.state = ContractState()
        self._seen_nonces: set[tuple[str, int]] = set()
        self._append_genesis()

    def _append_genesis(self) -> None:
        block = self._assemble(height=0, round_=0, prev=GENESIS_HASH, txs=())
        self.chain.append(block)

    def _assemble(self, height: int, round_: int, prev: str,
                  txs: tuple[Transaction, ...]) -> Block:
        proposer = self.delegates[round_ % len(self.delegates)]
        partial = Block(height=height, round=round_, prev_hash=prev,
                        tx_root=tx_root_hash(txs), transactions=txs,
                        proposer=proposer, quorum_signatures=())
        digest = partial.header_digest()
        sigs = tuple(sorted((d, self.scheme.sign(d, digest))
                            for d in self.delegates))
        return Block(height=partial.height, round=partial.round,
                     prev_hash=partial.prev_hash, tx_root=partial.tx_root,
                     transactions=txs, proposer=proposer,
                     quorum_signatures=sigs)

    # -- transactions --

    def submit_transaction(self, tx: Transaction) -> tuple[bool, str]:
        """Admission check: signature, schema, replay. Accepted txs queue up."""
        if not self.scheme.known(tx.author):
            return False, f"unknown author {tx.author!r}"
        if not self.scheme.verify(tx.author, tx.signing_digest(), tx.signature):
            return False, "signature does not verify against the payload"
        reason = validate_payload(tx.kind, tx.payload)
        if reason is not None:
            return False, reason
        if (tx.author, tx.nonce) in self._seen_nonces or any(
                (t.author, t.nonce) == (tx.author, tx.nonce) for t in self.mempool):
            return False, f"replayed nonce {tx.nonce} for author {tx.author!r}"
        self.mempool.append(tx)
        return True, "accepted"

    def register_identity(self, identity: str) -> None:
        self.scheme.register(identity)

    # -- consensus --

    def _delegate_validates(self, tx: Transaction) -> bool:
        return (self.scheme.verify(tx.author, tx.signing_digest(), tx.signature)
                and validate_payload(tx.kind, tx.payload) is None
                and (tx.author, tx.nonce) not in self._seen_nonces)

    def propose_and_commit(self, round_: int,
                           dissenting: Iterable[str] = ()) -> Block | None:
        """One consensus round. The round's proposer packs the mempool in
        submission order; the block commits iff a 2/3 quorum of delegates
        (minus any dissenting ones, a test hook) re-validates every
        transaction. On quorum failure the block is discarded and the
        transactions stay pending."""
        if not self.mempool:
            return None
        txs = tuple(self.mempool)
        dissent = set(dissenting)
        all_valid = all(self._delegate_validates(t) for t in txs)
        approvals = [d for d in self.delegates
                     if d not in dissent and all_valid]
        if len(approvals) < quorum_threshold(len(self.delegates)):
            return None
        block = self._assemble(height=len(self.chain), round_=round_,
                               prev=self.chain[-1].block_hash(), txs=txs)
        # quorum signatures only from approving delegates
        digest = block.header_digest()
        sigs = tuple(sorted((d, self.scheme.sign(d, digest)) for d in approvals))
        block = Block(height=block.height, round=block.round,
                      prev_hash=block.prev_hash, tx_root=block.tx_root,
                      transactions=txs, proposer=block.proposer,
                      quorum_signatures=sigs)
        self.chain.append(block)
        self.mempool = []
        for tx in txs:
            self._seen_nonces.add((tx.author, tx.nonce))
            self.state.apply(tx, block.height)
        return block

    # -- queries (committed state only) --

    def query_model_listings(self, task: str | None = None) -> list[ModelListing]:
        found = [l for l in self.state.listings
                 if task is None or l.task == task]
        return sorted(found, key=lambda l: (-l.timestamp, -l.height, l.owner))

    def query_reputation_events(self, seller: str | None = None) -> list[dict]:
        return [dict(e) for e in self.state.rating_events
                if seller is None or e["seller"] == seller]

    def query_trades(self) -> list[dict]:
        return [dict(t) for t in self.state.trades]

    # -- serialization --

    def dump_chain(self) -> str:
        return "".join(canonical_json(b.to_dict()) + "\n" for b in self.chain)

    def dump_chain_file(self, path) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(self.dump_chain())


def parse_chain(text: str) -> list[Block]:
    blocks = []
    for line in text.splitlines():
        blocks.append(Block.from_dict(json.loads(line)))
    return blocks


def verify_chain(chain: list[Block], delegates: list[str],
                 scheme: SignatureScheme) -> int | None:
    """Recompute every hash link, root, signature, quorum, and nonce rule.
    Returns None when valid, else the first offending height."""
    seen: set[tuple[str, int]] = set()
    threshold = quorum_threshold(len(delegates))
    for i, block in enumerate(chain):
        if block.height != i:
            return i
        if block.round < 0:
            return i
        prev = GENESIS_HASH if i == 0 else chain[i - 1].block_hash()
        if block.prev_hash != prev:
            return i
        if block.proposer != delegates[block.round % len(delegates)]:
            return i
        if block.tx_root != tx_root_hash(block.transactions):
            return i
        signers = [d for d, _ in block.quorum_signatures]
        if len(set(signers)) != len(signers):
            return i
        if any(d not in delegates for d in signers):
            return i
        if len(signers) < threshold:
            return i
        digest = block.header_digest()
        for d, sig in block.quorum_signatures:
            if not scheme.verify(d, digest, sig):
                return i
        for tx in block.transactions:
            if not scheme.verify(tx.author, tx.signing_digest(), tx.signature):
                return i
            if validate_payload(tx.kind, tx.payload) is not None:
                return i
            if (tx.author, tx.nonce) in seen:
                return i
            seen.add((tx.author, tx.nonce))
    return None


def scheme_for_chain(text: str, registry_seed: int,
                     delegates: Iterable[str]) -> SignatureScheme:
    """Registry able to verify a dumped chain: identity keys derive
    deterministically from (registry_seed, name), so registering the
    delegate set plus every author named in the dump reproduces the keys
    the original run used."""
    scheme = SignatureScheme(registry_seed)
    for d in delegates:
        scheme.register(d)
    for line in text.splitlines():
        try:
            d = json.loads(line)
            for tx in d.get("transactions", []):
                author = tx.get("author")
                if isinstance(author, str):
                    scheme.register(author)
        except ValueError:
            continue
    return scheme


def verify_chain_text(text: str, delegates: list[str],
                      scheme: SignatureScheme) -> int | None:
    """verify_chain over a chain dump, additionally requiring every line to
    be the canonical encoding of its block (tamper evidence for byte-level
    edits that survive JSON parsing)."""
    lines = text.splitlines()
    blocks = []
    for i, line in enumerate(lines):
        try:
            d = json.loads(line)
            block = Block.from_dict(d)
        except (ValueError, KeyError, TypeError, IndexError):
            return i
        if canonical_json(block.to_dict()) != line:
            return i
        blocks.append(block)
    if not blocks:
        return 0
    return verify_chain(blocks, delegates, scheme)


def replay_chain(chain: list[Block], delegates: list[str],
                 scheme: SignatureScheme) -> ContractState:
    """Rebuild contract state from a committed chain (validates first)."""
    bad = verify_chain(chain, delegates, scheme)
    if bad is not None:
        raise ValueError(f"chain invalid at height {bad}")
    state = ContractState()
    for block in chain:
        for tx in block.transactions:
            state.apply(tx, block.height)
    return state
