"""Shared fixtures: tiny system configs and a one-call scenario runner."""

import dataclasses

import pytest

from ringshard import core, crypto, scenario


def make_config(shards: int = 3, replicas: int = 4, faults: int = 1,
                **kw) -> core.SystemConfig:
    return core.SystemConfig(shards=shards, replicas=replicas, faults=faults, **kw)


def make_keystore(config: core.SystemConfig, clients: int = 2,
                  scheme: str = "hash") -> crypto.KeyStore:
    return crypto.KeyStore(config, clients, scheme=scheme)


def signed_txn(ks: crypto.KeyStore, client: int = 0, counter: int = 0,
               writes=(), reads=()) -> core.Transaction:
    writes = tuple(writes)
    involved = tuple(sorted({w.shard for w in writes}
                            | {r.shard for r in reads}))
    txn = core.Transaction(client=client, counter=counter, involved=involved,
                           writes=writes, reads=tuple(reads))
    return crypto.sign_txn(ks, txn)


def make_batch(ks: crypto.KeyStore, specs, client: int = 0,
               start_counter: int = 0) -> core.Batch:
    """specs: list of write lists, one per txn; each write is (shard, key, value)."""
    txns = []
    for i, writes in enumerate(specs):
        ops = tuple(core.WriteOp(shard=s, key=k, value=v) for s, k, v in writes)
        txns.append(signed_txn(ks, client=client, counter=start_counter + i,
                               writes=ops))
    return core.Batch(txns=tuple(txns))


def run_scenario(**overrides):
    """Build and run a small scenario; returns (result, sim, spec, registry, metrics)."""
    fields = dict(name="test", shards=3, replicas=4, faults=1, txns=40,
                  batch_size=10, clients=2, cross_pct=0.0, seed=1,
                  trace="counts", deadline_s=120)
    fields.update(overrides)
    return scenario.run_one(scenario.Scenario(**fields))


@pytest.fixture
def config():
    return make_config()


@pytest.fixture
def keystore(config):
    return make_keystore(config)
