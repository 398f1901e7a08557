import json
import hashlib
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=40, deadline=None, derandomize=True)
settings.load_profile("ci")

from gnnmpc.graph import chain_topology
from gnnmpc.gnn import load_model, save_model
from gnnmpc.training import TrainConfig, model_for_dataset, train
from gnnmpc.trunk import ChainConfig, InputSignalConfig, generate_dataset

# Bump to invalidate the cached trained model when training semantics change.
_CACHE_TAG = "v3"

TRAIN_SPEC = dict(
    n_trajectories=30,
    seconds_each=10.0,
    data_seed=11,
    model_seed=2,
    n_m=16,
    psi_hidden=(32, 32),
    phi_hidden=(64, 64),
    max_epochs=60,
    batch_size=256,
    patience=8,
)


@pytest.fixture(scope="session")
def desk_plant() -> ChainConfig:
    return ChainConfig()


@pytest.fixture(scope="session")
def desk_signal() -> InputSignalConfig:
    return InputSignalConfig(kind="random-walk", duration=10.0, rng_seed=1)


@pytest.fixture(scope="session")
def trained_model(desk_plant, desk_signal):
    """Model trained on the desk plant, shared by the slow closed-loop
    tests. Cached on disk keyed by the training recipe so repeated local
    runs skip the ~2 minute training."""
    key = hashlib.sha256(
        json.dumps({**TRAIN_SPEC, "tag": _CACHE_TAG}, sort_keys=True).encode()
    ).hexdigest()[:16]
    cache = Path("/tmp/gnnmpc_test_cache")
    cache.mkdir(exist_ok=True)
    path = cache / f"model_{key}.json"
    if path.exists():
        return load_model(path)
    s = TRAIN_SPEC
    _, dataset = generate_dataset(
        desk_plant, desk_signal, s["n_trajectories"], s["seconds_each"], seed=s["data_seed"]
    )
    topo = chain_topology(desk_plant.node_count)
    model = model_for_dataset(
        dataset,
        np.random.default_rng(s["model_seed"]),
        n_m=s["n_m"],
        psi_hidden=s["psi_hidden"],
        phi_hidden=s["phi_hidden"],
    )
    config = TrainConfig(
        max_epochs=s["max_epochs"], batch_size=s["batch_size"], patience=s["patience"], rng_seed=0
    )
    model, _ = train(model, topo, dataset, config)
    save_model(model, path)
    return model
