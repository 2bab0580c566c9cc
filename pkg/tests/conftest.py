import numpy as np
import pytest

from homer import ModelConfig, random_weights, zero_bias


TOY = dict(n_layers=8, n_heads=4, d_model=64, d_head=16, vocab_size=258, max_chunk=64)


@pytest.fixture(scope="session")
def toy_config():
    return ModelConfig(**TOY)


@pytest.fixture(scope="session")
def toy_weights(toy_config):
    return random_weights(toy_config, seed=0)


@pytest.fixture(scope="session")
def toy_bias(toy_config):
    return zero_bias(toy_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def random_tokens(rng, n, vocab=256):
    return rng.integers(0, vocab, size=n, dtype=np.int64).astype(np.int32)


def make_state(
    n,
    *,
    d_model=8,
    p=0,
    s=0,
    n_layers=0,
    seed=0,
    ctx_prov_start=100,
    chunk_size=None,
):
    """Hand-built ChunkState for unit tests: affix ids 0..p+s-1, context ids
    from ctx_prov_start, archived layers mirroring the current tokens."""
    from homer import ChunkState, LayerKV

    rng = np.random.default_rng(seed)
    c = chunk_size if chunk_size is not None else max(n, 4)
    hidden = rng.standard_normal((n, d_model)).astype(np.float32)
    positions = np.empty(n, dtype=np.float32)
    positions[:p] = np.arange(p, dtype=np.float32)
    positions[p : n - s] = p + np.arange(n - p - s, dtype=np.float32)
    if s:
        positions[n - s :] = c - s + np.arange(s, dtype=np.float32)
    mask = np.zeros(n, dtype=bool)
    mask[:p] = True
    if s:
        mask[n - s :] = True
    prov = np.empty(n, dtype=np.int64)
    prov[:p] = np.arange(p)
    prov[p : n - s] = ctx_prov_start + np.arange(n - p - s)
    if s:
        prov[n - s :] = p + np.arange(s)
    archived = [
        LayerKV(
            layer,
            rng.standard_normal((n, 1, d_model)).astype(np.float32),
            rng.standard_normal((n, 1, d_model)).astype(np.float32),
            positions.copy(),
            prov.copy(),
        )
        for layer in range(n_layers)
    ]
    return ChunkState(
        hidden=hidden,
        position_ids=positions,
        affix_mask=mask,
        provenance=prov,
        p=p,
        s=s,
        archived=archived,
    )
