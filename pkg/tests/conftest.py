import time
from types import SimpleNamespace

import numpy as np
import pytest

from tpb.autoencoder import PretrainConfig, pretrain
from tpb.bank import embed_corpus, kmeans_cosine, subsample
from tpb.data import default_synth_spec, generate_corpus


@pytest.fixture(scope="session")
def tiny_bundle():
    """3 source cities x 4 nodes x 3 days, 3 motifs; cheap plumbing fixture."""
    spec = default_synth_spec(
        seed=3,
        pattern_count=3,
        nodes_per_city=4,
        source_days=3,
        target_days=4,
        few_shot_days=2,
    )
    return generate_corpus(spec)


@pytest.fixture(scope="session")
def tiny_pipeline(tiny_bundle):
    """Lightly trained encoder + bank shared by forecaster/meta tests."""
    cfg = PretrainConfig(epochs=2, d=32, encoder_layers=1, num_heads=2, seed=3)
    autoenc, scaler, history = pretrain(tiny_bundle.source, cfg)
    embeddings = embed_corpus(tiny_bundle.source, autoenc.encoder, scaler)
    sub = subsample(embeddings, 0.5, np.random.default_rng(0))
    bank, assignment = kmeans_cosine(sub, 3, n_init=3, rng=0)
    return SimpleNamespace(
        bundle=tiny_bundle,
        autoencoder=autoenc,
        scaler=scaler,
        history=history,
        embeddings=embeddings,
        subsampled=sub,
        bank=bank,
        assignment=assignment,
        pretrain_cfg=cfg,
    )


@pytest.fixture(scope="session")
def default_run():
    """The pinned benchmark: 3 source cities x 20 nodes x 14 days, noise 0.1,
    seed 0, 30-epoch pre-training with stock hyperparameters. Expensive; built
    once per session and shared by the pattern-recovery and efficacy checks."""
    spec = default_synth_spec()
    bundle = generate_corpus(spec)
    t0 = time.perf_counter()
    autoenc, scaler, history = pretrain(bundle.source, PretrainConfig())
    pretrain_seconds = time.perf_counter() - t0
    embeddings = embed_corpus(bundle.source, autoenc.encoder, scaler)
    return SimpleNamespace(
        spec=spec,
        bundle=bundle,
        autoencoder=autoenc,
        scaler=scaler,
        history=history,
        embeddings=embeddings,
        pretrain_seconds=pretrain_seconds,
    )
