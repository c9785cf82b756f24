import numpy as np
import pytest

from gnnpipe import GnnModel, SamplerConfig, build_csr, generate_synthetic, sample_minibatch


@pytest.fixture(scope="session")
def planted_graph():
    return generate_synthetic(1000, 10.0, 2, 16, seed=3)


def random_graph(rng, num_vertices=30, avg_degree=4, f0=5, num_classes=3,
                 self_loops=False):
    """Small random directed graph for kernel tests."""
    num_edges = int(num_vertices * avg_degree)
    src = rng.integers(0, num_vertices, num_edges)
    dst = rng.integers(0, num_vertices, num_edges)
    if not self_loops:
        keep = src != dst
        src, dst = src[keep], dst[keep]
    feats = rng.standard_normal((num_vertices, f0)).astype(np.float32)
    labels = rng.integers(0, num_classes, num_vertices)
    return build_csr(np.stack([src, dst], 1), num_vertices, feats, labels, num_classes)


def random_instance(rng, kind, max_vertices=24, max_dim=8, num_layers=2):
    """Random (graph, model, minibatch, features) tuple for gradient tests."""
    from gnnpipe import gather_features

    n = int(rng.integers(6, max_vertices + 1))
    f0 = int(rng.integers(2, max_dim + 1))
    hidden = int(rng.integers(2, max_dim + 1))
    classes = int(rng.integers(2, 5))
    g = random_graph(rng, num_vertices=n, avg_degree=3, f0=f0, num_classes=classes)
    dims = [f0] + [hidden] * (num_layers - 1) + [classes]
    model = GnnModel.create(kind, dims, seed=int(rng.integers(0, 2**31)))
    batch_size = int(rng.integers(2, min(8, n) + 1))
    targets = rng.choice(n, size=batch_size, replace=False)
    fanouts = [int(rng.integers(1, 4)) for _ in range(num_layers)]
    cfg = SamplerConfig(fanouts, batch_size, seed=int(rng.integers(0, 2**31)))
    batch = sample_minibatch(g, targets, cfg, iteration_nonce=int(rng.integers(0, 100)))
    x0, _ = gather_features(g, batch.layer_vertices[0])
    return g, model, batch, x0
