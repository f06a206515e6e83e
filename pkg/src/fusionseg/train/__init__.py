"""Training stages, optimizers and the bi-level hypergradient harness."""
