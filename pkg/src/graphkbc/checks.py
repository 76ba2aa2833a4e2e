"""Self-check suites: gradient verification for the ops and the full model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, gradcheck
from .kg import Triplet, build_graph
from .model import GraphModel, PropagationConfig, build_table, loss_absolute
from .nn import BatchNorm, ParamStore


def _op_suite(rng: np.random.Generator, tol: float) -> list[str]:
    x = Tensor(rng.uniform(-1, 1, size=(5, 4)), requires_grad=True)
    A = Tensor(rng.uniform(-1, 1, size=(4, 4)), requires_grad=True)
    store = ParamStore()
    bn = BatchNorm(store, "bn", 4)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, size=4)
    bn.beta.data[:] = rng.uniform(-0.5, 0.5, size=4)

    cases = {
        "affine+relu+l2": lambda: ad.sum_all(ad.rows_norm(ad.relu(ad.affine_rows(x, A)), 2)),
        "tanh+l1": lambda: ad.sum_all(ad.rows_norm(ad.tanh(ad.affine_rows(x, A)), 1)),
        "segment_pool": lambda: ad.sum_all(
            ad.segment_max(x, np.array([0, 1, 0, 1, 0]), 2)
            + ad.segment_mean(x, np.array([0, 1, 0, 1, 0]), 2)
        ),
        "batchnorm": lambda: ad.sum_all(
            ad.rows_norm(bn(x, training=True, update_running=False), 2)
        ),
    }
    failures = []
    params = {"x": x, "A": A, "gamma": bn.gamma, "beta": bn.beta}
    for name, build in cases.items():
        failures += [f"op:{name}: {msg}" for msg in gradcheck(build, params, tol=tol)]
    return failures


def _model_suite(rng: np.random.Generator, tol: float, corrupt_hook: bool) -> list[str]:
    triplets = [
        Triplet(0, 0, 1),
        Triplet(1, 1, 2),
        Triplet(2, 0, 3),
        Triplet(3, 1, 4),
        Triplet(4, 0, 0),
    ]
    graph = build_graph(triplets)
    cfg = PropagationConfig(dim=4, depth=1, mode="stacked",
                            pooling="avg", transition="relation-relu-bn")
    model = GraphModel(5, 2, cfg)
    model.init_params(rng)
    # move gamma/beta off their exact defaults: a batch-of-one group outputs
    # beta verbatim, and beta = 0 would park the relu on its kink
    for name, p in model.store.parameters().items():
        if name.endswith(".gamma"):
            p.data += rng.uniform(0.1, 0.3, size=p.data.shape)
        elif name.endswith(".beta"):
            p.data += rng.uniform(0.2, 0.5, size=p.data.shape)
    table = build_table(graph, 5)
    pos = np.array([[0, 0, 1], [1, 1, 2], [2, 0, 3]])
    neg = np.array([[0, 0, 2], [4, 1, 2], [2, 0, 0]])
    both = np.concatenate([pos, neg])

    def build_loss():
        # one joint scoring pass, as in training minibatches
        scores = model.score_ids(both[:, 0], both[:, 1], both[:, 2], table,
                                 training=True, update_running=False)
        pos_s = ad.gather_rows(scores, np.arange(len(pos)))
        neg_s = ad.gather_rows(scores, np.arange(len(pos), len(both)))
        loss = loss_absolute(pos_s, neg_s, margin=1.0)
        if corrupt_hook:
            # test hook: a wrong-sign contribution the checker must flag
            return loss + ad.sum_all(model.relations * (-2.0)) \
                + Tensor(2.0 * model.relations.data.sum())
        return loss

    failures = gradcheck(build_loss, model.store.parameters(), tol=tol)
    return [f"model: {msg}" for msg in failures]


def gradient_check_report(
    tolerance: float = 1e-4,
    seed: int = 0,
    corrupt_hook: bool = False,
) -> tuple[bool, list[str]]:
    """Run both suites; returns (passed, failure messages)."""
    failures = _op_suite(np.random.default_rng(seed), tolerance)
    failures += _model_suite(np.random.default_rng(seed + 1), tolerance, corrupt_hook)
    return not failures, failures
