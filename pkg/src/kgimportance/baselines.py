"""Random-walk importance baselines: PageRank, personalized PageRank, HAR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import KnowledgeGraph
from .signals import InputSignal


class BaselineError(Exception):
    pass


class DegenerateTeleportError(BaselineError):
    pass


@dataclass(frozen=True)
class WalkConfig:
    damping: float = 0.85
    tolerance: float = 1e-10
    max_iterations: int = 200
    har_alpha: float = 0.15
    har_beta: float = 0.15
    har_gamma: float = 0.0
    har_iterations: int = 30

    def __post_init__(self):
        if not 0 < self.damping < 1:
            raise BaselineError("damping must be in (0, 1)")
        if not self.tolerance > 0:
            raise BaselineError("tolerance must be > 0")
        if self.har_gamma != 0:
            raise BaselineError("only fixed uniform relation weights (har_gamma = 0) are supported")


def _adjacency(kg: KnowledgeGraph, mask=None) -> sp.csr_matrix:
    t = kg.triples if mask is None else kg.triples[mask]
    n = kg.num_entities
    return sp.csr_matrix((np.ones(len(t)), (t[:, 0], t[:, 2])), shape=(n, n))


def teleport_vector(kg: KnowledgeGraph, signal: InputSignal) -> np.ndarray:
    v = np.zeros(kg.num_entities)
    v[signal.ids] = signal.vals
    total = v.sum()
    if not total > 0:
        raise DegenerateTeleportError(f"signal {signal.name!r} has no positive mass")
    return v / total


def _power_iteration(kg: KnowledgeGraph, teleport: np.ndarray, config: WalkConfig) -> np.ndarray:
    n = kg.num_entities
    adj = _adjacency(kg)
    out = np.asarray(adj.sum(axis=1)).ravel()
    dangling = out == 0
    inv = np.divide(1.0, out, out=np.zeros(n), where=~dangling)
    trans_t = (sp.diags(inv) @ adj).T.tocsr()
    d = config.damping
    r = np.full(n, 1.0 / n)
    for _ in range(config.max_iterations):
        nxt = d * (trans_t @ r + r[dangling].sum() / n) + (1.0 - d) * teleport
        nxt /= nxt.sum()
        delta = np.abs(nxt - r).sum()
        r = nxt
        if delta < config.tolerance:
            break
    return r


def pagerank(kg: KnowledgeGraph, config: WalkConfig = WalkConfig()) -> np.ndarray:
    """PageRank over the collapsed directed graph; parallel edges add transition weight."""
    n = kg.num_entities
    return _power_iteration(kg, np.full(n, 1.0 / n), config)


def personalized_pagerank(kg: KnowledgeGraph, signal: InputSignal, config: WalkConfig = WalkConfig()) -> np.ndarray:
    """PageRank whose teleport mass follows the signal's normalized values."""
    return _power_iteration(kg, teleport_vector(kg, signal), config)


def _normalized(mat: sp.csr_matrix, axis: int) -> sp.csr_matrix:
    sums = np.asarray(mat.sum(axis=axis)).ravel()
    inv = np.divide(1.0, sums, out=np.zeros_like(sums), where=sums > 0)
    return (sp.diags(inv) @ mat if axis == 1 else mat @ sp.diags(inv)).tocsr()


def har(kg: KnowledgeGraph, signal: InputSignal, config: WalkConfig = WalkConfig()) -> np.ndarray:
    """Hub/authority ranking over per-predicate adjacency with uniform relation weights.

    With A_r the multiplicity adjacency of predicate r (subject -> object):

        authority' = (1 - a) * sum_r w_r * C_r^T hub       + a * v
        hub'       = (1 - b) * sum_r w_r * R_r   authority + b * v

    where C_r is A_r with each row scaled to sum 1 (subject out-degree in r),
    R_r is A_r with each column scaled to sum 1 (object in-degree in r),
    w_r = 1/|P|, and v is the normalized signal. Both vectors start at v,
    are updated from the previous sweep's values, and are L1-normalized
    after every sweep. The score is max(hub, authority) per node.
    """
    v = teleport_vector(kg, signal)
    n = kg.num_entities
    npred = max(kg.num_predicates, 1)
    auth_op = sp.csr_matrix((n, n))
    hub_op = sp.csr_matrix((n, n))
    for r in range(kg.num_predicates):
        a_r = _adjacency(kg, kg.triples[:, 1] == r)
        if a_r.nnz == 0:
            continue
        auth_op = auth_op + _normalized(a_r, axis=1).T / npred
        hub_op = hub_op + _normalized(a_r, axis=0) / npred
    auth_op, hub_op = auth_op.tocsr(), hub_op.tocsr()
    a, b = config.har_alpha, config.har_beta
    hub, auth = v.copy(), v.copy()
    for _ in range(config.har_iterations):
        new_auth = (1 - a) * (auth_op @ hub) + a * v
        new_hub = (1 - b) * (hub_op @ auth) + b * v
        auth = new_auth / new_auth.sum()
        hub = new_hub / new_hub.sum()
    return np.maximum(hub, auth)
