"""Exact Shapley attribution of a model's positive-class probability to clinical factors."""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from . import numerics as nx
from .data import mask_record

EFFICIENCY_TOL = 1e-9


class TooManyPlayers(ValueError):
    """Exact enumeration was requested for more factors than the configured limit."""


@dataclass
class ShapleyReport:
    factors: list
    values: np.ndarray
    baseline: float
    full: float

    def as_dict(self):
        return {"factors": list(self.factors), "values": [float(v) for v in self.values],
                "baseline": self.baseline, "full": self.full}

    def ranked(self):
        order = np.argsort(-np.abs(self.values), kind="stable")
        return [(self.factors[i], float(self.values[i])) for i in order]


def exact_shapley_values(value_fn, n):
    """Shapley values of an ``n``-player game.

    ``value_fn`` maps an integer array of coalition bitmasks (bit i set means
    player i participates) to their payoffs. Every one of the 2**n coalitions
    is evaluated once.
    """
    masks = np.arange(1 << n, dtype=np.int64)
    payoff = np.asarray(value_fn(masks), dtype=np.float64)
    sizes = np.array([bin(s).count("1") for s in range(1 << n)])
    weight = np.array([factorial(k) * factorial(n - k - 1) / factorial(n) if k < n else 0.0
                       for k in range(n + 1)])
    phi = np.zeros(n)
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = np.sum(weight[sizes[without]] * (payoff[without | bit] - payoff[without]))
    return phi, payoff[0], payoff[-1]


def exact_shapley(model, featurizer, record, factors=None, limit=12, chunk=64):
    """Exact factor attributions for one subject.

    Absent players are masked: their sentence is rendered as unknown and their
    knowledge entry is dropped. The payoff is the positive-class probability.
    """
    schema = featurizer.schema
    factors = list(factors) if factors is not None else list(schema.names)
    n = len(factors)
    if n > limit:
        raise TooManyPlayers(f"{n} factors exceed the exact-enumeration limit of {limit}; group factors first")
    model.eval()
    with nx.no_grad():
        image_states = model.encode_image(record.image_volume[None])

    def value_fn(masks):
        out = np.empty(len(masks))
        for start in range(0, len(masks), chunk):
            part = masks[start:start + chunk]
            recs = [mask_record(record, schema, [f for i, f in enumerate(factors) if not (m >> i) & 1])
                    for m in part]
            out[start:start + len(part)] = model.predict_proba(featurizer.batch(recs), image_states)[:, 1]
        return out

    phi, base, full = exact_shapley_values(value_fn, n)
    report = ShapleyReport(factors, phi, float(base), float(full))
    gap = abs(phi.sum() - (full - base))
    if gap > EFFICIENCY_TOL:
        raise nx.ContractViolation(f"Shapley efficiency violated by {gap:.3e}")
    return report
