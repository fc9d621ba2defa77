"""Budget-driven stratified sampling for human annotation.

Within each stratum, unit embeddings are clustered with k-means and ``m``
units are drawn uniformly without replacement from every cluster. The number
of clusters follows from the stratum's share of the annotation budget.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Corpus, MissingEmbeddingError, Stratum, strata

MAX_ITER = 300


class InertiaIncreaseError(AssertionError):
    pass


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float]
    n_iter: int

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = (X ** 2).sum(1)[:, None] - 2.0 * X @ C.T + (C ** 2).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _inertia(X: np.ndarray, C: np.ndarray, labels: np.ndarray) -> float:
    return float(((X - C[labels]) ** 2).sum())


def l2_normalize(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return np.divide(X, norms, out=np.zeros_like(X), where=norms > 0)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # only duplicates of chosen centres remain
            rest = np.setdiff1d(np.arange(n), chosen)
            idx = int(rng.choice(rest))
        chosen.append(idx)
        d2 = np.minimum(d2, _sq_dists(X, X[idx:idx + 1])[:, 0])
    return X[chosen].copy()


def kmeans(vectors: Sequence[Sequence[float]] | np.ndarray, k: int, seed: int = 0, *,
           normalize: bool = True, max_iter: int = MAX_ITER) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Stops when assignments no longer change or after ``max_iter`` rounds.
    An :class:`InertiaIncreaseError` is raised if inertia ever grows, which
    would indicate a bug rather than bad data.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2:
        raise ValueError("vectors must form a 2-D array")
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > X.shape[0]:
        raise ValueError(f"k={k} exceeds the number of vectors ({X.shape[0]})")
    if normalize:
        X = l2_normalize(X)
    rng = np.random.default_rng(seed)
    C = kmeans_plusplus(X, k, rng)
    labels = None
    history: list[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(X, C)
        new = d.argmin(1)
        empty = np.setdiff1d(np.arange(k), np.unique(new))
        for j in empty:
            # re-seed at the point farthest from its centroid, taken from a
            # cluster that keeps at least one member; forced so ties cannot undo it
            sizes = np.bincount(new, minlength=k)
            dist = np.where(sizes[new] > 1, d[np.arange(len(X)), new], -1.0)
            far = int(dist.argmax())
            C[j] = X[far]
            new[far] = j
            d = _sq_dists(X, C)
        inertia = _inertia(X, C, new)
        if history and inertia > history[-1] * (1 + 1e-9) + 1e-12:
            raise InertiaIncreaseError(f"inertia rose from {history[-1]} to {inertia}")
        history.append(inertia)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = X[labels == j]
            if len(members):
                C[j] = members.mean(0)
    final = _inertia(X, C, labels)
    if final > history[-1] * (1 + 1e-9) + 1e-12:
        raise InertiaIncreaseError(f"inertia rose from {history[-1]} to {final}")
    history.append(final)
    return KMeansResult(labels=labels, centroids=C, inertia_history=history, n_iter=it)


def allocate_budget(sizes: Mapping[str, int], budget: int, allocation: str = "proportional",
                    overrides: Mapping[str, int] | None = None) -> dict[str, int]:
    """Split ``budget`` across strata with largest-remainder rounding.

    Strata listed in ``overrides`` get exactly that amount; the rest of the
    budget is shared among the others, proportionally to size or equally.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(sizes)
    if unknown:
        raise ValueError(f"budget overrides name unknown strata: {sorted(unknown)}")
    out = {k: int(v) for k, v in overrides.items()}
    rest = [k for k in sizes if k not in overrides]
    remaining = budget - sum(out.values())
    if remaining < 0:
        raise ValueError("budget overrides exceed the total budget")
    if not rest:
        return out
    if allocation == "proportional":
        weights = np.array([sizes[k] for k in rest], dtype=float)
    elif allocation == "equal":
        weights = np.ones(len(rest))
    else:
        raise ValueError(f"unknown allocation {allocation!r}")
    if weights.sum() == 0:
        weights = np.ones(len(rest))
    quotas = remaining * weights / weights.sum()
    base = np.floor(quotas).astype(int)
    left = remaining - int(base.sum())
    # ties broken by stratum order for determinism
    order = sorted(range(len(rest)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    out.update({k: int(b) for k, b in zip(rest, base)})
    return out


def select_from_cluster(members: Sequence[str], m: int, rng: np.random.Generator) -> list[str]:
    """Uniform draw of ``min(m, len(members))`` members without replacement, in member order."""
    size = min(m, len(members))
    idx = np.sort(rng.choice(len(members), size=size, replace=False))
    return [members[i] for i in idx]


@dataclass
class ClusterPlan:
    centroid: list[float]
    members: list[str]
    selected: list[str]


@dataclass
class StratumPlan:
    key: str
    budget: int
    K: int
    clusters: list[ClusterPlan] = field(default_factory=list)

    @property
    def selected(self) -> list[str]:
        return [u for c in self.clusters for u in c.selected]


@dataclass
class SamplingPlan:
    seed: int
    budget: int
    m: int
    unit_kind: str
    level: str
    allocation: str
    strata_plans: list[StratumPlan] = field(default_factory=list)

    @property
    def selected(self) -> list[str]:
        return [u for s in self.strata_plans for u in s.selected]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed, "budget": self.budget, "m": self.m, "unit_kind": self.unit_kind,
            "level": self.level, "allocation": self.allocation,
            "strata": [
                {"key": s.key, "budget": s.budget, "K": s.K,
                 "clusters": [{"centroid": c.centroid, "members": c.members, "selected": c.selected}
                              for c in s.clusters]}
                for s in self.strata_plans
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SamplingPlan":
        return cls(
            seed=d["seed"], budget=d["budget"], m=d["m"], unit_kind=d["unit_kind"], level=d["level"],
            allocation=d["allocation"],
            strata_plans=[
                StratumPlan(key=s["key"], budget=s["budget"], K=s["K"],
                            clusters=[ClusterPlan(c["centroid"], c["members"], c["selected"])
                                      for c in s["clusters"]])
                for s in d["strata"]
            ],
        )

    def worklist_csv(self) -> str:
        """Selected units as a CSV worklist for the human annotation sheet."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["unit_id", "unit_kind", "stratum", "cluster"])
        for s in self.strata_plans:
            for ci, c in enumerate(s.clusters):
                for u in c.selected:
                    w.writerow([u, self.unit_kind, s.key, ci])
        return buf.getvalue()


def plan_sample(corpus: Corpus, budget: int, m: int = 3, seed: int = 0, *,
                unit_kind: str = "sentence", level: str = "theme",
                allocation: str = "proportional", overrides: Mapping[str, int] | None = None,
                units: Sequence[str] | None = None, normalize: bool = True) -> SamplingPlan:
    """Build a reproducible stratified sampling plan over ``corpus`` embeddings.

    ``units`` restricts the scope (for instance to cited sentences); by
    default every unit of ``unit_kind`` is in scope.
    """
    if m < 1:
        raise ValueError("m must be at least 1")
    if budget < m:
        raise ValueError(f"budget {budget} is smaller than m={m}")
    scope = None if units is None else set(units)
    groups: list[Stratum] = []
    for st in strata(corpus, level=level, unit_kinds=(unit_kind,)):
        ids = st.unit_ids if scope is None else tuple(u for u in st.unit_ids if u in scope)
        if ids:
            groups.append(Stratum(st.theme, st.difficulty, st.unit_kind, ids))
    missing = [u for st in groups for u in st.unit_ids if u not in corpus.embeddings]
    if missing:
        raise MissingEmbeddingError(missing)

    shares = allocate_budget({st.key: len(st) for st in groups}, budget, allocation, overrides)
    plan = SamplingPlan(seed=seed, budget=budget, m=m, unit_kind=unit_kind, level=level,
                        allocation=allocation)
    children = np.random.SeedSequence(seed).spawn(len(groups))
    for st, child in zip(groups, children):
        b = shares[st.key]
        K = min(len(st), max(1, b // m))
        per_cluster = m if b >= m else b
        km_seed, sel_seed = child.spawn(2)
        X = np.array([corpus.embeddings[u].vector for u in st.unit_ids])
        res = kmeans(X, K, seed=np.random.default_rng(km_seed).integers(2**63), normalize=normalize)
        rng = np.random.default_rng(sel_seed)
        sp = StratumPlan(key=st.key, budget=b, K=K)
        for j in range(K):
            members = [u for u, lab in zip(st.unit_ids, res.labels) if lab == j]
            sp.clusters.append(ClusterPlan(
                centroid=[float(v) for v in res.centroids[j]],
                members=members,
                selected=select_from_cluster(members, per_cluster, rng),
            ))
        plan.strata_plans.append(sp)
    return plan
