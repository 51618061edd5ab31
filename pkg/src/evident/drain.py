"""Fixed-depth parse-tree log template miner (Drain).

Lines are whitespace-tokenized, numeric-looking tokens are masked to ``<*>``
up front, and each line is routed through a tree keyed first on token count
and then on its leading tokens. Leaves hold clusters; a line joins the most
similar cluster in its leaf when the positional similarity reaches
``sim_threshold``, otherwise it founds a new cluster.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

WILDCARD = "<*>"

_NUMERIC_TOKEN = re.compile(
    r"^[(\[]?[-+]?(?:0x[0-9a-fA-F]+|\d+(?:[.:,/_-]\d+)*)[)\]%:,;.]*$"
)
_HAS_DIGIT = re.compile(r"\d")


def mask_token(token: str) -> str:
    return WILDCARD if _NUMERIC_TOKEN.match(token) else token


def tokenize(line: str) -> list[str]:
    return [mask_token(tok) for tok in line.split()]


@dataclass
class LogCluster:
    cluster_id: int
    template: list[str]
    size: int = 0

    @property
    def template_str(self) -> str:
        return " ".join(self.template)


@dataclass
class _Node:
    children: dict[str, "_Node"] = field(default_factory=dict)
    clusters: list[LogCluster] = field(default_factory=list)


def template_matches(template: str, line: str) -> bool:
    """True if ``line`` fits ``template`` with ``<*>`` matching exactly one token."""
    t_tokens = template.split()
    l_tokens = line.split()
    if len(t_tokens) != len(l_tokens):
        return False
    return all(t == WILDCARD or t == l for t, l in zip(t_tokens, l_tokens))


class DrainTemplateMiner(BaseEstimator, TransformerMixin):
    """Cluster log lines into templates.

    Parameters
    ----------
    depth : int
        Tree depth counting the root, the length layer and the leaf layer, so
        ``depth - 3`` leading tokens are used for routing. Must be >= 3.
    sim_threshold : float
        Minimum fraction of positionally equal tokens for a line to join a cluster.
    max_children : int
        Maximum fan-out of an internal node before tokens fall into ``<*>``.

    Attributes
    ----------
    clusters_ : list of LogCluster
        Clusters in creation order.
    labels_ : list of int
        Cluster id of each line seen by :meth:`fit`.
    """

    def __init__(self, depth: int = 4, sim_threshold: float = 0.4, max_children: int = 100):
        self.depth = depth
        self.sim_threshold = sim_threshold
        self.max_children = max_children

    def fit(self, X, y=None):
        if self.depth < 3:
            raise ValueError(f"depth must be >= 3, got {self.depth}")
        if self.max_children < 2:
            raise ValueError(f"max_children must be >= 2, got {self.max_children}")
        self._root = _Node()
        self.clusters_: list[LogCluster] = []
        self.labels_ = [self._add(line) for line in X]
        return self

    def partial_fit(self, X, y=None):
        if not hasattr(self, "clusters_"):
            return self.fit(X)
        self.labels_ = self.labels_ + [self._add(line) for line in X]
        return self

    def predict(self, X) -> list[int]:
        """Cluster id for each line, or -1 when no cluster is similar enough."""
        check_is_fitted(self, "clusters_")
        out = []
        for line in X:
            tokens = tokenize(line)
            cluster = self._match(self._leaf(tokens), tokens)
            out.append(-1 if cluster is None else cluster.cluster_id)
        return out

    def transform(self, X) -> list[str | None]:
        """Final template of the matching cluster for each line."""
        return [
            None if cid < 0 else self.clusters_[cid].template_str for cid in self.predict(X)
        ]

    @property
    def templates_(self) -> list[tuple[str, int]]:
        check_is_fitted(self, "clusters_")
        return [(c.template_str, c.size) for c in self.clusters_]

    # tree plumbing

    @property
    def _token_layers(self) -> int:
        return self.depth - 3

    def _leaf(self, tokens: list[str]) -> _Node | None:
        node = self._root.children.get(str(len(tokens)))
        if node is None:
            return None
        for token in tokens[: self._token_layers]:
            nxt = node.children.get(token)
            if nxt is None:
                nxt = node.children.get(WILDCARD)
            if nxt is None:
                return None
            node = nxt
        return node

    def _add(self, line: str) -> int:
        tokens = tokenize(line)
        leaf = self._leaf(tokens)
        cluster = self._match(leaf, tokens) if leaf is not None else None
        if cluster is None:
            cluster = LogCluster(cluster_id=len(self.clusters_), template=list(tokens))
            self.clusters_.append(cluster)
            self._insert(cluster)
        else:
            cluster.template = [
                t if t == tok else WILDCARD for t, tok in zip(cluster.template, tokens)
            ]
        cluster.size += 1
        return cluster.cluster_id

    def _insert(self, cluster: LogCluster) -> None:
        tokens = cluster.template
        node = self._root.children.setdefault(str(len(tokens)), _Node())
        for token in tokens[: self._token_layers]:
            if token in node.children:
                node = node.children[token]
                continue
            if _HAS_DIGIT.search(token):
                key = WILDCARD
            elif WILDCARD in node.children:
                key = token if len(node.children) < self.max_children else WILDCARD
            elif len(node.children) + 1 < self.max_children:
                key = token
            else:
                key = WILDCARD
            node = node.children.setdefault(key, _Node())
        node.clusters.append(cluster)

    def _match(self, leaf: _Node | None, tokens: list[str]) -> LogCluster | None:
        if leaf is None:
            return None
        best, best_sim, best_params = None, -1.0, -1
        for cluster in leaf.clusters:
            sim, params = _similarity(cluster.template, tokens)
            if sim > best_sim or (sim == best_sim and params > best_params):
                best, best_sim, best_params = cluster, sim, params
        if best is not None and best_sim >= self.sim_threshold:
            return best
        return None


def _similarity(template: list[str], tokens: list[str]) -> tuple[float, int]:
    if not tokens:
        return 1.0, 0
    same = params = 0
    for t, tok in zip(template, tokens):
        if t == WILDCARD:
            params += 1
        elif t == tok:
            same += 1
    return same / len(tokens), params


def mine_templates(lines, depth: int = 4, sim_threshold: float = 0.4, max_children: int = 100):
    """Return ``(template, support)`` pairs in cluster creation order."""
    lines = list(lines)
    if not lines:
        return []
    miner = DrainTemplateMiner(depth, sim_threshold, max_children).fit(lines)
    return miner.templates_
