"""Train/test splitting across images.

Two images are linked when they appear in the same task; images linked
directly or through a chain of tasks must end up on the same side.  Whole
connected components are drawn at random into the train set until it holds at
least the requested share of observations.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path


from .dataset import Dataset
from .errors import InseparableDatasetError, ValidationError
from .seeding import stream


class UnionFind:
    def __init__(self):
        self.parent = {}
        self.rank = {}

    def add(self, x):
        if x not in self.parent:
            self.parent[x] = x
            self.rank[x] = 0

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return ra


@dataclass
class Component:
    image_ids: list
    task_indices: list

    @property
    def n_obs(self) -> int:
        return len(self.task_indices)


@dataclass
class ImageGraph:
    nodes: list
    uf: UnionFind
    components: list = field(default_factory=list)

    def component_of_image(self) -> dict:
        return {i: k for k, c in enumerate(self.components) for i in c.image_ids}


def build_image_graph(dataset: Dataset) -> ImageGraph:
    uf = UnionFind()
    nodes = []
    for t in dataset.tasks:
        ids = t.image_ids
        if any(i is None for i in ids):
            raise ValidationError(f"task {t.task_id} has an alternative without an image_id")
        for i in ids:
            if i not in uf.parent:
                uf.add(i)
                nodes.append(i)
        uf.union(ids[0], ids[1])

    # components numbered by first appearance so the layout does not depend on hashing
    index = {}
    components = []
    for i in nodes:
        root = uf.find(i)
        if root not in index:
            index[root] = len(components)
            components.append(Component([], []))
        components[index[root]].image_ids.append(i)
    for n, t in enumerate(dataset.tasks):
        components[index[uf.find(t.image_ids[0])]].task_indices.append(n)
    return ImageGraph(nodes=nodes, uf=uf, components=components)


@dataclass
class SplitResult:
    train: Dataset
    test: Dataset
    train_fraction_achieved: float
    component_assignment: dict
    fraction_requested: float
    seed: int
    component_sizes: list

    def report(self) -> dict:
        hist = Counter(self.component_sizes)
        return {
            "seed": self.seed,
            "fraction_requested": self.fraction_requested,
            "fraction_achieved": self.train_fraction_achieved,
            "n_train": self.train.n_obs,
            "n_test": self.test.n_obs,
            "n_components": len(self.component_sizes),
            "largest_component": max(self.component_sizes),
            "component_size_histogram": {str(k): hist[k] for k in sorted(hist)},
        }

    def write_report(self, path) -> None:
        Path(path).write_text(json.dumps(self.report(), indent=2, sort_keys=True) + "\n")


def split(dataset: Dataset, fraction: float = 0.8, seed: int = 0, graph: ImageGraph = None) -> SplitResult:
    if not 0 < fraction < 1:
        raise ValidationError(f"fraction must lie strictly between 0 and 1, got {fraction}")
    graph = graph or build_image_graph(dataset)
    comps = graph.components
    sizes = [c.n_obs for c in comps]
    n = dataset.n_obs
    if len(comps) < 2:
        raise InseparableDatasetError(f"inseparable dataset: a single component holds all {n} observations")

    order = stream(seed, "split").permutation(len(comps))
    target = fraction * n
    taken = 0
    last = None
    assignment = {}
    for k in order:
        k = int(k)
        if taken >= target:
            assignment[k] = "test"
        else:
            assignment[k] = "train"
            taken += sizes[k]
            last = k
    if taken >= n:
        raise InseparableDatasetError(
            f"inseparable dataset: reaching {fraction:.0%} of {n} observations consumes every component "
            f"(largest component has {max(sizes)} observations, last drawn {sizes[last]})"
        )

    train_idx = sorted(i for k, c in enumerate(comps) if assignment[k] == "train" for i in c.task_indices)
    test_idx = sorted(i for k, c in enumerate(comps) if assignment[k] == "test" for i in c.task_indices)
    return SplitResult(
        train=dataset.subset(train_idx),
        test=dataset.subset(test_idx),
        train_fraction_achieved=taken / n,
        component_assignment=assignment,
        fraction_requested=fraction,
        seed=seed,
        component_sizes=sizes,
    )


def check_disjoint(train: Dataset, test: Dataset) -> set:
    """Images present in both partitions (empty when the split is leak-free)."""
    return train.image_ids() & test.image_ids()
