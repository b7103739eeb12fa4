"""Brute-force metric references written without numpy ranking helpers."""


def rank_scan_ap(scores, truths):
    """AP by comparing every pair explicitly; ``None`` when there is no positive."""
    n = len(scores)
    positives = [i for i in range(n) if truths[i]]
    if not positives:
        return None

    def rank(i):  # 1-based position under (descending score, ascending index)
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))

    total = 0.0
    for i in positives:
        r = rank(i)
        hits = sum(1 for j in positives if rank(j) <= r)
        total += hits / r
    return total / len(positives)


def column(m, j):
    return [row[j] for row in m]


def oracle_mean_ap(scores, truths):
    aps = [rank_scan_ap(column(scores, j), column(truths, j)) for j in range(len(scores[0]))]
    aps = [a for a in aps if a is not None]
    return sum(aps) / len(aps)


def oracle_macro_ap(scores, truths, groups):
    buckets = {}
    for j, key in enumerate(groups):
        a = rank_scan_ap(column(scores, j), column(truths, j))
        if a is not None:
            buckets.setdefault(key, []).append(a)
    means = [sum(v) / len(v) for v in buckets.values()]
    return sum(means) / len(means)


def oracle_top_k(scores, truths, k):
    total = 0.0
    for s_row, t_row in zip(scores, truths):
        order = sorted(range(len(s_row)), key=lambda j: (-s_row[j], j))
        total += sum(t_row[j] for j in order[:k]) / k
    return total / len(scores)


def closure_oracle(g, seeds):
    """Repeated one-hop expansion until nothing changes."""
    current = {g.id_of(s) for s in seeds}
    while True:
        grown = set(current)
        for s, d in g.edges:
            if s in current:
                grown.add(d)
        if grown == current:
            return {g.nodes[i].name for i in current}
        current = grown


# --- binning selection fixture ---------------------------------------------------------

# Six images over eight nodes. Worked through by hand:
#   A {5}    largest bin 0-7 holds 5          keep  -> 0-4, 6-7
#   B {6}    largest bin 0-4 misses 6         drop
#   C {1, 6} largest bin 0-4 holds 1          keep  -> 0-0, 2-4, 7-7
#   D {0}    largest bin 2-4 misses 0         drop
#   E {3}    largest bin 2-4 holds 3          keep  -> 0-0, 2-2, 4-4, 7-7
#   F {2, 7} four one-node bins, lowest is 0  drop
MDES_NODES = 8
MDES_IMAGES = [("A", {5}), ("B", {6}), ("C", {1, 6}), ("D", {0}), ("E", {3}), ("F", {2, 7})]
MDES_EXPECTED = ["A", "C", "E"]
MDES_EXPECTED_BINS = [(0, 0), (2, 2), (4, 4), (7, 7)]


def simulate_bins(images, n_nodes):
    """Literal simulation with bins held as explicit sets of node ids."""
    bins = [set(range(n_nodes))]
    kept = []
    for name, nodes in images:
        if not bins:
            break
        largest = max(bins, key=lambda b: (len(b), -min(b)))
        if not nodes & largest:
            continue
        kept.append(name)
        for node in sorted(nodes):
            for b in list(bins):
                if node in b:
                    bins.remove(b)
                    below = {x for x in b if x < node}
                    above = {x for x in b if x > node}
                    bins += [part for part in (below, above) if part]
    return kept, sorted((min(b), max(b)) for b in bins)


class ScriptedSystem:
    """Stands in for a system: fixed expansions and a record of forward calls."""

    def __init__(self, images, n_nodes):
        from types import SimpleNamespace
        self._ns = SimpleNamespace
        self.active = {name: sorted(nodes) for name, nodes in images}
        self.layout = SimpleNamespace(n_nodes=n_nodes)
        self.calls = []

    def forward(self, b, steps=None):
        self.calls.append(b.id)
        return self._ns(active=self.active[b.id]), None


class CountingSystem:
    """Wraps a real system and records which bundles it was asked to expand."""

    def __init__(self, system):
        self.system = system
        self.layout = system.layout
        self.calls = []

    def forward(self, b, **kw):
        self.calls.append(b.id)
        return self.system.forward(b, **kw)
