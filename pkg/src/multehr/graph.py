"""Typed heterogeneous graph over EHR entities: construction from tables,
visit-anchored subgraph sampling, and train-time augmentation.

Node types: patient, visit, diagnosis, prescription, procedure, lab_event.
Edge types: patient-visit plus visit-{diagnosis,prescription,procedure,
lab_event}; every stored edge type has a reverse-direction twin so message
passing reaches patients from entities and back.  Graphs are immutable after
construction; sampling and augmentation return new objects and take explicit
generators.
"""

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import DataError

NODE_TYPES = ("patient", "visit", "diagnosis", "prescription", "procedure", "lab_event")
ENTITY_TYPES = ("diagnosis", "prescription", "procedure", "lab_event")

# forward edge types and their endpoint types
EDGE_SCHEMA = {
    "patient_visit": ("patient", "visit"),
    "visit_diagnosis": ("visit", "diagnosis"),
    "visit_prescription": ("visit", "prescription"),
    "visit_procedure": ("visit", "procedure"),
    "visit_lab_event": ("visit", "lab_event"),
}
FORWARD_EDGE_TYPES = tuple(EDGE_SCHEMA)


def reverse_edge_type(etype):
    src, dst = EDGE_SCHEMA[etype]
    return f"{dst}_{src}"


REVERSE_OF = {e: reverse_edge_type(e) for e in FORWARD_EDGE_TYPES}
ALL_EDGE_TYPES = FORWARD_EDGE_TYPES + tuple(REVERSE_OF.values())


def edge_endpoints(etype):
    """(src_type, dst_type) for any forward or reverse edge type."""
    if etype in EDGE_SCHEMA:
        return EDGE_SCHEMA[etype]
    for fwd, rev in REVERSE_OF.items():
        if rev == etype:
            s, d = EDGE_SCHEMA[fwd]
            return d, s
    raise KeyError(f"unknown edge type {etype!r}")


@dataclass
class HeteroGraph:
    node_ids: dict            # node type -> list of external ids (dense order)
    edges: dict               # edge type -> (src idx array, dst idx array)
    features: dict            # node type -> (n, d) float64 matrix
    feature_dim: int
    edge_multiplicity: dict = field(default_factory=dict)  # forward types; unused by the encoder

    def node_count(self, ntype):
        return len(self.node_ids.get(ntype, ()))

    def edge_count(self, etype):
        return len(self.edges[etype][0]) if etype in self.edges else 0

    def index_of(self, ntype):
        return {x: i for i, x in enumerate(self.node_ids.get(ntype, ()))}

    def validate(self):
        for etype, (src, dst) in self.edges.items():
            st, dt = edge_endpoints(etype)
            if len(src) != len(dst):
                raise DataError(f"{etype}: src/dst length mismatch")
            if len(src) and (src.min() < 0 or src.max() >= self.node_count(st)):
                raise DataError(f"{etype}: src index out of range for {st}")
            if len(dst) and (dst.min() < 0 or dst.max() >= self.node_count(dt)):
                raise DataError(f"{etype}: dst index out of range for {dt}")
            pairs = set(zip(src.tolist(), dst.tolist()))
            if len(pairs) != len(src):
                raise DataError(f"{etype}: duplicate (src, dst) pairs")
        for fwd, rev in REVERSE_OF.items():
            if self.edge_count(fwd) != self.edge_count(rev):
                raise DataError(f"reverse edge count mismatch for {fwd}/{rev}")
        for ntype, feats in self.features.items():
            if feats.shape != (self.node_count(ntype), self.feature_dim):
                raise DataError(f"feature matrix shape {feats.shape} wrong for {ntype}")
        return self

    def with_features(self, features):
        return HeteroGraph(node_ids=self.node_ids, edges=self.edges,
                           features=features, feature_dim=self.feature_dim,
                           edge_multiplicity=self.edge_multiplicity)


@dataclass
class SubgraphSample:
    """Induced graph on sampled visits, their 1-hop entities, and owning patients."""
    graph: HeteroGraph
    parent_index: dict        # node type -> array mapping subgraph idx -> parent idx
    visit_parent_indices: np.ndarray


def _first_seen_order(values):
    seen = {}
    for v in values:
        if v not in seen:
            seen[v] = len(seen)
    return seen


def build_graph(tables, include_lab_events=False, feature_dim=128):
    """Construct the typed graph from validated EHR tables.

    One node per distinct id per type; one edge per distinct (visit, code)
    pair plus patient-visit edges, with reverse twins; features start at
    zero pending pretraining.  Repeated (visit, code) rows collapse to one
    edge with a multiplicity attribute.
    """
    if tables.visits.empty:
        raise DataError("cannot build a graph from an empty visits table")

    patient_idx = _first_seen_order(tables.patients["patient_id"])
    visit_idx = _first_seen_order(tables.visits["visit_id"])

    missing = [v for v in tables.visits["patient_id"] if v not in patient_idx]
    if missing:
        raise DataError(f"visits reference unknown patients: {sorted(set(missing))[:5]}")

    node_ids = {
        "patient": list(patient_idx),
        "visit": list(visit_idx),
    }
    edges = {}
    mult = {}

    pv_src = np.array([patient_idx[p] for p in tables.visits["patient_id"]], dtype=np.int64)
    pv_dst = np.array([visit_idx[v] for v in tables.visits["visit_id"]], dtype=np.int64)
    edges["patient_visit"] = (pv_src, pv_dst)
    mult["patient_visit"] = np.ones(len(pv_src), dtype=np.int64)

    code_tables = {
        "visit_diagnosis": ("diagnosis", tables.diagnoses),
        "visit_prescription": ("prescription", tables.prescriptions),
        "visit_procedure": ("procedure", tables.procedures),
    }
    if include_lab_events and tables.lab_events is not None:
        code_tables["visit_lab_event"] = ("lab_event", tables.lab_events)

    for etype, (ntype, df) in code_tables.items():
        if df is None or df.empty:
            node_ids[ntype] = []
            edges[etype] = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
            mult[etype] = np.empty(0, dtype=np.int64)
            continue
        bad = df.loc[~df["visit_id"].isin(visit_idx)]
        if len(bad):
            raise DataError(f"{etype}: rows reference unknown visits "
                            f"(rows {bad.index[:5].tolist()})")
        code_idx = _first_seen_order(df["code"])
        node_ids[ntype] = list(code_idx)
        counts = {}
        for v, c in zip(df["visit_id"], df["code"]):
            key = (visit_idx[v], code_idx[c])
            counts[key] = counts.get(key, 0) + 1
        pairs = list(counts)
        edges[etype] = (np.array([p[0] for p in pairs], dtype=np.int64),
                        np.array([p[1] for p in pairs], dtype=np.int64))
        mult[etype] = np.array([counts[p] for p in pairs], dtype=np.int64)

    for ntype in NODE_TYPES:
        node_ids.setdefault(ntype, [])
    for etype in FORWARD_EDGE_TYPES:
        if etype not in edges:
            edges[etype] = (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64))
            mult[etype] = np.empty(0, dtype=np.int64)
        src, dst = edges[etype]
        edges[REVERSE_OF[etype]] = (dst.copy(), src.copy())

    features = {t: np.zeros((len(node_ids[t]), feature_dim)) for t in NODE_TYPES}
    return HeteroGraph(node_ids=node_ids, edges=edges, features=features,
                       feature_dim=feature_dim, edge_multiplicity=mult).validate()


def sample_subgraph(g, n_visit, rng):
    """Uniform without-replacement sample of visit nodes plus their 1-hop
    medical-entity neighbors and owning patients; deterministic per seed."""
    if n_visit < 1:
        raise DataError(f"n_visit must be >= 1, got {n_visit}")
    total = g.node_count("visit")
    k = min(n_visit, total)
    chosen = np.sort(rng.choice(total, size=k, replace=False))
    return induced_on_visits(g, chosen)


def induced_on_visits(g, visit_indices):
    """Induced sample on an explicit set of parent visit indices."""
    visit_indices = np.asarray(sorted(set(int(v) for v in visit_indices)), dtype=np.int64)
    in_sample = np.zeros(g.node_count("visit"), dtype=bool)
    in_sample[visit_indices] = True

    parent_index = {"visit": visit_indices}
    remap = {"visit": -np.ones(g.node_count("visit"), dtype=np.int64)}
    remap["visit"][visit_indices] = np.arange(len(visit_indices))

    # gather neighbor nodes via forward edge types
    for etype in FORWARD_EDGE_TYPES:
        src, dst = g.edges[etype]
        st, dt = EDGE_SCHEMA[etype]
        other = st if dt == "visit" else dt
        if etype == "patient_visit":
            keep = in_sample[dst]
            nodes = np.unique(src[keep])
        else:
            keep = in_sample[src]
            nodes = np.unique(dst[keep])
        parent_index[other] = nodes
        r = -np.ones(g.node_count(other), dtype=np.int64)
        r[nodes] = np.arange(len(nodes))
        remap[other] = r

    node_ids = {t: [g.node_ids[t][i] for i in parent_index.get(t, [])] for t in NODE_TYPES}
    for t in NODE_TYPES:
        parent_index.setdefault(t, np.empty(0, dtype=np.int64))

    edges = {}
    mult = {}
    for etype in FORWARD_EDGE_TYPES:
        src, dst = g.edges[etype]
        st, dt = EDGE_SCHEMA[etype]
        keep = in_sample[dst] if dt == "visit" else in_sample[src]
        s = remap[st][src[keep]]
        d = remap[dt][dst[keep]]
        edges[etype] = (s, d)
        m = g.edge_multiplicity.get(etype)
        mult[etype] = m[keep] if m is not None and len(m) == len(src) else np.ones(len(s), dtype=np.int64)
        edges[REVERSE_OF[etype]] = (d.copy(), s.copy())

    features = {t: g.features[t][parent_index[t]] if len(parent_index[t])
                else np.zeros((0, g.feature_dim)) for t in NODE_TYPES}
    sub = HeteroGraph(node_ids=node_ids, edges=edges, features=features,
                      feature_dim=g.feature_dim, edge_multiplicity=mult)
    return SubgraphSample(graph=sub, parent_index=parent_index,
                          visit_parent_indices=visit_indices)


def augment(sample, edge_drop_p, node_drop_p, noise_sigma, rng):
    """Train-time graph corruption: drop non-patient-visit edges (with their
    reverse twins), drop medical-entity nodes with incident edges, and add
    i.i.d. Gaussian noise to node features.  Visit and patient nodes are
    never dropped, so label-bearing targets survive."""
    if not (0.0 <= edge_drop_p < 1.0) or not (0.0 <= node_drop_p < 1.0):
        raise DataError("drop probabilities must lie in [0, 1)")
    if noise_sigma < 0:
        raise DataError("noise sigma must be non-negative")
    g = sample.graph

    keep_nodes = {}
    node_remap = {}
    for ntype in NODE_TYPES:
        n = g.node_count(ntype)
        if ntype in ENTITY_TYPES and node_drop_p > 0 and n:
            keep = rng.random(n) >= node_drop_p
        else:
            keep = np.ones(n, dtype=bool)
        keep_nodes[ntype] = keep
        r = -np.ones(n, dtype=np.int64)
        r[keep] = np.arange(int(keep.sum()))
        node_remap[ntype] = r

    edges = {}
    mult = {}
    for etype in FORWARD_EDGE_TYPES:
        src, dst = g.edges[etype]
        st, dt = EDGE_SCHEMA[etype]
        keep = np.ones(len(src), dtype=bool)
        if etype != "patient_visit" and edge_drop_p > 0 and len(src):
            keep &= rng.random(len(src)) >= edge_drop_p
        keep &= keep_nodes[st][src] & keep_nodes[dt][dst]
        s = node_remap[st][src[keep]]
        d = node_remap[dt][dst[keep]]
        edges[etype] = (s, d)
        m = g.edge_multiplicity.get(etype)
        mult[etype] = (m[keep] if m is not None and len(m) == len(src)
                       else np.ones(len(s), dtype=np.int64))
        edges[REVERSE_OF[etype]] = (d.copy(), s.copy())

    node_ids = {}
    parent_index = {}
    features = {}
    for ntype in NODE_TYPES:
        keep = keep_nodes[ntype]
        node_ids[ntype] = [x for x, k in zip(g.node_ids[ntype], keep) if k]
        parent_index[ntype] = sample.parent_index[ntype][keep]
        feats = g.features[ntype][keep].copy()
        if noise_sigma > 0 and feats.size:
            feats += rng.normal(0.0, noise_sigma, size=feats.shape)
        features[ntype] = feats

    sub = HeteroGraph(node_ids=node_ids, edges=edges, features=features,
                      feature_dim=g.feature_dim, edge_multiplicity=mult)
    return SubgraphSample(graph=sub, parent_index=parent_index,
                          visit_parent_indices=sample.visit_parent_indices)


def drop_prescription_edges_for(sample, visit_rows):
    """View for the drug-recommendation task: remove visit_prescription edges
    (and reverses) incident to the given subgraph visit rows, preventing the
    targets from leaking into the encoder input."""
    g = sample.graph
    flagged = np.zeros(g.node_count("visit"), dtype=bool)
    flagged[np.asarray(visit_rows, dtype=np.int64)] = True
    src, dst = g.edges["visit_prescription"]
    keep = ~flagged[src]
    edges = dict(g.edges)
    edges["visit_prescription"] = (src[keep], dst[keep])
    edges[REVERSE_OF["visit_prescription"]] = (dst[keep].copy(), src[keep].copy())
    mult = dict(g.edge_multiplicity)
    m = mult.get("visit_prescription")
    if m is not None and len(m) == len(src):
        mult["visit_prescription"] = m[keep]
    sub = HeteroGraph(node_ids=g.node_ids, edges=edges, features=g.features,
                      feature_dim=g.feature_dim, edge_multiplicity=mult)
    return SubgraphSample(graph=sub, parent_index=sample.parent_index,
                          visit_parent_indices=sample.visit_parent_indices)


# ---------------------------------------------------------------------------
# directory export/import


def save_graph_dir(g, directory):
    os.makedirs(directory, exist_ok=True)
    for ntype in NODE_TYPES:
        with open(os.path.join(directory, f"nodes_{ntype}.csv"), "w") as fh:
            fh.write("external_id,dense_index\n")
            for i, x in enumerate(g.node_ids[ntype]):
                fh.write(f"{x},{i}\n")
        feats = g.features[ntype]
        with open(os.path.join(directory, f"features_{ntype}.bin"), "wb") as fh:
            fh.write(struct.pack("<QQ", feats.shape[0], feats.shape[1]))
            fh.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())
    for etype in ALL_EDGE_TYPES:
        src, dst = g.edges[etype]
        m = g.edge_multiplicity.get(etype)
        with open(os.path.join(directory, f"edges_{etype}.csv"), "w") as fh:
            if etype in FORWARD_EDGE_TYPES and m is not None:
                fh.write("src_index,dst_index,multiplicity\n")
                for s, d, k in zip(src, dst, m):
                    fh.write(f"{s},{d},{k}\n")
            else:
                fh.write("src_index,dst_index\n")
                for s, d in zip(src, dst):
                    fh.write(f"{s},{d}\n")
    manifest = {
        "feature_dim": g.feature_dim,
        "node_counts": {t: g.node_count(t) for t in NODE_TYPES},
        "edge_counts": {e: g.edge_count(e) for e in ALL_EDGE_TYPES},
    }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_graph_dir(directory):
    with open(os.path.join(directory, "manifest.json")) as fh:
        manifest = json.load(fh)
    d = manifest["feature_dim"]
    node_ids = {}
    features = {}
    for ntype in NODE_TYPES:
        ids = []
        path = os.path.join(directory, f"nodes_{ntype}.csv")
        with open(path) as fh:
            next(fh)
            for line in fh:
                ids.append(line.rsplit(",", 1)[0])
        node_ids[ntype] = ids
        with open(os.path.join(directory, f"features_{ntype}.bin"), "rb") as fh:
            n, dd = struct.unpack("<QQ", fh.read(16))
            features[ntype] = np.frombuffer(fh.read(8 * n * dd), dtype="<f8").reshape(n, dd).copy()
    edges = {}
    mult = {}
    for etype in ALL_EDGE_TYPES:
        rows = np.loadtxt(os.path.join(directory, f"edges_{etype}.csv"),
                          delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
        if rows.size == 0:
            rows = np.empty((0, 2), dtype=np.int64)
        edges[etype] = (rows[:, 0].copy(), rows[:, 1].copy())
        if etype in FORWARD_EDGE_TYPES and rows.shape[1] > 2:
            mult[etype] = rows[:, 2].copy()
    return HeteroGraph(node_ids=node_ids, edges=edges, features=features,
                       feature_dim=d, edge_multiplicity=mult).validate()
