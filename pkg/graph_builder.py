"""
graph_builder.py

Builds the sensor graph G(N, A, W) from a station table and a segment table.

Input files (UTF-8, '.' decimal separator):
  - stations.csv : station_id,latitude,longitude   (lat/lon informational only)
  - segments.csv : from_id,to_id,distance_km       (one row per directed connection)

Nodes are ordered by station id; that order fixes every matrix index. An edge
i -> j exists only where the segment table declares a direct connection, and
its weight is exp(-omega * d_ij) with d_ij the road-network distance in km.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger("sparse_stgt.graph")

STATION_COLUMNS = ["station_id", "latitude", "longitude"]
SEGMENT_COLUMNS = ["from_id", "to_id", "distance_km"]
DEFAULT_OMEGA = 0.1


class GraphInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SensorGraph:
    node_ids: Tuple[str, ...]
    edges: Tuple[Tuple[int, int, float], ...]
    adjacency: np.ndarray
    omega: float

    @property
    def num_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def weight_fn(d: float, omega: float) -> float:
    """Inverse-exponential closeness: exp(-omega * d)."""
    if d < 0:
        raise GraphInputError(f"distance must be non-negative, got {d}")
    if omega <= 0:
        raise GraphInputError(f"omega must be positive, got {omega}")
    return math.exp(-omega * d)


def station_sort_key(station_id: str):
    # numeric station ids sort by value, anything else lexically after them
    return (0, int(station_id), "") if station_id.isdigit() else (1, 0, station_id)


def _read_csv(path: str, columns: Sequence[str]) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise GraphInputError(f"cannot parse {path}: {e}") from e
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise GraphInputError(f"{path} is missing column(s): {', '.join(missing)}")
    return df[list(columns)].copy()


def load_stations(path: str) -> pd.DataFrame:
    df = _read_csv(path, STATION_COLUMNS)
    df["station_id"] = df["station_id"].str.strip()
    return df


def load_segments(path: str) -> pd.DataFrame:
    df = _read_csv(path, SEGMENT_COLUMNS)
    df["from_id"] = df["from_id"].str.strip()
    df["to_id"] = df["to_id"].str.strip()
    try:
        df["distance_km"] = df["distance_km"].astype(float)
    except ValueError as e:
        raise GraphInputError(f"{path}: distance_km must be numeric ({e})") from e
    return df


def build_graph(stations: pd.DataFrame, segments: pd.DataFrame, omega: float = DEFAULT_OMEGA) -> SensorGraph:
    if omega <= 0:
        raise GraphInputError(f"omega must be positive, got {omega}")

    ids = [str(s) for s in stations["station_id"]]
    seen = set()
    for sid in ids:
        if sid in seen:
            raise GraphInputError(f"duplicate station id: {sid}")
        seen.add(sid)
    node_ids = tuple(sorted(ids, key=station_sort_key))
    index = {sid: i for i, sid in enumerate(node_ids)}

    edges: List[Tuple[int, int, float]] = []
    declared = set()
    for row in segments.itertuples(index=False):
        src, dst, dist = str(row.from_id), str(row.to_id), float(row.distance_km)
        for sid in (src, dst):
            if sid not in index:
                raise GraphInputError(f"segment references unknown station id: {sid}")
        if not dist > 0:
            raise GraphInputError(f"segment {src}->{dst} has non-positive distance {dist}")
        i, j = index[src], index[dst]
        if i == j:
            raise GraphInputError(f"segment {src}->{dst} connects a station to itself")
        if (i, j) in declared:
            raise GraphInputError(f"duplicate segment {src}->{dst}")
        declared.add((i, j))
        edges.append((i, j, dist))

    graph = graph_from_edges(node_ids, edges, omega)
    logger.info("Built sensor graph: %d nodes, %d directed edges (omega=%g)", graph.num_nodes, graph.num_edges, omega)
    return graph


def graph_from_edges(node_ids: Sequence[str], edges: Sequence[Tuple[int, int, float]], omega: float) -> SensorGraph:
    """Fill the weighted adjacency for already validated edges (i, j, d_km)."""
    n = len(node_ids)
    adjacency = np.zeros((n, n), dtype=np.float64)
    for i, j, d in edges:
        # an edge must stay nonzero even when exp underflows
        adjacency[i, j] = max(weight_fn(d, omega), np.finfo(np.float64).tiny)
    return SensorGraph(node_ids=tuple(node_ids), edges=tuple((int(i), int(j), float(d)) for i, j, d in edges),
                       adjacency=adjacency, omega=float(omega))


def load_graph(stations_path: str, segments_path: str, omega: float = DEFAULT_OMEGA) -> SensorGraph:
    return build_graph(load_stations(stations_path), load_segments(segments_path), omega)


def normalize_adjacency(g: SensorGraph, scheme: str = "sym") -> np.ndarray:
    """
    GCN propagation matrix with self-loops.
      sym: D^-1/2 (W + I) D^-1/2
      row: D^-1 (W + I)
    D holds the row sums of W + I, so every degree is at least 1.
    """
    w = g.adjacency + np.eye(g.num_nodes)
    deg = w.sum(axis=1)
    if scheme == "row":
        return w / deg[:, None]
    if scheme == "sym":
        inv_sqrt = 1.0 / np.sqrt(deg)
        return inv_sqrt[:, None] * w * inv_sqrt[None, :]
    raise GraphInputError(f"unknown normalization scheme '{scheme}'")


def restrict_graph(g: SensorGraph, keep_ids: Sequence[str]) -> SensorGraph:
    """Subgraph on keep_ids (kept in g's node order); edges touching dropped stations go too."""
    keep = set(keep_ids)
    unknown = keep.difference(g.node_ids)
    if unknown:
        raise GraphInputError(f"unknown station id(s): {', '.join(sorted(unknown))}")
    old_index = [i for i, sid in enumerate(g.node_ids) if sid in keep]
    new_index = {old: new for new, old in enumerate(old_index)}
    edges = tuple((new_index[i], new_index[j], d) for i, j, d in g.edges if i in new_index and j in new_index)
    adjacency = g.adjacency[np.ix_(old_index, old_index)].copy()
    return SensorGraph(node_ids=tuple(g.node_ids[i] for i in old_index), edges=edges, adjacency=adjacency, omega=g.omega)


def attention_mask(g: SensorGraph) -> np.ndarray:
    """mask[i, j] is True when j feeds i (edge j -> i) or j == i."""
    return (g.adjacency.T > 0) | np.eye(g.num_nodes, dtype=bool)


def permute_graph(g: SensorGraph, order: Sequence[int]) -> SensorGraph:
    """Same graph with node k of the result being node order[k] of g."""
    order = list(order)
    inverse = {old: new for new, old in enumerate(order)}
    edges = tuple((inverse[i], inverse[j], d) for i, j, d in g.edges)
    adjacency = g.adjacency[np.ix_(order, order)]
    return SensorGraph(node_ids=tuple(g.node_ids[k] for k in order), edges=edges, adjacency=adjacency, omega=g.omega)


def write_graph_csv(g: SensorGraph, stations_path: str, segments_path: str, coords=None) -> None:
    """Write the graph back out in the ingestion format; coords is an optional (lat, lon) per node."""
    if coords is None:
        coords = [(0.0, 0.0)] * g.num_nodes
    pd.DataFrame(
        [(sid, lat, lon) for sid, (lat, lon) in zip(g.node_ids, coords)],
        columns=STATION_COLUMNS,
    ).to_csv(stations_path, index=False, lineterminator="\n")
    pd.DataFrame(
        [(g.node_ids[i], g.node_ids[j], d) for i, j, d in g.edges],
        columns=SEGMENT_COLUMNS,
    ).to_csv(segments_path, index=False, lineterminator="\n")
