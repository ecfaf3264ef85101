"""Centerline extraction: cross-section non-maximum suppression, fragment
pruning, heart-center detection and per-lung shortest-path reconnection.

NMS keeps a voxel only when its response is at least that of 8 points
sampled at 45-degree steps on the unit circle perpendicular to the local
tube direction. The surviving fragments are reconnected per lung by Dijkstra
paths toward the heart center over a cost that prefers high response and low
gradient; paths themselves become centerline voxels.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .airway import LEFT_LABEL, RIGHT_LABEL
from .graph import GridGraph
from .imageops import GradientField
from .medialness import MedialnessField
from .volume import Connectivity, LabelVolume, Volume3D, connectivity_structure

LUNG_NAMES = {LEFT_LABEL: "left", RIGHT_LABEL: "right"}


@dataclass
class CenterlineFragment:
    voxels: np.ndarray     # (m, 3) int
    responses: np.ndarray  # (m,)

    def __len__(self):
        return len(self.voxels)


@dataclass
class CenterlineTree:
    """Rooted tree (forest, if fragments were unreachable) of centerline
    voxels for one lung."""

    lung: str
    nodes_ijk: np.ndarray          # (n, 3) int
    responses: np.ndarray          # (n,)
    edges: np.ndarray              # (m, 2) node ids
    roots: list[int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radii_mm: np.ndarray | None = None
    radii_voxels: np.ndarray | None = None
    orphan_count: int = 0

    @property
    def n_nodes(self):
        return len(self.nodes_ijk)

    def positions_mm(self) -> np.ndarray:
        return (np.asarray(self.origin)
                + self.nodes_ijk * np.asarray(self.spacing))

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_nodes, int)
        for a, b in self.edges:
            deg[a] += 1
            deg[b] += 1
        return deg

    def to_json_obj(self) -> dict:
        pos = self.positions_mm()
        radii = self.radii_mm
        nodes = []
        for i in range(self.n_nodes):
            nodes.append({
                "id": int(i),
                "ijk": [int(v) for v in self.nodes_ijk[i]],
                "xyz_mm": [float(v) for v in pos[i]],
                "radius_mm": None if radii is None else float(radii[i]),
                "response": float(self.responses[i]),
            })
        return {
            "lung": self.lung,
            "nodes": nodes,
            "edges": [[int(a), int(b)] for a, b in self.edges],
            "roots": [int(r) for r in self.roots],
        }

    @classmethod
    def from_json_obj(cls, obj: dict, spacing=(1.0, 1.0, 1.0),
                      origin=(0.0, 0.0, 0.0)) -> "CenterlineTree":
        nodes = obj["nodes"]
        ijk = np.array([n["ijk"] for n in nodes], int).reshape(-1, 3)
        resp = np.array([n["response"] for n in nodes], float)
        radii = [n.get("radius_mm") for n in nodes]
        radii_mm = (np.array([np.nan if r is None else r for r in radii])
                    if nodes else None)
        edges = np.array(obj["edges"], int).reshape(-1, 2)
        return cls(obj["lung"], ijk, resp, edges, list(obj["roots"]),
                   tuple(spacing), tuple(origin), radii_mm)


def _perpendicular_basis(directions: np.ndarray):
    """Deterministic orthonormal basis (u, w) of the plane perpendicular to
    each unit direction: u = normalize(e_a x d) with e_a the canonical axis
    least aligned with d (lowest index on ties), w = d x u."""
    d = directions
    a = np.argmin(np.abs(d), axis=1)
    e = np.zeros_like(d)
    e[np.arange(len(d)), a] = 1.0
    u = np.cross(e, d)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = np.cross(d, u)
    return u, w


def non_max_suppress(mfield: MedialnessField, th_min: float | None = None,
                     sample_radius: float = 1.0) -> np.ndarray:
    """Candidate mask: voxels above th_min whose response is >= all 8
    cross-section samples (ties survive)."""
    if th_min is None:
        th_min = mfield.nms_threshold()
    resp = mfield.response
    cand = resp > th_min
    if not cand.any():
        return cand
    idx = np.argwhere(cand)
    d = mfield.direction[cand].astype(np.float64)
    norms = np.linalg.norm(d, axis=1)
    ok = norms > 0
    d[ok] /= norms[ok][:, None]
    d[~ok] = [0.0, 0.0, 1.0]
    u, w = _perpendicular_basis(d)
    centers = idx.astype(np.float64)
    center_resp = resp[cand]
    keep = np.ones(len(idx), bool)
    for k in range(8):
        ang = k * np.pi / 4.0
        pts = centers + sample_radius * (np.cos(ang) * u + np.sin(ang) * w)
        vals = ndimage.map_coordinates(resp, pts.T, order=1, mode="nearest")
        keep &= center_resp >= vals
    out = np.zeros(resp.shape, bool)
    sel = idx[keep]
    out[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return out


def prune_fragments(candidates: np.ndarray, airway_mask=None,
                    min_voxels: int = 5,
                    airway_dilation: int = 2,
                    response: np.ndarray | None = None) -> list[CenterlineFragment]:
    """Clear candidates near the airway border, then keep N26 components of
    at least min_voxels voxels."""
    cand = np.asarray(candidates, bool)
    if airway_mask is not None:
        aw = airway_mask.data > 0 if isinstance(airway_mask, LabelVolume) \
            else np.asarray(airway_mask, bool)
        if aw.any() and airway_dilation > 0:
            aw = ndimage.binary_dilation(
                aw, structure=connectivity_structure(Connectivity.N6),
                iterations=airway_dilation)
        cand = cand & ~aw
    labels, n = ndimage.label(cand,
                              structure=connectivity_structure(Connectivity.N26))
    frags = []
    for c in range(1, n + 1):
        voxels = np.argwhere(labels == c)
        if len(voxels) < min_voxels:
            continue
        resp = (response[voxels[:, 0], voxels[:, 1], voxels[:, 2]]
                if response is not None else np.zeros(len(voxels)))
        frags.append(CenterlineFragment(voxels, resp))
    return frags


def detect_heart_center(vol: Volume3D, lungs, bright_hu: float = 100.0):
    """Centroid of bright voxels in the mediastinal box between the two lung
    bounding boxes (middle third in z)."""
    left = lungs.mask(LEFT_LABEL)
    right = lungs.mask(RIGHT_LABEL)
    if not left.any() or not right.any():
        raise ValueError("both lungs are required to locate the heart")
    lb = lungs.bboxes[LEFT_LABEL]
    rb = lungs.bboxes[RIGHT_LABEL]
    x_candidates = sorted([rb[1][0], lb[0][0]])
    x_lo, x_hi = x_candidates[0], x_candidates[1]
    if x_lo > x_hi:
        x_lo, x_hi = x_hi, x_lo
    y_lo = min(lb[0][1], rb[0][1])
    y_hi = max(lb[1][1], rb[1][1])
    z_lo = min(lb[0][2], rb[0][2])
    z_hi = max(lb[1][2], rb[1][2])
    z_third = (z_hi - z_lo + 1) // 3
    box = np.zeros(vol.dims, bool)
    box[x_lo:x_hi + 1, y_lo:y_hi + 1,
        z_lo + z_third:z_hi - z_third + 1] = True
    box &= ~(left | right)
    cand = box & (vol.data > bright_hu)
    if not cand.any():
        raise ValueError("no bright mediastinal voxels found; pass an explicit "
                         "heart seed")
    pts = np.argwhere(cand)
    centroid = pts.mean(axis=0)
    nearest = pts[np.argmin(((pts - centroid) ** 2).sum(axis=1))]
    return tuple(int(v) for v in nearest)


def _line_voxels(a, b) -> np.ndarray:
    """Voxels along the straight segment a-b, one sample per unit step."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    n = max(int(np.ceil(np.linalg.norm(b - a))) * 2, 2)
    t = np.linspace(0.0, 1.0, n)
    pts = np.round(a[None, :] + t[:, None] * (b - a)[None, :]).astype(int)
    return np.unique(pts, axis=0)


def reconnect(fragments, mfield: MedialnessField, grad: GradientField | np.ndarray,
              lungs, heart, epsilon: float = 0.05, lam: float = 0.5,
              lung_labels=(LEFT_LABEL, RIGHT_LABEL)) -> list[CenterlineTree]:
    """Connect fragments to the heart center with Dijkstra paths, one tree
    per lung. grad may be a GradientField or a precomputed normalized
    magnitude array."""
    resp = mfield.response
    ghat = grad.magnitude() if isinstance(grad, GradientField) else np.asarray(grad)
    heart = tuple(int(v) for v in heart)

    trees = []
    for lab in lung_labels:
        lung_mask = lungs.mask(lab)
        frags = [f for f in fragments
                 if lung_mask[tuple(f.voxels[len(f) // 2])]]
        # keep only fragment voxels inside this lung
        frags = [CenterlineFragment(f.voxels[lung_mask[tuple(f.voxels.T)]],
                                    f.responses[lung_mask[tuple(f.voxels.T)]])
                 for f in frags]
        frags = [f for f in frags if len(f)]
        name = LUNG_NAMES.get(lab, str(lab))
        if not frags:
            trees.append(CenterlineTree(name, np.zeros((0, 3), int),
                                        np.zeros(0), np.zeros((0, 2), int), [],
                                        mfield.spacing, mfield.origin))
            continue

        # root corridor: straight heart -> nearest lung voxel, dilated by 2
        lung_pts = np.argwhere(lung_mask)
        entry = lung_pts[np.argmin(((lung_pts - np.asarray(heart)) ** 2).sum(axis=1))]
        corridor = np.zeros(lung_mask.shape, bool)
        line = _line_voxels(heart, entry)
        line = np.clip(line, 0, np.asarray(lung_mask.shape) - 1)
        corridor[line[:, 0], line[:, 1], line[:, 2]] = True
        corridor = ndimage.binary_dilation(
            corridor, structure=connectivity_structure(Connectivity.N6),
            iterations=2)
        other = np.zeros(lung_mask.shape, bool)
        for ol in lung_labels:
            if ol != lab:
                other |= lungs.mask(ol)
        corridor &= ~other
        region = lung_mask | corridor

        pos = resp[region]
        pos = pos[pos > 0]
        scale = float(np.percentile(pos, 99.0)) if pos.size else 0.0
        rhat = resp / scale if scale > 0 else np.zeros_like(resp)
        cost = 1.0 / (epsilon + rhat) + lam * ghat

        graph = GridGraph(region, cost)
        root_id = int(graph.node_id[heart])
        dist, pred = graph.dijkstra([root_id])

        parent = {}
        in_tree = {heart}
        orphans = 0
        order = []
        for f in frags:
            ids = graph.ids_of(f.voxels)
            costs = cost[tuple(f.voxels.T)]
            cheapest = int(np.argmin(costs))
            order.append((float(dist[ids[cheapest]]), f, ids, cheapest))
        order.sort(key=lambda item: item[0])

        for d0, f, ids, cheapest in order:
            fvox = [tuple(v) for v in f.voxels]
            anchor = fvox[cheapest]
            if np.isfinite(d0):
                chain = graph.path_to_source(pred, ids[cheapest])
                chain_vox = [tuple(graph.voxels[c]) for c in chain]
                # walk from the fragment toward the root, stop at the tree
                for prev, nxt in zip(chain_vox, chain_vox[1:]):
                    if prev in in_tree:
                        break
                    parent[prev] = nxt
                    in_tree.add(prev)
                in_tree.add(chain_vox[-1])
            else:
                orphans += 1
                in_tree.add(anchor)
            # span the fragment itself from its anchor (N26 BFS)
            vox_set = set(fvox)
            frontier = [anchor]
            seen = {anchor}
            while frontier:
                cur = frontier.pop(0)
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        for dk in (-1, 0, 1):
                            if di == dj == dk == 0:
                                continue
                            nb = (cur[0] + di, cur[1] + dj, cur[2] + dk)
                            if nb in vox_set and nb not in seen:
                                seen.add(nb)
                                if nb not in in_tree:
                                    parent[nb] = cur
                                    in_tree.add(nb)
                                frontier.append(nb)

        if orphans:
            warnings.warn(f"{orphans} fragments unreachable in the {name} lung")

        nodes = sorted(in_tree)
        node_id = {v: i for i, v in enumerate(nodes)}
        edges = np.array([[node_id[a], node_id[b]] for a, b in parent.items()],
                         int).reshape(-1, 2)
        roots = [i for v, i in node_id.items() if v not in parent]
        ijk = np.array(nodes, int).reshape(-1, 3)
        responses = resp[ijk[:, 0], ijk[:, 1], ijk[:, 2]] if len(ijk) else \
            np.zeros(0)
        trees.append(CenterlineTree(name, ijk, responses, edges, sorted(roots),
                                    mfield.spacing, mfield.origin,
                                    orphan_count=orphans))
    return trees


def trees_to_json(trees: list[CenterlineTree], spacing, origin) -> str:
    obj = {
        "spacing": [float(s) for s in spacing],
        "origin": [float(o) for o in origin],
        "trees": [t.to_json_obj() for t in trees],
    }
    return json.dumps(obj, indent=1, sort_keys=True)


def trees_from_json(text: str) -> list[CenterlineTree]:
    obj = json.loads(text)
    spacing = tuple(obj.get("spacing", (1.0, 1.0, 1.0)))
    origin = tuple(obj.get("origin", (0.0, 0.0, 0.0)))
    return [CenterlineTree.from_json_obj(t, spacing, origin)
            for t in obj["trees"]]


def trees_to_csv(trees: list[CenterlineTree]) -> str:
    lines = ["lung,id,i,j,k,x_mm,y_mm,z_mm,radius_mm,response"]
    for t in trees:
        pos = t.positions_mm()
        for i in range(t.n_nodes):
            radius = ""
            if t.radii_mm is not None and np.isfinite(t.radii_mm[i]):
                radius = f"{t.radii_mm[i]:.6g}"
            lines.append("%s,%d,%d,%d,%d,%.6g,%.6g,%.6g,%s,%.6g" % (
                t.lung, i, *t.nodes_ijk[i], *pos[i], radius, t.responses[i]))
    return "\n".join(lines) + "\n"
