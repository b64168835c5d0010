"""Self-collision detection and penetration penalties.

A linear BVH over triangle centroids (30-bit Morton codes, radix-tree
topology built by the longest-common-prefix split rule) yields candidate
triangle pairs; an exact triangle-triangle intersection test confirms them.
Confirmed pairs are penalized by a conic intrusion field anchored at each
triangle: points behind the plane and laterally inside the circumradius cone
accrue depth, and the energy is the bidirectional sum of squared depths.

The built tree is immutable and safe to query from multiple threads; a
fingerprint of the vertex buffer guards against querying a stale tree.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

COPLANAR_EPS = 1e-10
DEGENERATE_AREA = 1e-12

# count of cone-field evaluations skipped because the triangle was degenerate
_degenerate_warnings = 0


def degenerate_field_count() -> int:
    return _degenerate_warnings


def reset_degenerate_field_count() -> None:
    global _degenerate_warnings
    _degenerate_warnings = 0


def _fingerprint(vertices: np.ndarray, faces: np.ndarray) -> bytes:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(vertices, dtype=np.float64).tobytes())
    h.update(np.ascontiguousarray(faces, dtype=np.int64).tobytes())
    return h.digest()


# ---------------------------------------------------------------------------
# BVH construction
# ---------------------------------------------------------------------------

def _expand_bits(x):
    # spread 10 bits to every third position of a 30-bit word
    x = (x | (x << 16)) & 0x030000FF
    x = (x | (x << 8)) & 0x0300F00F
    x = (x | (x << 4)) & 0x030C30C3
    x = (x | (x << 2)) & 0x09249249
    return x


def morton_codes(centroids: np.ndarray) -> np.ndarray:
    """30-bit interleaved codes of centroids quantized in the scene box."""
    lo = centroids.min(axis=0)
    extent = centroids.max(axis=0) - lo
    extent = np.where(extent > 1e-30, extent, 1.0)
    q = np.clip(((centroids - lo) / extent) * 1024.0, 0, 1023).astype(np.uint64)
    return (_expand_bits(q[:, 0]) << 2) | (_expand_bits(q[:, 1]) << 1) | _expand_bits(q[:, 2])


@dataclass
class Bvh:
    """Radix-tree BVH. Node ids: 0..n-2 internal, n-1+k is leaf k."""

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray          # (n-1,) child node ids
    right: np.ndarray
    leaf_tris: np.ndarray     # (n,) original triangle index per leaf slot
    n_leaves: int
    revision: bytes = b""

    def is_leaf(self, node: int) -> bool:
        return node >= max(self.n_leaves - 1, 0) or self.n_leaves == 1


def build_bvh(vertices: np.ndarray, faces: np.ndarray) -> Bvh:
    """Morton-order the triangles and build the radix tree bottom-up."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = len(faces)
    if n < 1:
        raise ValueError("need at least one triangle")
    tri = vertices[faces]                      # (n, 3, 3)
    if not np.all(np.isfinite(tri)):
        raise ValueError("non-finite vertex coordinates")

    codes = morton_codes(tri.mean(axis=1))
    order = np.lexsort((np.arange(n), codes))
    leaf_tris = order.astype(np.int64)

    tri_lo = tri.min(axis=1)[order]
    tri_hi = tri.max(axis=1)[order]
    rev = _fingerprint(vertices, faces)

    if n == 1:
        return Bvh(tri_lo, tri_hi, np.empty(0, np.int64), np.empty(0, np.int64),
                   leaf_tris, 1, rev)

    # keys made unique by appending the leaf rank below the code bits
    keys = [int(c) << 32 | i for i, c in enumerate(codes[order])]

    def delta(i, j):
        if j < 0 or j >= n:
            return -1
        return 64 - (keys[i] ^ keys[j]).bit_length() if keys[i] != keys[j] else 64

    left = np.empty(n - 1, dtype=np.int64)
    right = np.empty(n - 1, dtype=np.int64)
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    for i in range(n - 1):
        d = 1 if delta(i, i + 1) >= delta(i, i - 1) else -1
        d_min = delta(i, i - d)
        lmax = 2
        while delta(i, i + lmax * d) > d_min:
            lmax *= 2
        length = 0
        t = lmax // 2
        while t >= 1:
            if delta(i, i + (length + t) * d) > d_min:
                length += t
            t //= 2
        j = i + length * d
        d_node = delta(i, j)
        # split position: last index sharing > d_node prefix bits with i
        s = 0
        t = (length + 1) // 2
        while True:
            if delta(i, i + (s + t) * d) > d_node:
                s += t
            if t == 1:
                break
            t = (t + 1) // 2
        gamma = i + s * d + min(d, 0)
        lo_idx, hi_idx = min(i, j), max(i, j)
        left[i] = (n - 1 + gamma) if lo_idx == gamma else gamma
        right[i] = (n - 1 + gamma + 1) if hi_idx == gamma + 1 else gamma + 1
        parent[left[i]] = i
        parent[right[i]] = i

    node_min = np.empty((2 * n - 1, 3))
    node_max = np.empty((2 * n - 1, 3))
    node_min[n - 1:] = tri_lo
    node_max[n - 1:] = tri_hi
    visits = np.zeros(n - 1, dtype=np.int64)
    for leaf in range(n - 1, 2 * n - 1):
        node = parent[leaf]
        while node != -1:
            visits[node] += 1
            if visits[node] < 2:
                break       # sibling subtree not finished yet
            node_min[node] = np.minimum(node_min[left[node]], node_min[right[node]])
            node_max[node] = np.maximum(node_max[left[node]], node_max[right[node]])
            node = parent[node]

    return Bvh(node_min, node_max, left, right, leaf_tris, n, rev)


# ---------------------------------------------------------------------------
# Exact triangle-triangle intersection
# ---------------------------------------------------------------------------

def _interval_on_line(proj, dist):
    """Projection interval of each triangle's cross-section with a plane.

    proj, dist: (m, 3) vertex projections on the shared line and signed
    plane distances. Returns (tmin, tmax, any_point).
    """
    m = len(proj)
    qs = np.full((m, 6), np.nan)
    ok = np.zeros((m, 6), dtype=bool)
    edges = ((0, 1), (1, 2), (2, 0))
    for e, (i, j) in enumerate(edges):
        si, sj = dist[:, i], dist[:, j]
        crossing = ((si > COPLANAR_EPS) & (sj < -COPLANAR_EPS)) | \
                   ((si < -COPLANAR_EPS) & (sj > COPLANAR_EPS))
        den = np.where(crossing, si - sj, 1.0)
        qs[:, e] = proj[:, i] + (proj[:, j] - proj[:, i]) * si / den
        ok[:, e] = crossing
    for k in range(3):
        on_plane = np.abs(dist[:, k]) <= COPLANAR_EPS
        qs[:, 3 + k] = proj[:, k]
        ok[:, 3 + k] = on_plane
    tmin = np.where(ok, qs, np.inf).min(axis=1)
    tmax = np.where(ok, qs, -np.inf).max(axis=1)
    return tmin, tmax, ok.any(axis=1)


def _orient2d(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _point_in_tri2d(p, t):
    s = [np.sign(_orient2d(t[i], t[(i + 1) % 3], p)) for i in range(3)]
    return all(v >= 0 for v in s) or all(v <= 0 for v in s)


def _segments_cross2d(p, q, r, s):
    o1, o2 = _orient2d(p, q, r), _orient2d(p, q, s)
    o3, o4 = _orient2d(r, s, p), _orient2d(r, s, q)
    if o1 * o2 < 0 and o3 * o4 < 0:
        return True

    def on_seg(a, b, c):
        return (min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
                and min(a[1], b[1]) <= c[1] <= max(a[1], b[1]))

    for o, (a, b, c) in ((o1, (p, q, r)), (o2, (p, q, s)),
                         (o3, (r, s, p)), (o4, (r, s, q))):
        if o == 0 and on_seg(a, b, c):
            return True
    return False


def _coplanar_overlap(t1, t2, normal):
    axis = int(np.argmax(np.abs(normal)))
    keep = [a for a in range(3) if a != axis]
    a = t1[:, keep]
    b = t2[:, keep]
    for i in range(3):
        for j in range(3):
            if _segments_cross2d(a[i], a[(i + 1) % 3], b[j], b[(j + 1) % 3]):
                return True
    return _point_in_tri2d(a[0], b) or _point_in_tri2d(b[0], a)


def tri_tri_intersect_batch(t1: np.ndarray, t2: np.ndarray) -> np.ndarray:
    """Exact intersection predicate for stacked triangle pairs (m,3,3)x2."""
    t1 = np.asarray(t1, dtype=np.float64).reshape(-1, 3, 3)
    t2 = np.asarray(t2, dtype=np.float64).reshape(-1, 3, 3)
    m = len(t1)
    out = np.zeros(m, dtype=bool)
    if m == 0:
        return out

    n1 = np.cross(t1[:, 1] - t1[:, 0], t1[:, 2] - t1[:, 0])
    n2 = np.cross(t2[:, 1] - t2[:, 0], t2[:, 2] - t2[:, 0])
    len1 = np.linalg.norm(n1, axis=1)
    len2 = np.linalg.norm(n2, axis=1)
    ok = (len1 > 1e-14) & (len2 > 1e-14)
    n1 = n1 / np.where(ok, len1, 1.0)[:, None]
    n2 = n2 / np.where(ok, len2, 1.0)[:, None]

    # signed distances of each triangle's vertices to the other's plane
    s2 = np.einsum("mkj,mj->mk", t2 - t1[:, :1], n1)
    s1 = np.einsum("mkj,mj->mk", t1 - t2[:, :1], n2)

    coplanar = ok & ((np.abs(s2).max(axis=1) <= COPLANAR_EPS)
                     | (np.abs(s1).max(axis=1) <= COPLANAR_EPS))
    separated = (np.all(s2 > COPLANAR_EPS, axis=1) | np.all(s2 < -COPLANAR_EPS, axis=1)
                 | np.all(s1 > COPLANAR_EPS, axis=1) | np.all(s1 < -COPLANAR_EPS, axis=1))

    line = np.cross(n1, n2)
    line_len = np.linalg.norm(line, axis=1)
    crossing = ok & ~coplanar & ~separated & (line_len > 1e-12)
    if np.any(crossing):
        d = line[crossing] / line_len[crossing][:, None]
        p1 = np.einsum("mkj,mj->mk", t1[crossing], d)
        p2 = np.einsum("mkj,mj->mk", t2[crossing], d)
        lo1, hi1, any1 = _interval_on_line(p1, s1[crossing])
        lo2, hi2, any2 = _interval_on_line(p2, s2[crossing])
        out[crossing] = any1 & any2 & (np.maximum(lo1, lo2) <= np.minimum(hi1, hi2))

    for idx in np.flatnonzero(coplanar & ~separated):
        out[idx] = _coplanar_overlap(t1[idx], t2[idx], n1[idx])
    return out


# ---------------------------------------------------------------------------
# Pair queries
# ---------------------------------------------------------------------------

@dataclass
class CollisionPair:
    """One confirmed intersecting triangle pair, f_s < f_t."""

    f_s: int
    f_t: int
    depths_source: np.ndarray = field(default_factory=lambda: np.zeros(3))
    depths_target: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _candidate_leaf_pairs(bvh: Bvh) -> np.ndarray:
    """All distinct leaf pairs with overlapping AABBs, via a pair frontier."""
    n = bvh.n_leaves
    if n < 2:
        return np.empty((0, 2), dtype=np.int64)
    first_leaf = n - 1
    size = (bvh.node_max - bvh.node_min).sum(axis=1)

    wave = np.array([[0, 0]], dtype=np.int64)
    found = []
    while len(wave):
        a, b = wave[:, 0], wave[:, 1]
        same = a == b
        # distinct pairs: keep only overlapping boxes
        diff = ~same
        if np.any(diff):
            ad, bd = a[diff], b[diff]
            overlap = np.all((bvh.node_min[ad] <= bvh.node_max[bd])
                             & (bvh.node_min[bd] <= bvh.node_max[ad]), axis=1)
            ad, bd = ad[overlap], bd[overlap]
        else:
            ad = bd = np.empty(0, dtype=np.int64)

        nxt = []
        # internal self pairs recurse into child combos; a leaf never needs
        # to pair with itself
        sa = a[same & (a < first_leaf)]
        if len(sa):
            l, r = bvh.left[sa], bvh.right[sa]
            nxt.append(np.stack([l, l], axis=1))
            nxt.append(np.stack([r, r], axis=1))
            nxt.append(np.stack([l, r], axis=1))
        if len(ad):
            leaf_a = ad >= first_leaf
            leaf_b = bd >= first_leaf
            both = leaf_a & leaf_b
            if np.any(both):
                found.append(np.stack([ad[both] - first_leaf, bd[both] - first_leaf], axis=1))
            rest = ~both
            ar, br = ad[rest], bd[rest]
            la, lb = leaf_a[rest], leaf_b[rest]
            split_a = ~la & (lb | (size[ar] >= size[br]))
            if np.any(split_a):
                sa_, sb_ = ar[split_a], br[split_a]
                nxt.append(np.stack([bvh.left[sa_], sb_], axis=1))
                nxt.append(np.stack([bvh.right[sa_], sb_], axis=1))
            split_b = ~split_a
            if np.any(split_b):
                sa_, sb_ = ar[split_b], br[split_b]
                nxt.append(np.stack([sa_, bvh.left[sb_]], axis=1))
                nxt.append(np.stack([sa_, bvh.right[sb_]], axis=1))
        # leaf self-pairs (a == b leaf) can't appear: children of distinct
        # internal nodes are distinct, and (l, r) are never equal
        wave = np.concatenate(nxt) if nxt else np.empty((0, 2), dtype=np.int64)

    if not found:
        return np.empty((0, 2), dtype=np.int64)
    pairs = np.concatenate(found)
    tris = bvh.leaf_tris[pairs]
    tris.sort(axis=1)
    return np.unique(tris, axis=0)


def _drop_shared_vertex(faces, pairs):
    if not len(pairs):
        return pairs
    fa = faces[pairs[:, 0]]
    fb = faces[pairs[:, 1]]
    shared = (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))
    return pairs[~shared]


def _drop_masked(pairs, masked_pairs):
    if masked_pairs is None or len(masked_pairs) == 0 or len(pairs) == 0:
        return pairs
    mp = np.sort(np.asarray(masked_pairs, dtype=np.int64).reshape(-1, 2), axis=1)
    keys = pairs[:, 0] * (2 ** 32) + pairs[:, 1]
    bad = np.isin(keys, mp[:, 0] * (2 ** 32) + mp[:, 1])
    return pairs[~bad]


def _confirm_pairs(vertices, faces, pairs, chunk=200_000):
    hits = []
    for start in range(0, len(pairs), chunk):
        p = pairs[start:start + chunk]
        mask = tri_tri_intersect_batch(vertices[faces[p[:, 0]]], vertices[faces[p[:, 1]]])
        hits.append(p[mask])
    return np.concatenate(hits) if hits else pairs[:0]


def find_colliding_pairs(bvh, vertices, faces, masked_pairs=None) -> list:
    """Confirmed self-intersections: BVH candidates -> exact test.

    Pairs sharing a vertex index and pairs in the permanent-contact mask are
    excluded. Raises if the tree was built on a different vertex buffer.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if bvh.revision != _fingerprint(vertices, faces):
        raise ValueError("stale BVH: vertex buffer changed since build")
    cands = _candidate_leaf_pairs(bvh)
    cands = _drop_shared_vertex(faces, cands)
    cands = _drop_masked(cands, masked_pairs)
    hits = _confirm_pairs(vertices, faces, cands)
    return _pairs_with_depths(vertices, faces, hits)


def brute_force_pairs(vertices, faces, masked_pairs=None) -> list:
    """O(F^2) reference query with the same predicate and exclusions."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    n = len(faces)
    iu = np.triu_indices(n, k=1)
    pairs = np.stack([iu[0], iu[1]], axis=1).astype(np.int64)
    pairs = _drop_shared_vertex(faces, pairs)
    pairs = _drop_masked(pairs, masked_pairs)
    hits = _confirm_pairs(vertices, faces, pairs)
    return _pairs_with_depths(vertices, faces, hits)


def _pairs_with_depths(vertices, faces, hits) -> list:
    if not len(hits):
        return []
    fs, ft = hits[:, 0], hits[:, 1]
    # first half: verts of f_s probing f_t's field, second half vice versa
    field_face = np.concatenate([np.repeat(ft, 3), np.repeat(fs, 3)])
    probe_vert = np.concatenate([faces[fs].ravel(), faces[ft].ravel()])
    psi = _cone_field_batch(vertices[faces[field_face]], vertices[probe_vert])
    m = len(hits)
    psi_s = psi[:3 * m].reshape(m, 3)
    psi_t = psi[3 * m:].reshape(m, 3)
    return [CollisionPair(int(f_s), int(f_t), p_s, p_t)
            for (f_s, f_t), p_s, p_t in zip(hits, psi_s, psi_t)]


# ---------------------------------------------------------------------------
# Conic intrusion field
# ---------------------------------------------------------------------------

def _cone_field_batch(tris, pts, want_grads=False):
    """Vectorized field (and optional gradients) for (m,3,3) vs (m,3).

    psi = max(0, -(v - b).n) * max(0, 1 - |tangential| / circumradius)
    """
    global _degenerate_warnings
    a0, a1, a2 = tris[:, 0], tris[:, 1], tris[:, 2]
    g = (a0 + a1 + a2) / 3.0
    u = pts - g
    e1, e2, e3 = a1 - a0, a2 - a0, a2 - a1
    mvec = np.cross(e1, e2)
    mlen = np.linalg.norm(mvec, axis=1)
    degenerate = mlen / 2.0 <= DEGENERATE_AREA
    _degenerate_warnings += int(np.count_nonzero(degenerate))
    safe = np.where(degenerate, 1.0, mlen)
    n = mvec / safe[:, None]

    s = -np.einsum("mj,mj->m", u, n)
    w = u + s[:, None] * n                      # tangential offset from barycenter
    rho = np.linalg.norm(w, axis=1)
    l1 = np.linalg.norm(e1, axis=1)
    l2 = np.linalg.norm(e2, axis=1)
    l3 = np.linalg.norm(e3, axis=1)
    r = l1 * l2 * l3 / (2.0 * safe)
    tau = 1.0 - rho / np.where(r > 0, r, 1.0)
    active = ~degenerate & (s > 0) & (tau > 0)
    psi = np.where(active, s * tau, 0.0)
    if not want_grads:
        return psi

    d_pt = np.zeros_like(pts)
    d_a = np.zeros_like(tris)
    idx = np.flatnonzero(active)
    if len(idx):
        sA, tA, rA, rhoA = s[idx], tau[idx], r[idx], rho[idx]
        nA, wA = n[idx], w[idx]
        what = np.where(rhoA[:, None] > 1e-300, wA / np.maximum(rhoA, 1e-300)[:, None], 0.0)
        e1A, e2A, e3A = e1[idx], e2[idx], e3[idx]
        l1A, l2A, l3A, mA = l1[idx], l2[idx], l3[idx], safe[idx]

        dv = -(tA[:, None] * nA + (sA / rA)[:, None] * what)
        base = -dv / 3.0
        q = -(tA[:, None] * wA + (sA ** 2 / rA)[:, None] * what
              + (sA * rhoA / rA)[:, None] * nA) / mA[:, None]
        c = (sA * rhoA / rA)[:, None]
        # d(log L_i) terms: unit edge over its length
        u1 = e1A / (l1A ** 2)[:, None]
        u2 = e2A / (l2A ** 2)[:, None]
        u3 = e3A / (l3A ** 2)[:, None]

        d_pt[idx] = dv
        d_a[idx, 0] = base + np.cross(q, e2A - e1A) - c * (u1 + u2)
        d_a[idx, 1] = base - np.cross(q, e2A) + c * (u1 - u3)
        d_a[idx, 2] = base + np.cross(q, e1A) + c * (u2 + u3)
    return psi, d_pt, d_a


def cone_field(triangle: np.ndarray, point: np.ndarray) -> float:
    """Intrusion depth of a single point into a triangle's cone. >= 0."""
    psi = _cone_field_batch(np.asarray(triangle, dtype=np.float64)[None],
                            np.asarray(point, dtype=np.float64)[None])
    return float(psi[0])


def collision_energy(pairs, vertices, faces):
    """Sum of squared intrusion depths over both sides of every pair.

    Returns (energy, d_energy/d_vertices). Zero and a zero gradient for an
    empty pair list. The pair list may be held fixed while vertices move (the
    fields are re-evaluated at the current positions).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    grad = np.zeros_like(vertices)
    if not pairs:
        return 0.0, grad

    fs = np.array([p.f_s for p in pairs], dtype=np.int64)
    ft = np.array([p.f_t for p in pairs], dtype=np.int64)
    # each pair: verts of f_s probe f_t's field, and vice versa
    field_face = np.concatenate([np.repeat(ft, 3), np.repeat(fs, 3)])
    probe_vert = np.concatenate([faces[fs].ravel(), faces[ft].ravel()])

    tris = vertices[faces[field_face]]
    pts = vertices[probe_vert]
    psi, d_pt, d_a = _cone_field_batch(tris, pts, want_grads=True)

    energy = float(np.sum(psi ** 2))
    coef = 2.0 * psi
    np.add.at(grad, probe_vert, coef[:, None] * d_pt)
    corners = faces[field_face]
    for k in range(3):
        np.add.at(grad, corners[:, k], coef[:, None] * d_a[:, k])
    return energy, grad
