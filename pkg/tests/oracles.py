"""Independent reference implementations used by several test modules."""

import math
from fractions import Fraction

import numpy as np


def pca_axis_eigh(mask_data):
    """Major axis from numpy's symmetric eigen-solver on the population covariance."""
    ys, xs = np.nonzero(mask_data)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    cov = np.cov(pts.T, bias=True)
    vals, vecs = np.linalg.eigh(cov)
    return vecs[:, 1], vals[::-1]


def axis_angle_error(a, b):
    """Angle between two undirected axes, in radians."""
    c = abs(a[0] * b[0] + a[1] * b[1]) / (math.hypot(*a) * math.hypot(*b))
    return math.acos(min(1.0, c))


def boundary_pixels(mask_data):
    h, w = mask_data.shape
    out = []
    for y in range(h):
        for x in range(w):
            if not mask_data[y, x]:
                continue
            nbrs = ((x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1))
            if any(not (0 <= i < w and 0 <= j < h) or not mask_data[j, i] for i, j in nbrs):
                out.append((x, y))
    return out


def greedy_fps(mask_data, count=4):
    """Exhaustive greedy farthest-point choice with exact rational arithmetic."""
    ys, xs = np.nonzero(mask_data)
    n = len(xs)
    cx = Fraction(int(xs.sum()), n)
    cy = Fraction(int(ys.sum()), n)
    pts = boundary_pixels(mask_data)
    best, seed = None, None
    for i, (x, y) in enumerate(pts):
        d = (x - cx) ** 2 + (y - cy) ** 2
        if best is None or d > best:
            best, seed = d, i
    chosen = [seed]
    while len(chosen) < count:
        best, pick = None, None
        for i, (x, y) in enumerate(pts):
            d = min((x - pts[j][0]) ** 2 + (y - pts[j][1]) ** 2 for j in chosen)
            if best is None or d > best:
                best, pick = d, i
        chosen.append(pick)
    return [pts[i] for i in chosen]


def cosine_rank(ids, vectors, query):
    """Brute-force ranking: python dot products, sorted by (-similarity, id)."""
    qn = math.sqrt(math.fsum(float(v) * float(v) for v in query))
    scored = []
    for i, vec in zip(ids, vectors):
        vn = math.sqrt(math.fsum(float(v) * float(v) for v in vec))
        dot = math.fsum(float(a) * float(b) for a, b in zip(vec, query))
        s = 0.0 if vn == 0 or qn == 0 else dot / (vn * qn)
        scored.append((s, i))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored


def same_ranking(got, expected, tol=1e-9):
    """Rankings agree position by position, allowing swaps only among near-equal scores."""
    if len(got) != len(expected):
        return False
    for (gid, gs), (es, eid) in zip(got, expected):
        if abs(gs - es) > tol:
            return False
        if gid != eid:
            # a swap is only acceptable between scores equal to within tol
            partner = [s for s, i in expected if i == gid]
            if not partner or abs(partner[0] - es) > tol:
                return False
    return True


def path_length_fold(traj):
    total = 0.0
    for a, b in zip(traj, traj[1:]):
        total += math.sqrt(sum((p - q) ** 2 for p, q in zip(a, b)))
    return total


def cosine_rank_rows(ids, vectors, query):
    """Vectorised brute-force ranking: normalise rows first, then one matrix product."""
    v = np.asarray(vectors, dtype=np.float64)
    q = np.asarray(query, dtype=np.float64)
    norms = np.sqrt((v * v).sum(axis=1))
    qn = math.sqrt(float(q @ q))
    safe = np.where(norms == 0, 1.0, norms)
    scores = (v / safe[:, None]) @ (q / qn if qn else q)
    scores[norms == 0] = 0.0
    return sorted(zip(scores.tolist(), ids), key=lambda t: (-t[0], t[1]))


def segment_touches_square(a, b, cx, cy, half=0.5):
    """Separating-axis test between segment a-b and an axis-aligned square."""
    if max(a[0], b[0]) < cx - half or min(a[0], b[0]) > cx + half:
        return False
    if max(a[1], b[1]) < cy - half or min(a[1], b[1]) > cy + half:
        return False
    # the remaining candidate axis is the segment normal
    nx, ny = -(b[1] - a[1]), b[0] - a[0]
    c = nx * (cx - a[0]) + ny * (cy - a[1])
    r = half * (abs(nx) + abs(ny))
    return abs(c) <= r


def segment_touches_mask(mask_data, a, b):
    ys, xs = np.nonzero(mask_data)
    return any(segment_touches_square(a, b, int(x), int(y)) for x, y in zip(xs, ys))
