"""Independent straight-line reference implementations used by the tests."""

import math

import numpy as np

from st3d.graph import circle_iou


def mc_iou(r1, r2, d, n, rng):
    """Monte Carlo IoU of discs at (0,0) r1 and (d,0) r2 over their bounding box."""
    x0, x1 = min(-r1, d - r2), max(r1, d + r2)
    y0 = -max(r1, r2)
    box = (x1 - x0) * 2 * (-y0)
    inter = union = 0
    chunk = 1_000_000
    left = n
    while left:
        m = min(chunk, left)
        left -= m
        x = rng.uniform(x0, x1, m)
        y = rng.uniform(y0, -y0, m)
        a = x * x + y * y <= r1 * r1
        b = (x - d) ** 2 + y * y <= r2 * r2
        inter += np.count_nonzero(a & b)
        union += np.count_nonzero(a | b)
    return inter / union if union else 0.0


def lens_iou(c1, r1, c2, r2):
    d = math.dist(c1, c2)
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        small = min(r1, r2)
        return small * small / max(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    k = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    inter = a1 + a2 - k
    return inter / (math.pi * r1 * r1 + math.pi * r2 * r2 - inter)


def cosine(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    return dot / (math.sqrt(sum(a * a for a in u)) * math.sqrt(sum(b * b for b in v)))


def brute_graph(stack, k_intra, k_cross, cross=True):
    """Edge set {(src, dst, kind): weight} from exhaustive pairwise enumeration."""
    pos = [tuple(p) for p in stack.aligned_centers]
    rad = list(stack.aligned_radii)
    lay = list(stack.layer_of)
    feat = [list(f) for f in stack.features.values]
    n = len(pos)
    edges = {}
    for i in range(n):
        intra = []
        inter = []
        for j in range(n):
            if j == i:
                continue
            if lay[j] == lay[i]:
                intra.append((j, 1.0 / math.dist(pos[i], pos[j])))
            elif cross:
                w = lens_iou(pos[i], rad[i], pos[j], rad[j]) + cosine(feat[i], feat[j])
                if w > 0:
                    inter.append((j, w))
        for cand, k, kind in ((intra, k_intra, "intra_layer"), (inter, k_cross, "cross_layer")):
            cand.sort(key=lambda t: (-t[1], t[0]))
            for j, w in cand[:k]:
                edges[(i, j, kind)] = w
    return edges


def graph_edges(g):
    return {(e.src, e.dst, e.kind): e.weight for e in g.edges}


def propagate_once_reference(n, edges, labels, known, iterations, node_weights=None):
    """Plain-loop Jacobi propagation over an undirected weighted edge dict {(i, j): w}."""
    alpha = [1.0] * n if node_weights is None else list(node_weights)
    known_rows = [labels[i] for i in range(n) if known[i]]
    g = len(labels[0])
    mean = [sum(r[c] for r in known_rows) / len(known_rows) for c in range(g)]
    p = [list(labels[i]) if known[i] else list(mean) for i in range(n)]
    reached = list(known)
    nbr = {i: [] for i in range(n)}
    for (i, j), w in edges.items():
        nbr[i].append((j, w))
        nbr[j].append((i, w))
    for _ in range(iterations):
        new = [row[:] for row in p]
        new_reached = reached[:]
        for i in range(n):
            if known[i]:
                continue
            den = sum(w for j, w in nbr[i] if reached[j])
            if den <= 0:
                continue
            new[i] = [sum(alpha[j] * w * p[j][c] for j, w in nbr[i] if reached[j]) / den for c in range(g)]
            new_reached[i] = True
        p, reached = new, new_reached
    return p, reached


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    if sxx == 0 or syy == 0:
        return 0.0
    return sxy / math.sqrt(sxx * syy)


def pcc_loss_ref(p, y):
    rows = [1.0 - pearson(list(a), list(b)) for a, b in zip(p, y)]
    return sum(rows) / len(rows)


def total_loss_ref(ps, pr, pg, ys, yr, yg, ls=0.75, lr=0.5, lg=0.5, l1=0.25, l2=0.25, g1=1.0, g2=1.0):
    mse = sum((a - b) ** 2 for ra, rb in zip(ps, ys) for a, b in zip(ra, rb)) / (len(ps) * len(ps[0]))
    lp = mse + ls * pcc_loss_ref(ps, ys) + lr * pcc_loss_ref(pr, yr) + lg * pcc_loss_ref(pg, yg)
    lc = l1 * pcc_loss_ref(ps, pr) + l2 * pcc_loss_ref(ps, pg)
    return g1 * lp + g2 * lc


def overlap_oracle(s, y, known):
    pos, rad, lay = s.aligned_centers, s.aligned_radii, s.layer_of
    out = np.where(known[:, None], y, y[known].mean(axis=0))
    for i in range(s.n_spots):
        if known[i]:
            continue
        ws = [(j, circle_iou(pos[i], rad[i], pos[j], rad[j]))
              for j in range(s.n_spots) if known[j] and lay[j] != lay[i]]
        ws = [(j, w) for j, w in ws if w > 0]
        if ws:
            den = math.fsum(w for _, w in ws)
            out[i] = [math.fsum(w * y[j, g] for j, w in ws) / den for g in range(y.shape[1])]
    return out


def sim_oracle(f, y, known, m):
    out = np.where(known[:, None], y, y[known].mean(axis=0))
    for i in range(len(f)):
        if known[i]:
            continue
        cand = []
        for j in range(len(f)):
            if known[j] and np.linalg.norm(f[j]) > 0:
                cand.append((-(f[i] @ f[j]) / (np.linalg.norm(f[i]) * np.linalg.norm(f[j])), j))
        cand.sort()
        top = [j for _, j in cand[:m]]
        out[i] = [math.fsum(y[j, g] for j in top) / len(top) for g in range(y.shape[1])]
    return out
