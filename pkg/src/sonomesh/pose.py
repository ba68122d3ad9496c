"""2-D joint extraction from an acoustic image.

Pipeline: threshold + connected components -> weighted GMM-EM per box ->
maximum-posterior segmentation -> joint candidates (segment centroids and
boundary density peaks) -> labelling against a fitted skeleton template.

Pixel coordinates are ``(x, y) = (column, row)`` throughout.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, optimize
from scipy.optimize import linear_sum_assignment

from . import skeleton as sk
from .errors import DomainError, NumericError, ShapeError

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class BoundingBox:
    row_min: int
    row_max: int
    col_min: int
    col_max: int

    def __post_init__(self):
        for name in ("row_min", "row_max", "col_min", "col_max"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.row_min > self.row_max or self.col_min > self.col_max:
            raise DomainError(f"degenerate bounding box {self}")
        if self.row_min < 0 or self.col_min < 0:
            raise DomainError(f"bounding box outside the image: {self}")

    @property
    def height(self):
        return self.row_max - self.row_min + 1

    @property
    def width(self):
        return self.col_max - self.col_min + 1

    @property
    def area(self):
        return self.height * self.width

    @property
    def center(self):
        """(x, y) pixel centre."""
        return (0.5 * (self.col_min + self.col_max), 0.5 * (self.row_min + self.row_max))

    @property
    def slices(self):
        return slice(self.row_min, self.row_max + 1), slice(self.col_min, self.col_max + 1)

    def contains(self, x, y):
        return self.col_min <= x <= self.col_max and self.row_min <= y <= self.row_max

    def union(self, other):
        return BoundingBox(min(self.row_min, other.row_min), max(self.row_max, other.row_max),
                           min(self.col_min, other.col_min), max(self.col_max, other.col_max))

    def iou(self, other):
        h = min(self.row_max, other.row_max) - max(self.row_min, other.row_min) + 1
        w = min(self.col_max, other.col_max) - max(self.col_min, other.col_min) + 1
        if h <= 0 or w <= 0:
            return 0.0
        inter = h * w
        return inter / (self.area + other.area - inter)


@dataclass(frozen=True)
class GmmModel:
    means: np.ndarray  # (K, 2) pixel (x, y)
    covariances: np.ndarray  # (K, 2, 2)
    weights: np.ndarray  # (K,)
    box: BoundingBox = None
    threshold: float = 0.0
    eps_reg: float = 0.0
    loglik_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covariances, dtype=float)
        w = np.asarray(self.weights, dtype=float)
        K = w.size
        if means.shape != (K, 2) or covs.shape != (K, 2, 2):
            raise ShapeError(f"GMM parameter shapes disagree: {means.shape}, {covs.shape}, {w.shape}")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise DomainError("GMM weights must be >= 0 and sum to 1")
        if not np.allclose(covs, covs.transpose(0, 2, 1)):
            raise DomainError("GMM covariances must be symmetric")
        if np.any(np.linalg.eigvalsh(covs)[:, 0] <= 0):
            raise DomainError("GMM covariances must be positive definite")
        for name, v in (("means", means), ("covariances", covs), ("weights", w)):
            object.__setattr__(self, name, v)

    @property
    def K(self):
        return self.weights.size

    def log_component_densities(self, X):
        """(n, K) matrix of log(w_k) + log N(x_i | mu_k, Sigma_k)."""
        return _log_joint(np.asarray(X, dtype=float), self.means, self.covariances, self.weights)


@dataclass(frozen=True)
class SegmentMap:
    labels: np.ndarray
    K: int
    box: BoundingBox = None

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ShapeError("segment labels must be 2-D")
        if lab.size and (lab.min() < 0 or lab.max() > self.K):
            raise DomainError(f"segment labels must lie in 0..{self.K}")
        lab = lab.astype(np.int32)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    def members(self, k):
        """(n, 2) pixel (x, y) coordinates of segment ``k`` (1-based)."""
        r, c = np.nonzero(self.labels == k)
        return np.column_stack([c, r]).astype(float)

    def present(self):
        return [k for k in range(1, self.K + 1) if np.any(self.labels == k)]


@dataclass(frozen=True)
class JointSet2D:
    joints: np.ndarray  # (16, 2) pixel (x, y)
    flagged: np.ndarray = None
    names: tuple = sk.JOINT_NAMES
    template: str = ""

    def __post_init__(self):
        j = np.asarray(self.joints, dtype=float)
        if j.shape != (sk.N_JOINTS, 2):
            raise ShapeError(f"JointSet2D needs exactly 16 (x, y) joints, got {j.shape}")
        if not np.all(np.isfinite(j)):
            raise DomainError("joint coordinates must be finite")
        flagged = np.zeros(sk.N_JOINTS, bool) if self.flagged is None else np.asarray(self.flagged, bool)
        object.__setattr__(self, "joints", j)
        object.__setattr__(self, "flagged", flagged)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "template": self.template,
            "joints": [{"name": n, "x": float(x), "y": float(y), "flagged": bool(f)}
                       for n, (x, y), f in zip(self.names, self.joints, self.flagged)],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise DomainError(f"unsupported joints schema_version {d.get('schema_version')!r}")
        entries = d["joints"]
        names = tuple(e["name"] for e in entries)
        if names != sk.JOINT_NAMES:
            raise DomainError("joint names/order do not match the 16-joint skeleton")
        return cls(joints=[[e["x"], e["y"]] for e in entries],
                   flagged=[e.get("flagged", False) for e in entries], template=d.get("template", ""))


# -- detection -------------------------------------------------------------------

_EIGHT = np.ones((3, 3), dtype=bool)


def foreground_mask(pixels, threshold_q=0.90):
    """Pixels at or above the ``threshold_q`` quantile (and nonzero)."""
    px = np.asarray(pixels, dtype=float)
    if not 0 <= threshold_q <= 1:
        raise DomainError(f"threshold_q must lie in [0, 1], got {threshold_q}")
    thr = float(np.quantile(px, threshold_q))
    return (px >= thr) & (px > 0), thr


def detect_human(img, threshold_q=0.90, min_area=9, closing=1, iou_merge=0.3):
    """Bounding boxes of bright connected regions, largest energy first.

    ``closing`` runs that many 3x3 binary-closing iterations on the mask
    before labelling; it bridges the one-pixel gaps speckle leaves inside a
    body.  Use 0 for the plain threshold-and-label behaviour.
    """
    px = np.asarray(img.pixels if hasattr(img, "pixels") else img, dtype=float)
    if px.size == 0:
        raise ShapeError("detect_human needs a non-empty image")
    if not np.any(px > 0):
        return []
    mask, _ = foreground_mask(px, threshold_q)
    if closing:
        # pad so closing does not glue components to the border
        mask = ndimage.binary_closing(np.pad(mask, closing), _EIGHT, iterations=closing)[
            closing:-closing, closing:-closing] | mask
    lab, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    areas = np.bincount(lab.ravel(), minlength=n + 1)
    boxes = []
    for i, sl in enumerate(ndimage.find_objects(lab), start=1):
        if sl is None or areas[i] < min_area:
            continue
        boxes.append(BoundingBox(sl[0].start, sl[0].stop - 1, sl[1].start, sl[1].stop - 1))
    merged = True
    while merged:
        merged = False
        for a in range(len(boxes)):
            for b in range(a + 1, len(boxes)):
                if boxes[a].iou(boxes[b]) > iou_merge:
                    boxes[a] = boxes[a].union(boxes.pop(b))
                    merged = True
                    break
            if merged:
                break
    energy = [float(np.sum(px[b.slices] ** 2)) for b in boxes]
    order = sorted(range(len(boxes)), key=lambda i: (-energy[i], boxes[i].row_min, boxes[i].col_min))
    return [boxes[i] for i in order]


# -- GMM ---------------------------------------------------------------------------

def _log_joint(X, means, covs, weights):
    n, K = X.shape[0], weights.size
    out = np.empty((n, K))
    for k in range(K):
        L = np.linalg.cholesky(covs[k])
        z = np.linalg.solve(L, (X - means[k]).T)
        logdet = 2 * np.log(np.diag(L)).sum()
        with np.errstate(divide="ignore"):
            out[:, k] = np.log(weights[k]) - 0.5 * (np.sum(z * z, axis=0) + logdet + 2 * np.log(2 * np.pi))
    return out


def _logsumexp(a):
    m = np.max(a, axis=1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return (m + np.log(np.sum(np.exp(a - m), axis=1, keepdims=True)))[:, 0]


def _clip_cov(S, eps):
    # maximiser of the Gaussian likelihood subject to eigenvalues >= eps
    vals, vecs = np.linalg.eigh(S)
    vals = np.maximum(vals, eps)
    C = (vecs * vals) @ vecs.T
    return 0.5 * (C + C.T)


def _m_step(X, w, resp, eps):
    nk = resp.T @ w  # (K,)
    K = resp.shape[1]
    means = np.zeros((K, 2))
    covs = np.zeros((K, 2, 2))
    for k in range(K):
        rw = resp[:, k] * w
        if nk[k] <= 0:
            means[k] = X[np.argmax(w)]
            covs[k] = eps * np.eye(2)
            continue
        means[k] = rw @ X / nk[k]
        d = X - means[k]
        covs[k] = _clip_cov((d * rw[:, None]).T @ d / nk[k], eps)
    return means, covs, nk / nk.sum()


def _kmeans_pp(X, w, K, rng):
    centers = [X[rng.choice(X.shape[0], p=w)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        p = w * d2
        if p.sum() <= 0:
            p = w
        centers.append(X[rng.choice(X.shape[0], p=p / p.sum())])
        d2 = np.minimum(d2, np.sum((X - centers[-1]) ** 2, axis=1))
    return np.array(centers)


def box_samples(img, box, threshold_q=0.90):
    """Foreground pixel coordinates inside ``box`` and their normalised weights."""
    px = np.asarray(img.pixels if hasattr(img, "pixels") else img, dtype=float)
    mask, thr = foreground_mask(px, threshold_q)
    rs, cs = box.slices
    r, c = np.nonzero(mask[rs, cs])
    X = np.column_stack([c + box.col_min, r + box.row_min]).astype(float)
    w = px[r + box.row_min, c + box.col_min]
    return X, w, thr


def fit_gmm(img, box, K=8, seed=0, threshold_q=0.90, max_iter=200, tol=1e-6):
    """Intensity-weighted EM on the foreground pixels of ``box``.

    Each pixel counts with weight proportional to its magnitude.  The
    log-likelihood is the weighted mean log density, so it does not depend
    on the overall image scale.  Covariance eigenvalues are floored at
    ``1e-6 * diag^2`` where ``diag`` is the box diagonal.
    """
    if K < 1:
        raise DomainError(f"K must be >= 1, got {K}")
    X, w, thr = box_samples(img, box, threshold_q)
    if X.shape[0] < 4 * K:
        raise DomainError(f"box holds {X.shape[0]} foreground pixels; need >= {4 * K} for K={K}")
    w = w / w.sum()
    eps = 1e-6 * (box.height ** 2 + box.width ** 2)
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(X, w, K, rng)
    hard = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((X.shape[0], K))
    resp[np.arange(X.shape[0]), hard] = 1.0
    means, covs, weights = _m_step(X, w, resp, eps)
    trace = []
    for _ in range(max_iter):
        lj = _log_joint(X, means, covs, weights)
        lse = _logsumexp(lj)
        ll = float(w @ lse)
        if not np.isfinite(ll):
            raise NumericError("GMM log-likelihood became non-finite")
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] < tol:
            break
        resp = np.exp(lj - lse[:, None])
        means, covs, weights = _m_step(X, w, resp, eps)
    return GmmModel(means=means, covariances=covs, weights=weights, box=box, threshold=thr,
                    eps_reg=eps, loglik_trace=np.array(trace))


def segment(img, gmm):
    """Label foreground pixels inside the GMM's box by maximum posterior."""
    px = np.asarray(img.pixels if hasattr(img, "pixels") else img, dtype=float)
    labels = np.zeros(px.shape, dtype=np.int32)
    box = gmm.box or BoundingBox(0, px.shape[0] - 1, 0, px.shape[1] - 1)
    rs, cs = box.slices
    r, c = np.nonzero((px[rs, cs] >= gmm.threshold) & (px[rs, cs] > 0))
    if r.size:
        X = np.column_stack([c + box.col_min, r + box.row_min]).astype(float)
        # np.argmax keeps the lowest index on ties
        labels[r + box.row_min, c + box.col_min] = np.argmax(gmm.log_component_densities(X), axis=1) + 1
    return SegmentMap(labels=labels, K=gmm.K, box=box)


# -- joints --------------------------------------------------------------------

def segment_centroid(points):
    """Unweighted geometric centre of a set of (x, y) pixels."""
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        raise DomainError("empty segment has no centroid")
    return points.mean(axis=0)


def segment_adjacency(centroids):
    """Pairs (p, q) of segments ordered by ascending centroid distance."""
    keys = sorted(centroids)
    pairs = [(float(np.hypot(*(centroids[p] - centroids[q]))), p, q)
             for i, p in enumerate(keys) for q in keys[i + 1:]]
    return [(p, q, d) for d, p, q in sorted(pairs)]


def boundary_pixels(labels, k):
    """Pixels of segment ``k`` with an 8-neighbour carrying a different label."""
    m = labels == k
    inner = ndimage.binary_erosion(m, _EIGHT, border_value=0)
    r, c = np.nonzero(m & ~inner)
    return np.column_stack([c, r]).astype(float)


def boundary_density_peaks(labels, bandwidth=2.0):
    """Local maxima of a Gaussian KDE over all segment-boundary pixels.

    Boundaries between touching segments (joint "intersections") and the
    outer silhouette extremities ("peripheries") both show up as dense
    clusters of boundary pixels.
    """
    fg = labels > 0
    edge = fg & ~ndimage.binary_erosion(fg, _EIGHT, border_value=0)
    for k in np.unique(labels[fg]):
        m = labels == k
        edge |= m & ~ndimage.binary_erosion(m, _EIGHT, border_value=0)
    if not edge.any():
        return np.zeros((0, 2))
    dens = ndimage.gaussian_filter(edge.astype(float), bandwidth, mode="constant")
    peaks = (dens == ndimage.maximum_filter(dens, size=int(2 * bandwidth) * 2 + 1)) & edge
    r, c = np.nonzero(peaks)
    return np.column_stack([c, r]).astype(float)


def silhouette_extremes(labels):
    """Extreme foreground pixels along the 8 compass directions."""
    r, c = np.nonzero(labels > 0)
    if r.size == 0:
        return np.zeros((0, 2))
    P = np.column_stack([c, r]).astype(float)
    out = []
    for ang in np.arange(8) * np.pi / 4:
        u = np.array([np.cos(ang), np.sin(ang)])
        out.append(P[np.argmax(P @ u)])
    return np.unique(np.array(out), axis=0)


def template_pixels(joints2d, box, aspect=1.0):
    """Scale 2-D body-frame joints (x lateral, y up) into ``box`` pixels.

    Height maps to the box height; lateral extent is scaled by the same
    factor (times ``aspect``, columns per row for equal meters) and centred
    on the box.  The subject's left (+x) goes to smaller column indices,
    matching the image's cross-range axis.
    """
    j = np.asarray(joints2d, dtype=float)
    lo, hi = j.min(axis=0), j.max(axis=0)
    s = (box.height - 1) / max(hi[1] - lo[1], 1e-12)
    cx = 0.5 * (lo[0] + hi[0])
    x = box.center[0] - (j[:, 0] - cx) * s * aspect
    y = box.row_min + (hi[1] - j[:, 1]) * s
    return np.column_stack([x, y])


def _placed(base, params):
    # similarity placement: scale about the base centre, then translate
    s, tx, ty = params
    c = base.mean(axis=0)
    return c + s * (base - c) + np.array([tx, ty])


def _bone_distance(points, joints_px):
    """Distance from each point to the nearest bone segment."""
    a = joints_px[[p for p, _ in sk.BONES]]
    b = joints_px[[c for _, c in sk.BONES]]
    ab = b - a
    t = np.einsum("nbk,bk->nb", points[:, None, :] - a[None], ab) / np.maximum((ab * ab).sum(1), 1e-12)
    t = np.clip(t, 0.0, 1.0)
    proj = a[None] + t[..., None] * ab[None]
    return np.sqrt(((points[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)


def fit_template(joints_px, fg_points, dist_map, per_bone=6, max_points=2000):
    """Refine scale and offset of a template skeleton to the foreground.

    Minimises a symmetric chamfer cost: mean distance from points sampled
    along the template bones to the foreground, plus mean distance from
    foreground pixels to the nearest bone.  Returns ``(joints, cost)``.
    """
    H, W = dist_map.shape
    stride = max(1, int(np.ceil(fg_points.shape[0] / max_points)))
    fg = fg_points[::stride]
    t = np.linspace(0, 1, per_bone)

    def cost(params):
        jp = _placed(joints_px, params)
        sp = np.concatenate([jp[p] + t[:, None] * (jp[c] - jp[p]) for p, c in sk.BONES])
        xi = np.clip(np.round(sp[:, 0]).astype(int), 0, W - 1)
        yi = np.clip(np.round(sp[:, 1]).astype(int), 0, H - 1)
        return dist_map[yi, xi].mean() + _bone_distance(fg, jp).mean()

    res = optimize.minimize(cost, x0=[1.0, 0.0, 0.0], method="Nelder-Mead",
                            options={"xatol": 1e-2, "fatol": 1e-4, "maxiter": 300,
                                     "initial_simplex": [[1, 0, 0], [1.05, 0, 0], [1, 2, 0], [1, 0, 2]]})
    return _placed(joints_px, res.x), float(res.fun)


def _clamp_to(point, pts):
    d = np.hypot(*(pts - point).T)
    return pts[np.argmin(d)]


def locate_joints(img, seg, gmm=None, templates=None, gate=None, bandwidth=2.0):
    """Label 16 joints from segment centroids and boundary density peaks.

    ``templates`` maps names to 2-D body-frame joint arrays (x lateral, y
    up); by default the eight action poses at unit scale.  Each template is
    scaled into the foreground's bounding box, refined by chamfer fitting,
    and the best-fitting one supplies the expected joint positions.
    Candidates are assigned to joints by Hungarian matching; assignments
    farther than ``gate`` pixels (default 3% of the box height) are rejected
    and those joints keep the template position and are flagged.  Assigned
    joints are clamped to the pixels of the segment they came from.
    """
    labels = seg.labels
    present = seg.present()
    aspect = 1.0
    if hasattr(img, "range_bin_m") and np.isfinite(img.azimuth_bin_m):
        aspect = img.range_bin_m / img.azimuth_bin_m
    H, W = labels.shape
    fg = labels > 0
    if not present:
        raise DomainError("locate_joints needs at least one foreground segment")
    r, c = np.nonzero(fg)
    box = BoundingBox(r.min(), r.max(), c.min(), c.max())
    if templates is None:
        templates = {pid: sk.pose_joints(pid, 1.0)[:, :2] for pid in sk.POSE_IDS}

    if len(present) == 1:
        name, tj = next(iter(templates.items()))
        jp = np.clip(template_pixels(tj, box, aspect), [0, 0], [W - 1, H - 1])
        return JointSet2D(jp, flagged=np.ones(sk.N_JOINTS, bool), template=name)

    fg_points = np.column_stack([c, r]).astype(float)
    dist_map = ndimage.distance_transform_edt(~fg)
    best = None
    for name, tj in templates.items():
        jp, cost = fit_template(template_pixels(tj, box, aspect), fg_points, dist_map)
        if best is None or cost < best[2]:
            best = (name, jp, cost)
    name, expected, _ = best

    cand, owner = [], []
    for k in present:
        cand.append(segment_centroid(seg.members(k)))
        owner.append(k)
    for p in np.vstack([boundary_density_peaks(labels, bandwidth), silhouette_extremes(labels)]):
        cand.append(p)
        owner.append(int(labels[int(p[1]), int(p[0])]))
    cand = np.array(cand)

    gate = 0.03 * box.height if gate is None else gate
    D = np.hypot(expected[:, None, 0] - cand[None, :, 0], expected[:, None, 1] - cand[None, :, 1])
    big = 1e6
    rows, cols = linear_sum_assignment(np.where(D <= gate, D, big))
    joints = expected.copy()
    flagged = np.ones(sk.N_JOINTS, bool)
    for j, ci in zip(rows, cols):
        if D[j, ci] > gate:
            continue
        joints[j] = _clamp_to(cand[ci], seg.members(owner[ci]))
        flagged[j] = False
    joints = np.clip(joints, [0, 0], [W - 1, H - 1])
    return JointSet2D(joints, flagged=flagged, template=name)


def extract_joints(img, K=8, seed=0, threshold_q=0.90, min_area=9, closing=1, **kw):
    """detect_human -> fit_gmm -> segment -> locate_joints on the top box."""
    boxes = detect_human(img, threshold_q=threshold_q, min_area=min_area, closing=closing)
    if not boxes:
        raise DomainError("no human-sized region found in the image")
    gmm = fit_gmm(img, boxes[0], K=K, seed=seed, threshold_q=threshold_q)
    seg = segment(img, gmm)
    return locate_joints(img, seg, gmm, **kw), {"boxes": boxes, "gmm": gmm, "segments": seg}
