"""Registration module: 2-D joint embeddings matched onto a canonical 3-D grid.

Networks (all tanh, float64):

* ``embed_2d``: 15x15 patch around a joint -> conv3x3 (8) -> conv3x3/2 (8)
  -> linear -> 16-d.
* ``embed_3d``: 3-D point -> 32 -> 32 -> 16.
* ``stage2_map``: [mean joint embedding, flattened template] -> 32 -> 48,
  bounded by ``0.5 * tanh`` and added to the template joints.

Gradients come from torch autograd; the optimiser is the small Adam below.
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import skeleton as sk
from .errors import ConfigError, DomainError, NumericError, ShapeError, TrainingError

EMBED_DIM = 16
PATCH = 15
HIDDEN = 32
OFFSET_LIMIT = 0.5  # meters per coordinate
DTYPE = torch.float64


# -- parameters ----------------------------------------------------------------

def _shapes(channels=1):
    conv_out = (PATCH - 2 - 3) // 2 + 1
    return OrderedDict([
        ("c1.w", (8, channels, 3, 3)), ("c1.b", (8,)),
        ("c2.w", (8, 8, 3, 3)), ("c2.b", (8,)),
        ("l2d.w", (EMBED_DIM, 8 * conv_out * conv_out)), ("l2d.b", (EMBED_DIM,)),
        ("m1.w", (HIDDEN, 3)), ("m1.b", (HIDDEN,)),
        ("m2.w", (HIDDEN, HIDDEN)), ("m2.b", (HIDDEN,)),
        ("m3.w", (EMBED_DIM, HIDDEN)), ("m3.b", (EMBED_DIM,)),
        ("s1.w", (HIDDEN, EMBED_DIM + 3 * sk.N_JOINTS)), ("s1.b", (HIDDEN,)),
        ("s2.w", (3 * sk.N_JOINTS, HIDDEN)), ("s2.b", (3 * sk.N_JOINTS,)),
    ])


@dataclass
class RegParams:
    tensors: OrderedDict

    def __post_init__(self):
        t = OrderedDict((k, np.asarray(v, dtype=float)) for k, v in self.tensors.items())
        channels = t["c1.w"].shape[1] if "c1.w" in t else 1
        expect = _shapes(channels)
        if list(t) != list(expect):
            raise ShapeError(f"registration params must be {list(expect)}, got {list(t)}")
        for k, shape in expect.items():
            if t[k].shape != shape:
                raise ShapeError(f"param {k}: expected shape {shape}, got {t[k].shape}")
            if not np.all(np.isfinite(t[k])):
                raise NumericError(f"param {k} holds non-finite values")
        self.tensors = t

    @classmethod
    def init(cls, seed=0, channels=1, zero_last=False):
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        t = OrderedDict()
        for k, shape in _shapes(channels).items():
            if k.endswith(".b"):
                t[k] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:]))
                t[k] = rng.uniform(-1, 1, shape) / np.sqrt(fan_in)
        if zero_last:
            t["s2.w"][:] = 0.0
        return cls(t)

    @property
    def channels(self):
        return self.tensors["c1.w"].shape[1]

    def torch(self, requires_grad=False):
        return OrderedDict((k, torch.tensor(v, dtype=DTYPE, requires_grad=requires_grad))
                           for k, v in self.tensors.items())

    @classmethod
    def from_torch(cls, tensors):
        return cls(OrderedDict((k, v.detach().numpy().copy()) for k, v in tensors.items()))

    def n_params(self):
        return int(sum(v.size for v in self.tensors.values()))


# -- embeddings ------------------------------------------------------------------

def _as_chw(image):
    x = np.asarray(image.pixels if hasattr(image, "pixels") else image, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[1] == 0 or x.shape[2] == 0:
        raise ShapeError(f"image must be (H, W) or (C, H, W), got {x.shape}")
    return x


def extract_patches(image, joints, size=PATCH):
    """(n, C, size, size) patches centred on rounded joint pixels, zero padded."""
    x = _as_chw(image)
    C, H, W = x.shape
    joints = np.atleast_2d(np.asarray(joints, dtype=float))
    if np.any(joints[:, 0] < 0) or np.any(joints[:, 0] > W - 1) or np.any(joints[:, 1] < 0) \
            or np.any(joints[:, 1] > H - 1) or not np.all(np.isfinite(joints)):
        raise DomainError(f"joint outside the {W}x{H} image")
    h = size // 2
    padded = np.pad(x, ((0, 0), (h, h), (h, h)))
    cols = np.rint(joints[:, 0]).astype(int)
    rows = np.rint(joints[:, 1]).astype(int)
    return np.stack([padded[:, r: r + size, c: c + size] for r, c in zip(rows, cols)])


def _embed_2d_t(patches, p):
    h = torch.tanh(F.conv2d(patches, p["c1.w"], p["c1.b"]))
    h = torch.tanh(F.conv2d(h, p["c2.w"], p["c2.b"], stride=2))
    return h.flatten(1) @ p["l2d.w"].T + p["l2d.b"]


def _embed_3d_t(points, p):
    h = torch.tanh(points @ p["m1.w"].T + p["m1.b"])
    h = torch.tanh(h @ p["m2.w"].T + p["m2.b"])
    return h @ p["m3.w"].T + p["m3.b"]


def embed_2d(image, joints, params):
    """16-d embedding(s) of the patch around each joint; (16,) for one joint."""
    joints = np.asarray(joints, dtype=float)
    single = joints.ndim == 1
    patches = torch.tensor(extract_patches(image, joints), dtype=DTYPE)
    if patches.shape[1] != params.channels:
        raise ShapeError(f"image has {patches.shape[1]} channels, params expect {params.channels}")
    with torch.no_grad():
        out = _embed_2d_t(patches, params.torch()).numpy()
    return out[0] if single else out


def embed_3d(points, params):
    points = np.asarray(points, dtype=float)
    single = points.ndim == 1
    if points.shape[-1] != 3 or not np.all(np.isfinite(points)):
        raise DomainError("embed_3d needs finite 3-D points")
    with torch.no_grad():
        out = _embed_3d_t(torch.tensor(np.atleast_2d(points), dtype=DTYPE), params.torch()).numpy()
    return out[0] if single else out


# -- canonical grid and soft matching ---------------------------------------------------

@dataclass(frozen=True)
class CanonicalGrid:
    """Lattice V* in the canonical body frame (meters, lower spine at origin)."""

    points: np.ndarray
    embeddings: np.ndarray = None
    dims: tuple = ()
    height: float = 1.7

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 2:
            raise ShapeError(f"grid needs >= 2 3-D points, got {pts.shape}")
        if np.any(np.abs(pts) > self.height + 1e-12):
            raise DomainError("grid points must lie within [-1, 1]^3 scaled by the body height")
        object.__setattr__(self, "points", pts)

    @classmethod
    def regular(cls, dims=(9, 17, 9), height=1.7):
        """Regular lattice over the volume the eight action poses can reach."""
        if len(dims) != 3 or min(dims) < 1 or np.prod(dims) < 2:
            raise ConfigError(f"grid dims must be three positive counts, got {dims}")
        lo = np.array([-0.55, -0.56, -0.25]) * height
        hi = np.array([0.55, 0.66, 0.25]) * height
        axes = [np.linspace(a, b, n) if n > 1 else np.array([0.5 * (a + b)])
                for a, b, n in zip(lo, hi, dims)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        return cls(points=pts, dims=tuple(int(d) for d in dims), height=float(height))

    def normalized(self):
        return self.points / self.height

    def with_embeddings(self, params):
        return CanonicalGrid(self.points, embed_3d(self.normalized(), params), self.dims, self.height)

    @property
    def centroid(self):
        return self.points.mean(axis=0)


def _cosine_t(e, g):
    en = torch.linalg.vector_norm(e, dim=-1, keepdim=True)
    gn = torch.linalg.vector_norm(g, dim=-1, keepdim=True)
    if bool((en < 1e-12).any()) or bool((gn < 1e-12).any()):
        raise NumericError("cosine similarity undefined for a zero-norm embedding")
    return (e / en) @ (g / gn).T


def _soft_match_t(e, grid_emb, grid_pts, temperature):
    s = torch.softmax(_cosine_t(e, grid_emb) / temperature, dim=-1)
    return s @ grid_pts, s


def soft_match(e, grid, temperature=1.0):
    """Softmax-weighted grid position for embedding(s) ``e``.

    Returns ``(point, weights)``; ``point`` is (3,) for one embedding and
    (n, 3) for a stack.
    """
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    if grid.embeddings is None:
        raise ConfigError("grid has no embeddings; call grid.with_embeddings(params)")
    e = np.asarray(e, dtype=float)
    single = e.ndim == 1
    pt, s = _soft_match_t(torch.tensor(np.atleast_2d(e), dtype=DTYPE),
                          torch.tensor(grid.embeddings, dtype=DTYPE),
                          torch.tensor(grid.points, dtype=DTYPE), float(temperature))
    pt, s = pt.numpy(), s.numpy()
    return (pt[0], s[0]) if single else (pt, s)


# -- second stage ----------------------------------------------------------------------

def _stage2_t(fused, template, p):
    # fused: (B, 16); template: (16, 3)
    x = torch.cat([fused, template.reshape(1, -1).expand(fused.shape[0], -1)], dim=1)
    h = torch.tanh(x @ p["s1.w"].T + p["s1.b"])
    off = OFFSET_LIMIT * torch.tanh(h @ p["s2.w"].T + p["s2.b"])
    return template.unsqueeze(0) + off.reshape(-1, sk.N_JOINTS, 3)


def stage2_map(fused, template, params):
    """Template joints plus bounded residual offsets from the fused embedding."""
    fused = np.asarray(fused, dtype=float)
    if fused.shape[-1] != EMBED_DIM:
        raise ShapeError(f"fused embedding must be {EMBED_DIM}-d, got {fused.shape}")
    tj = template.joints if hasattr(template, "joints") else np.asarray(template, dtype=float)
    with torch.no_grad():
        out = _stage2_t(torch.tensor(np.atleast_2d(fused), dtype=DTYPE),
                        torch.tensor(tj, dtype=DTYPE), params.torch()).numpy()
    return out[0] if fused.ndim == 1 else out


def match_loss(pred, gt):
    """Sum over joints of the squared Euclidean distance."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ShapeError(f"match_loss shape mismatch {pred.shape} vs {gt.shape}")
    return float(np.sum((pred - gt) ** 2))


# -- full forward -----------------------------------------------------------------------

@dataclass(frozen=True)
class RegSample:
    image: np.ndarray  # (C, H, W)
    joints2d: np.ndarray  # (16, 2) pixel (x, y)
    joints3d: np.ndarray  # (16, 3) canonical meters


def _batch_tensors(samples):
    patches = np.concatenate([extract_patches(s.image, s.joints2d) for s in samples])
    gt = np.stack([np.asarray(s.joints3d, dtype=float) for s in samples])
    return torch.tensor(patches, dtype=DTYPE), torch.tensor(gt, dtype=DTYPE)


def _forward_t(patches, p, grid_pts, grid_norm, template, temperature):
    emb = _embed_2d_t(patches, p)  # (B*16, 16)
    grid_emb = _embed_3d_t(grid_norm, p)
    soft, _ = _soft_match_t(emb, grid_emb, grid_pts, temperature)
    soft = soft.reshape(-1, sk.N_JOINTS, 3)
    fused = emb.reshape(-1, sk.N_JOINTS, EMBED_DIM).mean(dim=1)
    return soft, _stage2_t(fused, template, p)


def register(image, joints2d, params, grid, template=None, temperature=1.0):
    """Soft-argmax joints and second-stage joints for one image, both (16, 3)."""
    template = template or sk.TemplateSkeleton.standard(grid.height)
    patches = torch.tensor(extract_patches(image, joints2d), dtype=DTYPE)
    with torch.no_grad():
        soft, refined = _forward_t(patches, params.torch(), torch.tensor(grid.points, dtype=DTYPE),
                                   torch.tensor(grid.normalized(), dtype=DTYPE),
                                   torch.tensor(template.joints, dtype=DTYPE), float(temperature))
    return soft[0].numpy(), refined[0].numpy()


# -- gradient check --------------------------------------------------------------------

def grad_check(params, batch, epsilon=1e-5, loss_fn=None):
    """Max relative error between autograd and central finite differences.

    ``loss_fn(tensors, batch)`` returns either a scalar or a tensor of loss
    terms whose sum is the loss; by default it is the registration
    objective.  With terms, the finite difference is summed term by term
    so that terms a parameter does not touch cancel exactly instead of
    contributing rounding noise.  Relative error is
    ``|g_a - g_fd| / max(|g_a|, |g_fd|, 1e-8)``.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise DomainError(f"epsilon must lie in [1e-7, 1e-3], got {epsilon}")
    if isinstance(params, RegParams):
        arrays = params.tensors
        if loss_fn is None:
            loss_fn = registration_objective()
    else:
        arrays = OrderedDict((k, np.asarray(v, dtype=float)) for k, v in params.items())
        if loss_fn is None:
            raise ConfigError("grad_check on raw arrays needs a loss_fn")

    tens = OrderedDict((k, torch.tensor(v, dtype=DTYPE, requires_grad=True)) for k, v in arrays.items())
    loss = loss_fn(tens, batch).sum()
    grads = torch.autograd.grad(loss, list(tens.values()), allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        work = OrderedDict((k, torch.tensor(v, dtype=DTYPE)) for k, v in arrays.items())
        for (name, t), g in zip(work.items(), grads):
            g = np.zeros(t.shape) if g is None else g.numpy()
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite analytic gradient for {name}")
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                fp = loss_fn(work, batch)
                flat[i] = orig - epsilon
                fm = loss_fn(work, batch)
                flat[i] = orig
                g_fd = float((fp - fm).sum()) / (2 * epsilon)
                g_a = g.reshape(-1)[i]
                if not np.isfinite(g_fd):
                    raise NumericError(f"non-finite finite-difference gradient for {name}[{i}]")
                rel = abs(g_a - g_fd) / max(abs(g_a), abs(g_fd), 1e-8)
                worst = max(worst, rel)
    return worst


def registration_objective(grid=None, template=None, temperature=0.1, include_stage2=True):
    """``loss_fn(tensors, samples)`` for :func:`grad_check`.

    Returns the per-coordinate terms of the batch-mean objective (soft
    argmax match loss plus second-stage match loss); their sum is the loss.
    """
    grid = grid or CanonicalGrid.regular((5, 7, 3))
    template = template or sk.TemplateSkeleton.standard(grid.height)
    cache = {}

    def fn(tensors, samples):
        key = id(samples)
        if key not in cache:
            cache.clear()
            cache[key] = _batch_tensors(samples)
        patches, gt = cache[key]
        soft, refined = _forward_t(patches, tensors, torch.tensor(grid.points, dtype=DTYPE),
                                   torch.tensor(grid.normalized(), dtype=DTYPE),
                                   torch.tensor(template.joints, dtype=DTYPE), temperature)
        terms = [((soft - gt) ** 2).reshape(-1)]
        if include_stage2:
            terms.append(((refined - gt) ** 2).reshape(-1))
        return torch.cat(terms) / gt.shape[0]

    return fn


# -- optimiser and training ----------------------------------------------------------------

class Adam:
    """Adaptive-moment gradient descent on a dict of leaf tensors."""

    def __init__(self, tensors, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {lr}")
        self.tensors = tensors
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: torch.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: torch.zeros_like(v) for k, v in tensors.items()}
        self.t = 0

    @torch.no_grad()
    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for (k, p), g in zip(self.tensors.items(), grads):
            if g is None:
                continue
            self.m[k].mul_(self.b1).add_(g, alpha=1 - self.b1)
            self.v[k].mul_(self.b2).addcmul_(g, g, value=1 - self.b2)
            p.sub_(self.lr * (self.m[k] / c1) / (torch.sqrt(self.v[k] / c2) + self.eps))


@dataclass
class TrainResult:
    params: RegParams
    loss: list = field(default_factory=list)  # per-epoch mean objective
    match: list = field(default_factory=list)  # per-epoch mean soft-argmax match loss
    stage2: list = field(default_factory=list)


def train_registration(dataset, lr=1e-3, epochs=50, batch=10, seed=0, grid=None, template=None,
                       temperature=0.1, params=None):
    """Minimise mean (soft-argmax + second-stage) match loss with Adam.

    Entry 0 of each curve is the loss of the initial parameters; entry e is
    the mean over the mini-batches of epoch e (evaluated before each step).
    """
    if not dataset:
        raise DomainError("training dataset is empty")
    if batch < 1 or epochs < 0:
        raise ConfigError("batch must be >= 1 and epochs >= 0")
    grid = grid or CanonicalGrid.regular()
    template = template or sk.TemplateSkeleton.standard(grid.height)
    channels = _as_chw(dataset[0].image).shape[0]
    params = params or RegParams.init(seed, channels=channels)
    tens = params.torch(requires_grad=True)
    opt = Adam(tens, lr=lr)
    rng = np.random.default_rng(seed)
    gp = torch.tensor(grid.points, dtype=DTYPE)
    gn = torch.tensor(grid.normalized(), dtype=DTYPE)
    tj = torch.tensor(template.joints, dtype=DTYPE)
    patches_all, gt_all = _batch_tensors(dataset)
    patches_all = patches_all.reshape(len(dataset), sk.N_JOINTS, *patches_all.shape[1:])

    def losses(idx, p):
        patches = patches_all[idx].reshape(-1, *patches_all.shape[2:])
        soft, refined = _forward_t(patches, p, gp, gn, tj, temperature)
        gt = gt_all[idx]
        return ((soft - gt) ** 2).sum(dim=(1, 2)).mean(), ((refined - gt) ** 2).sum(dim=(1, 2)).mean()

    result = TrainResult(params)
    with torch.no_grad():
        m0, s0 = losses(np.arange(len(dataset)), tens)
    result.loss.append(float(m0 + s0))
    result.match.append(float(m0))
    result.stage2.append(float(s0))
    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        tot = mt = st = 0.0
        for start in range(0, len(dataset), batch):
            idx = order[start: start + batch]
            match, stage2 = losses(idx, tens)
            loss = match + stage2
            if not torch.isfinite(loss) or loss.item() > 1e6:
                raise TrainingError(
                    f"training diverged at epoch {epoch}: loss {loss.item():.3g}",
                    {"epoch": epoch, "loss": loss.item(), "curve": list(result.loss)})
            grads = torch.autograd.grad(loss, list(tens.values()))
            opt.step(grads)
            w = len(idx) / len(dataset)
            tot += w * loss.item()
            mt += w * match.item()
            st += w * stage2.item()
        result.loss.append(tot)
        result.match.append(mt)
        result.stage2.append(st)
    result.params = RegParams.from_torch(tens)
    return result


# -- synthetic fixture -------------------------------------------------------------------

def box_normalize(joints_px, size=32, margin=3):
    """Affine map taking the joints' bounding square into a ``size`` canvas.

    Returns ``(scale, offset)`` with ``canvas = px * scale + offset``.
    """
    j = np.asarray(joints_px, dtype=float)
    lo, hi = j.min(axis=0), j.max(axis=0)
    span = max(float(np.max(hi - lo)), 1e-9)
    scale = (size - 1 - 2 * margin) / span
    offset = (size - 1) / 2 - scale * (lo + hi) / 2
    return scale, offset


def render_skeleton(joints_px, size=32, width=1.0, per_bone=24):
    """Blurred bone-line rendering on a ``size`` x ``size`` canvas, max 1."""
    from scipy import ndimage

    img = np.zeros((size, size))
    t = np.linspace(0, 1, per_bone)
    for p, c in sk.BONES:
        pts = joints_px[p] + t[:, None] * (joints_px[c] - joints_px[p])
        ix = np.clip(np.rint(pts[:, 0]).astype(int), 0, size - 1)
        iy = np.clip(np.rint(pts[:, 1]).astype(int), 0, size - 1)
        img[iy, ix] = 1.0
    img[int(np.rint(joints_px[sk.J["head"], 1])), int(np.rint(joints_px[sk.J["head"], 0]))] = 2.0
    img = ndimage.gaussian_filter(img, width)
    return img / img.max()


def body_to_canvas(joints_body, size=32, margin=3):
    """Front-view body-frame joints (x left, y up) -> canvas pixels (x, y)."""
    xy = np.asarray(joints_body, dtype=float)[:, :2] * np.array([-1.0, -1.0])
    scale, offset = box_normalize(xy, size, margin)
    return xy * scale + offset


def make_fixture(n=50, seed=0, size=32, jitter_deg=15.0, scale_range=(1.5, 1.9)):
    """Seeded registration training set built from jittered action poses."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        pid = sk.POSE_IDS[i % len(sk.POSE_IDS)]
        base = sk.pose_angles(pid)
        ang = {k: v + rng.uniform(-jitter_deg, jitter_deg) for k, v in base.items()}
        scale = rng.uniform(*scale_range)
        joints = sk.pose_joints(pid, scale, ang)
        px = body_to_canvas(joints, size)
        out.append(RegSample(image=render_skeleton(px, size)[None], joints2d=px,
                             joints3d=sk.to_canonical(joints)))
    return out
