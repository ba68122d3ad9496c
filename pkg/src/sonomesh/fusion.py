"""Toy-scale RGB/acoustic feature fusion and coarse mesh regression.

Data flow for one sample::

    image_m --backbone--> F_m --embed_and_project--> V_m (tokens, d=32)
    V_m + joint mask --global_local--> G_m (d), L_m (16 x d)
    gim(G_im, G_ai, template) --> G_T (1 + 16 tokens)
    fusion_transformer([G_T, L_ai, L_im]) --> M (49 x d)
    regress_mesh(M, template) --> 16 joints + 150 coarse vertices

Modalities are ``"rgb"`` (3 channels) and ``"acoustic"`` (1 channel).
"""

from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F

from . import skeleton as sk
from .errors import ConfigError, DomainError, ShapeError, TrainingError
from .registration import DTYPE, Adam

D_MODEL = 32
N_HEADS = 4
N_BLOCKS = 2
FEAT = 16
PER_BONE = 10
N_VERTICES = sk.N_BONES * PER_BONE
MODALITIES = ("rgb", "acoustic")
CHANNELS = {"rgb": 3, "acoustic": 1}
JOINT_LIMIT = 0.5  # meters per coordinate
VERTEX_LIMIT = 0.05
BONE_TOLERANCE = 0.25


def _shapes():
    s = OrderedDict()
    for m, c in CHANNELS.items():
        s[f"{m}.hi.w"] = (8, c, 3, 3)
        s[f"{m}.hi.b"] = (8,)
        s[f"{m}.lo.w"] = (FEAT, 8, 3, 3)
        s[f"{m}.lo.b"] = (FEAT,)
        s[f"{m}.mix.w"] = (FEAT, 8, 1, 1)
        s[f"{m}.mix.b"] = (FEAT,)
        s[f"{m}.phi.w"] = (D_MODEL, FEAT)
        s[f"{m}.phi.b"] = (D_MODEL,)
        s[f"{m}.depth.w"] = (1, FEAT)
        s[f"{m}.depth.b"] = (1,)
        s[f"{m}.psi.w"] = (D_MODEL, D_MODEL + 1)
        s[f"{m}.psi.b"] = (D_MODEL,)
        s[f"{m}.g.w"] = (D_MODEL, D_MODEL, 3, 3)
        s[f"{m}.g.b"] = (D_MODEL,)
        s[f"{m}.q.w"] = (1,)
        s[f"{m}.q.b"] = (1,)
    s["tmpl.w"] = (D_MODEL, 3)
    s["tmpl.b"] = (D_MODEL,)
    s["type"] = (4, D_MODEL)  # global, template, acoustic-local, rgb-local
    for b in range(N_BLOCKS):
        s[f"blk{b}.qkv.w"] = (3 * D_MODEL, D_MODEL)
        s[f"blk{b}.qkv.b"] = (3 * D_MODEL,)
        s[f"blk{b}.out.w"] = (D_MODEL, D_MODEL)
        s[f"blk{b}.out.b"] = (D_MODEL,)
        s[f"blk{b}.ff1.w"] = (2 * D_MODEL, D_MODEL)
        s[f"blk{b}.ff1.b"] = (2 * D_MODEL,)
        s[f"blk{b}.ff2.w"] = (D_MODEL, 2 * D_MODEL)
        s[f"blk{b}.ff2.b"] = (D_MODEL,)
    s["joint.w"] = (3, D_MODEL)
    s["joint.b"] = (3,)
    s["vert.w"] = (N_VERTICES * 3, D_MODEL)
    s["vert.b"] = (N_VERTICES * 3,)
    return s


@dataclass
class FusionParams:
    tensors: OrderedDict

    def __post_init__(self):
        t = OrderedDict((k, np.asarray(v, dtype=float)) for k, v in self.tensors.items())
        expect = _shapes()
        if list(t) != list(expect):
            raise ShapeError("fusion params do not match the declared architecture")
        for k, shape in expect.items():
            if t[k].shape != shape:
                raise ShapeError(f"param {k}: expected shape {shape}, got {t[k].shape}")
            if not np.all(np.isfinite(t[k])):
                raise DomainError(f"param {k} holds non-finite values")
        self.tensors = t

    @classmethod
    def init(cls, seed=0, zero_heads=False):
        rng = np.random.default_rng(seed)
        t = OrderedDict()
        for k, shape in _shapes().items():
            if k.endswith(".b"):
                t[k] = np.zeros(shape)
            elif k.endswith(".q.w"):
                t[k] = np.ones(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
                t[k] = rng.uniform(-1, 1, shape) / np.sqrt(fan_in)
        if zero_heads:
            t["joint.w"][:] = 0.0
            t["vert.w"][:] = 0.0
        return cls(t)

    def torch(self, requires_grad=False):
        return OrderedDict((k, torch.tensor(v, dtype=DTYPE, requires_grad=requires_grad))
                           for k, v in self.tensors.items())

    @classmethod
    def from_torch(cls, tensors):
        return cls(OrderedDict((k, v.detach().numpy().copy()) for k, v in tensors.items()))


def _t(x):
    return x if isinstance(x, torch.Tensor) else torch.tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def _p(params):
    return params.torch() if isinstance(params, FusionParams) else params


# -- types ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMap:
    values: torch.Tensor  # (C, H, W)
    modality: str = "acoustic"

    @property
    def shape(self):
        return tuple(self.values.shape)


@dataclass(frozen=True)
class TokenSequence:
    values: torch.Tensor  # (n, d)
    tags: tuple
    mask: np.ndarray = None  # True = masked
    grid: tuple = ()  # (h, w) when tokens come from a feature map

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError("token values must be (n, d)")
        n = self.values.shape[0]
        if len(self.tags) != n:
            raise ShapeError(f"{len(self.tags)} tags for {n} tokens")
        bad = set(self.tags) - {"rgb", "acoustic", "template"}
        if bad:
            raise DomainError(f"invalid token tags {sorted(bad)}")
        mask = np.zeros(n, bool) if self.mask is None else np.asarray(self.mask, bool)
        object.__setattr__(self, "mask", mask)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


# -- backbone and tokens ------------------------------------------------------------

def backbone(img, params, modality="acoustic"):
    """Two-resolution extractor; 16 channels at ceil(H/2) x ceil(W/2).

    A full-resolution branch is kept alongside the strided branch and
    pooled into it, so fine detail survives the downsampling.
    """
    if modality not in CHANNELS:
        raise DomainError(f"unknown modality {modality!r}")
    p = _p(params)
    x = _t(img.pixels if hasattr(img, "pixels") else img)
    if x.ndim == 2:
        x = x.unsqueeze(0)
    if x.ndim != 3 or x.shape[1] < 1 or x.shape[2] < 1:
        raise ShapeError(f"image must be (H, W) or (C, H, W), got {tuple(x.shape)}")
    if x.shape[0] != CHANNELS[modality]:
        raise ShapeError(f"{modality} image needs {CHANNELS[modality]} channels, got {x.shape[0]}")
    x = x.unsqueeze(0)
    hi = torch.tanh(F.conv2d(x, p[f"{modality}.hi.w"], p[f"{modality}.hi.b"], padding=1))
    lo = torch.tanh(F.conv2d(hi, p[f"{modality}.lo.w"], p[f"{modality}.lo.b"], stride=2, padding=1))
    pooled = F.avg_pool2d(hi, 2, ceil_mode=True)
    mix = F.conv2d(pooled, p[f"{modality}.mix.w"], p[f"{modality}.mix.b"])
    return FeatureMap(torch.tanh(lo + mix)[0], modality)


def embed_and_project(fmap, params):
    """Per-pixel linear map to d=32, then a depth-conditioned projection."""
    p = _p(params)
    m = fmap.modality
    C, h, w = fmap.values.shape
    flat = fmap.values.reshape(C, -1).T  # (h*w, C)
    v = flat @ p[f"{m}.phi.w"].T + p[f"{m}.phi.b"]
    depth = flat @ p[f"{m}.depth.w"].T + p[f"{m}.depth.b"]
    tokens = torch.tanh(torch.cat([v, depth], dim=1) @ p[f"{m}.psi.w"].T + p[f"{m}.psi.b"])
    return TokenSequence(tokens, tags=(m,) * tokens.shape[0], grid=(h, w))


def token_labels(labels, grid):
    """Sample a full-resolution label map at the token centres (stride 2)."""
    labels = np.asarray(labels)
    h, w = grid
    if labels.shape[0] > 2 * h or labels.shape[1] > 2 * w or \
            labels.shape[0] < 2 * h - 1 or labels.shape[1] < 2 * w - 1:
        raise ShapeError(f"mask {labels.shape} does not match a {h}x{w} token grid")
    return labels[::2, ::2][:h, :w]


def global_local(V, mask, params, joint_segments=None):
    """G = strided conv + global mean over tokens; L_j = mean token of segment j.

    ``mask`` is a full-resolution label map (or :class:`SegmentMap`);
    ``joint_segments[j]`` is the label of joint j's segment, by default
    ``j + 1``.  Returns ``(G, L, empty)`` with ``empty`` flagging joints
    whose segment holds no token (their row of L is zero).
    """
    p = _p(params)
    labels = mask.labels if hasattr(mask, "labels") else np.asarray(mask)
    h, w = V.grid
    lab = token_labels(labels, (h, w)).reshape(-1)
    m = V.tags[0]
    grid = V.values.T.reshape(1, V.d, h, w)
    g = torch.tanh(F.conv2d(grid, p[f"{m}.g.w"], p[f"{m}.g.b"], stride=2, padding=1))
    G = g.mean(dim=(2, 3))[0]
    segs = np.arange(1, sk.N_JOINTS + 1) if joint_segments is None else np.asarray(joint_segments)
    if segs.shape != (sk.N_JOINTS,):
        raise ShapeError("joint_segments needs one label per joint")
    rows, empty = [], np.zeros(sk.N_JOINTS, bool)
    for j, s in enumerate(segs):
        sel = np.nonzero(lab == s)[0] if s > 0 else np.zeros(0, int)
        if sel.size == 0:
            rows.append(torch.zeros(V.d, dtype=DTYPE))
            empty[j] = True
        else:
            rows.append(V.values[torch.as_tensor(sel)].mean(dim=0))
    return G, torch.stack(rows), empty


def joint_mask(shape, joints_px, foreground):
    """Label each foreground pixel with 1 + index of its nearest joint."""
    H, W = shape
    r, c = np.nonzero(foreground)
    labels = np.zeros((H, W), dtype=np.int32)
    if r.size:
        j = np.asarray(joints_px, dtype=float)
        d = (c[:, None] - j[None, :, 0]) ** 2 + (r[:, None] - j[None, :, 1]) ** 2
        labels[r, c] = np.argmin(d, axis=1) + 1
    return labels


# -- modality mask and GIM --------------------------------------------------------------

def modality_mask(tokens, p, seed):
    """With probability ``p`` zero every token of one uniformly drawn modality.

    ``tokens`` is a dict ``modality -> TokenSequence``.  Returns
    ``(tokens, masked_modality_or_None)``.
    """
    if not 0 <= p <= 1:
        raise DomainError(f"mask probability must lie in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    if not rng.random() < p:
        return dict(tokens), None
    which = MODALITIES[int(rng.integers(len(MODALITIES)))]
    out = dict(tokens)
    if which in out:
        t = out[which]
        out[which] = replace(t, values=torch.zeros_like(t.values), mask=np.ones(t.n, bool))
    return out, which


def gim(G_im, G_ai, template_tokens, params, mask_rate=(0.0, 0.0)):
    """Quality-weighted convex combination of the two global features.

    ``q_m = (1 - r_m) * softplus(a_m * ||G_m|| + b_m)``, where ``r_m`` is
    the fraction of modality m's tokens that are masked.  Returns
    ``(G_T tokens, weights)`` with G_T = [combined global; template tokens].
    """
    p = _p(params)
    r_im, r_ai = (float(r) for r in mask_rate)
    if G_im.shape != G_ai.shape or G_im.shape[-1] != template_tokens.shape[-1]:
        raise ShapeError("gim inputs must share the feature dimension")
    if r_im >= 1 and r_ai >= 1:
        raise DomainError("both modalities fully masked; nothing to fuse")
    q = []
    for G, r, m in ((G_im, r_im, "rgb"), (G_ai, r_ai, "acoustic")):
        score = F.softplus(p[f"{m}.q.w"] * torch.linalg.vector_norm(G) + p[f"{m}.q.b"])[0]
        q.append((1.0 - r) * score)
    q = torch.stack(q)
    w = q / q.sum()
    G = w[0] * G_im + w[1] * G_ai
    return torch.cat([G.unsqueeze(0), template_tokens], dim=0), w


def template_tokens(template, params):
    p = _p(params)
    tj = _t(template.joints if hasattr(template, "joints") else template)
    return torch.tanh(tj @ p["tmpl.w"].T + p["tmpl.b"])


# -- transformer -------------------------------------------------------------------------

def _layer_norm(x):
    return F.layer_norm(x, (x.shape[-1],))


def attention(x, mask, w_qkv, b_qkv, heads=N_HEADS):
    """Multi-head self-attention; masked tokens get -inf logits as keys.

    Returns ``(out, probs)`` with probs of shape (heads, n, n).
    """
    n, d = x.shape
    dh = d // heads
    qkv = x @ w_qkv.T + b_qkv
    q, k, v = qkv.split(d, dim=1)
    q = q.reshape(n, heads, dh).transpose(0, 1)
    k = k.reshape(n, heads, dh).transpose(0, 1)
    v = v.reshape(n, heads, dh).transpose(0, 1)
    logits = q @ k.transpose(1, 2) / np.sqrt(dh)
    key_mask = torch.as_tensor(np.asarray(mask, bool))
    logits = logits.masked_fill(key_mask[None, None, :], float("-inf"))
    probs = torch.softmax(logits, dim=-1)
    out = (probs @ v).transpose(0, 1).reshape(n, d)
    return out, probs


def fusion_transformer(G_T, L_ai, L_im, params, masked=None):
    """Two pre-norm blocks of 4-head attention + feed-forward over 49 tokens.

    ``masked`` gives per-token mask bits for the concatenated sequence (the
    G_T tokens are never masked).  Returns ``(M, attention_probs)``.
    """
    p = _p(params)
    x = torch.cat([G_T, L_ai, L_im], dim=0)
    n_t = G_T.shape[0]
    types = torch.cat([p["type"][0:1], p["type"][1:2].expand(n_t - 1, -1),
                       p["type"][2:3].expand(L_ai.shape[0], -1), p["type"][3:4].expand(L_im.shape[0], -1)])
    x = x + types
    mask = np.zeros(x.shape[0], bool) if masked is None else np.asarray(masked, bool)
    if mask.shape != (x.shape[0],):
        raise ShapeError("mask bits must cover the concatenated token sequence")
    if mask.all():
        raise DomainError("every token is masked")
    keep = torch.as_tensor(~mask, dtype=DTYPE)[:, None]
    x = x * keep
    probs_all = []
    for b in range(N_BLOCKS):
        a, probs = attention(_layer_norm(x), mask, p[f"blk{b}.qkv.w"], p[f"blk{b}.qkv.b"])
        x = x + a @ p[f"blk{b}.out.w"].T + p[f"blk{b}.out.b"]
        h = torch.tanh(_layer_norm(x) @ p[f"blk{b}.ff1.w"].T + p[f"blk{b}.ff1.b"])
        x = x + h @ p[f"blk{b}.ff2.w"].T + p[f"blk{b}.ff2.b"]
        x = x * keep  # masked tokens stay zero
        probs_all.append(probs)
    return x, probs_all


# -- mesh regression ---------------------------------------------------------------------

def project_bones(joints, template, tol=BONE_TOLERANCE):
    """Clamp every bone to ``(1 +- tol)`` of its template length, root outward.

    Directions are kept; a zero-length bone takes the template direction.
    """
    j = joints if isinstance(joints, torch.Tensor) else _t(joints)
    tj = _t(template.joints)
    lengths = _t(template.lengths)
    out = [None] * sk.N_JOINTS
    out[sk.ROOT] = j[sk.ROOT]
    for b, (parent, child) in enumerate(sk.BONES):
        vec = j[child] - j[parent]
        L = torch.linalg.vector_norm(vec)
        if bool(L == 0):
            vec, L = tj[child] - tj[parent], lengths[b]
        target = torch.clamp(L, (1 - tol) * lengths[b], (1 + tol) * lengths[b])
        out[child] = out[parent] + vec * (target / L)
    return torch.stack(out)


def regress_mesh(M, template, params):
    """Joint residuals from the template tokens, then 150 coarse vertices.

    Returns ``(joints (16, 3), vertices (150, 3))``.
    """
    p = _p(params)
    tj = _t(template.joints)
    feats = M[1: 1 + sk.N_JOINTS]
    joints = tj + JOINT_LIMIT * torch.tanh(feats @ p["joint.w"].T + p["joint.b"])
    joints = project_bones(joints, template)
    t = torch.as_tensor((np.arange(PER_BONE) + 0.5) / PER_BONE, dtype=DTYPE)
    base = torch.cat([joints[a] + t[:, None] * (joints[b] - joints[a]) for a, b in sk.BONES])
    off = VERTEX_LIMIT * torch.tanh(M[0] @ p["vert.w"].T + p["vert.b"]).reshape(N_VERTICES, 3)
    return joints, base + off


# -- full forward ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionInput:
    acoustic: np.ndarray  # (H, W) or (1, H, W)
    acoustic_mask: np.ndarray  # (H, W) joint-indexed labels
    rgb: np.ndarray = None  # (3, H, W) or None when the camera is absent
    rgb_mask: np.ndarray = None


@dataclass(frozen=True)
class FusionOutput:
    joints: np.ndarray
    vertices: np.ndarray
    gim_weights: np.ndarray
    masked: str = None


def _forward(inp, p, template, mask_p=0.0, seed=0):
    tokens, masks = {}, {}
    for m, img, lab in (("acoustic", inp.acoustic, inp.acoustic_mask), ("rgb", inp.rgb, inp.rgb_mask)):
        if img is None:
            continue
        tokens[m] = embed_and_project(backbone(img, p, m), p)
        masks[m] = lab
    if "acoustic" not in tokens and "rgb" not in tokens:
        raise DomainError("fusion needs at least one modality")
    tokens, which = modality_mask(tokens, mask_p, seed)
    G, L, rate = {}, {}, {}
    for m in MODALITIES:
        if m in tokens:
            G[m], L[m], _ = global_local(tokens[m], masks[m], p)
            rate[m] = float(tokens[m].mask.mean())
        else:
            G[m] = torch.zeros(D_MODEL, dtype=DTYPE)
            L[m] = torch.zeros(sk.N_JOINTS, D_MODEL, dtype=DTYPE)
            rate[m] = 1.0
    if rate["rgb"] >= 1 and rate["acoustic"] >= 1:
        # a draw that hides the only available modality is skipped
        return _forward(inp, p, template, 0.0, seed)
    tt = template_tokens(template, p)
    G_T, w = gim(G["rgb"], G["acoustic"], tt, p, (rate["rgb"], rate["acoustic"]))
    masked = np.concatenate([np.zeros(G_T.shape[0], bool),
                             np.full(sk.N_JOINTS, rate["acoustic"] >= 1),
                             np.full(sk.N_JOINTS, rate["rgb"] >= 1)])
    M, _ = fusion_transformer(G_T, L["acoustic"], L["rgb"], p, masked)
    joints, verts = regress_mesh(M, template, p)
    return joints, verts, w, which


def fuse(inp, params, template=None):
    template = template or sk.TemplateSkeleton.standard()
    with torch.no_grad():
        j, v, w, which = _forward(inp, params.torch(), template)
    return FusionOutput(j.numpy(), v.numpy(), w.numpy(), which)


# -- training ---------------------------------------------------------------------------------

@dataclass(frozen=True)
class FusionSample:
    inp: FusionInput
    joints3d: np.ndarray
    vertices: np.ndarray


@dataclass
class FusionTrainResult:
    params: FusionParams
    loss: list = field(default_factory=list)


def fusion_loss(joints, verts, gt_joints, gt_verts, lam=0.1):
    """L1 on joints and vertices plus ``lam`` times the joint match loss."""
    l1 = (joints - gt_joints).abs().mean() + (verts - gt_verts).abs().mean()
    return l1 + lam * ((joints - gt_joints) ** 2).sum()


def train_fusion(dataset, lr=1e-3, epochs=5, seed=0, lam=0.1, mask_p=0.5, template=None, params=None):
    """Per-sample Adam steps on the fusion loss with seeded modality masking."""
    if not dataset:
        raise DomainError("training dataset is empty")
    if epochs < 0 or lr < 0:
        raise ConfigError("epochs and lr must be >= 0")
    template = template or sk.TemplateSkeleton.standard()
    params = params or FusionParams.init(seed)
    tens = params.torch(requires_grad=True)
    opt = Adam(tens, lr=lr)
    rng = np.random.default_rng(seed)
    result = FusionTrainResult(params)

    def sample_loss(s, mp, sd):
        j, v, _, _ = _forward(s.inp, tens, template, mp, sd)
        return fusion_loss(j, v, _t(s.joints3d), _t(s.vertices), lam)

    with torch.no_grad():
        result.loss.append(float(np.mean([sample_loss(s, 0.0, 0).item() for s in dataset])))
    for epoch in range(epochs):
        total = 0.0
        for i in rng.permutation(len(dataset)):
            loss = sample_loss(dataset[i], mask_p, int(rng.integers(2 ** 31)))
            if not torch.isfinite(loss) or loss.item() > 1e6:
                raise TrainingError(f"fusion training diverged at epoch {epoch}",
                                    {"epoch": epoch, "loss": loss.item(), "curve": list(result.loss)})
            opt.step(torch.autograd.grad(loss, list(tens.values()), allow_unused=True))
            total += loss.item() / len(dataset)
        result.loss.append(total)
    result.params = FusionParams.from_torch(tens)
    return result


def make_fusion_fixture(n=16, seed=0, size=32):
    """Rendered acoustic (1 ch) and RGB (3 ch) views of jittered action poses."""
    from .registration import body_to_canvas, render_skeleton

    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        pid = sk.POSE_IDS[i % len(sk.POSE_IDS)]
        ang = {k: v + rng.uniform(-15, 15) for k, v in sk.pose_angles(pid).items()}
        joints = sk.pose_joints(pid, rng.uniform(1.5, 1.9), ang)
        px = body_to_canvas(joints, size)
        ac = render_skeleton(px, size, width=1.5)
        rgb = np.stack([render_skeleton(px, size, width=w) for w in (0.7, 1.0, 1.3)])
        lab = joint_mask((size, size), px, ac > 0.1)
        canon = sk.to_canonical(joints)
        out.append(FusionSample(FusionInput(ac, lab, rgb, lab), canon,
                                sk.interpolate_bones(canon, PER_BONE)))
    return out
