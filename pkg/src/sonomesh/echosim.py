"""Scatter-point echo simulation under the ISAR motion decomposition.

Scene plane coordinates: ``x`` is cross-range and ``y`` is range from the
co-located speaker/microphone, both in meters.  Ranges use the plane-wave
approximation (range = y), so lateral offsets do not bend range.

Per profile ``n`` the target first translates radially by
``radial_velocity * n * T`` and then rotates about its scatter centroid by
``(n - (N-1)/2) * theta / (N-1)``.  The rotation steps are ``theta/(N-1)`` as
usual; centring the sweep makes the image depict the nominal orientation.
"""

from dataclasses import dataclass, field, asdict
import json

import numpy as np

from . import skeleton as sk
from .errors import ConfigError, DomainError
from .imaging import ProfileMatrix
from .signal import SPEED_OF_SOUND, ChirpConfig, analytic_array, bandpass_columns, chirp_phase

BONE_RADIUS = 0.03
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ScatterPoint:
    position: tuple
    reflectivity: float = 1.0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 2 or not all(np.isfinite(pos)):
            raise DomainError(f"scatter position must be a finite (x, y) pair, got {self.position}")
        if not self.reflectivity >= 0:
            raise DomainError(f"reflectivity must be >= 0, got {self.reflectivity}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "reflectivity", float(self.reflectivity))


@dataclass(frozen=True)
class TargetMotion:
    radial_velocity: float = 0.0
    aperture_angle: float = 0.2

    def __post_init__(self):
        if not (np.isfinite(self.radial_velocity) and np.isfinite(self.aperture_angle)):
            raise ConfigError("motion values must be finite")
        if not abs(self.aperture_angle) < np.pi / 2:
            raise ConfigError(f"motion.aperture_angle must satisfy |theta| < pi/2, got {self.aperture_angle}")


@dataclass(frozen=True)
class SceneConfig:
    target: tuple = ()
    motion: TargetMotion = field(default_factory=TargetMotion)
    background: tuple = ()
    snr_db: float = float("inf")
    n_profiles: int = 64
    chirp: ChirpConfig = field(default_factory=ChirpConfig.imaging)
    standoff: float = 1.5
    rng_seed: int = 0
    v_s: float = SPEED_OF_SOUND
    gate_range: float = None  # range at which the receive gate opens; default standoff
    spreading: bool = False  # apply 1/r^2 amplitude spreading

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(self.target))
        object.__setattr__(self, "background", tuple(self.background))
        if self.n_profiles < 2:
            raise ConfigError(f"scene.n_profiles must be >= 2, got {self.n_profiles}")
        if not self.standoff > 0:
            raise ConfigError(f"scene.standoff must be > 0, got {self.standoff}")
        if not self.standoff <= self.unambiguous_range:
            raise ConfigError(
                f"scene.standoff={self.standoff} m exceeds the unambiguous range "
                f"{self.unambiguous_range:.3f} m (v_s*T_e/2)")
        if self.rng_seed < 0:
            raise ConfigError("scene.rng_seed must be unsigned")
        if np.isnan(self.snr_db):
            raise ConfigError("scene.snr_db must not be NaN")
        if self.gate_range is not None and not 0 <= self.gate_range <= self.unambiguous_range:
            raise ConfigError(f"scene.gate_range={self.gate_range} outside [0, unambiguous range]")

    @property
    def unambiguous_range(self):
        return self.v_s * self.chirp.T_e / 2

    @property
    def gate(self):
        return self.standoff if self.gate_range is None else self.gate_range

    @property
    def M(self):
        return self.chirp.M

    def replace(self, **kw):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(kw)
        return SceneConfig(**d)

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "target": [[*p.position, p.reflectivity] for p in self.target],
            "background": [[*p.position, p.reflectivity] for p in self.background],
            "motion": asdict(self.motion),
            "snr_db": None if np.isinf(self.snr_db) else self.snr_db,
            "n_profiles": self.n_profiles,
            "chirp": asdict(self.chirp),
            "standoff": self.standoff,
            "rng_seed": self.rng_seed,
            "v_s": self.v_s,
            "gate_range": self.gate_range,
            "spreading": self.spreading,
        }

    @classmethod
    def from_dict(cls, d):
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"scene.schema_version must be {SCHEMA_VERSION}, got {version!r}")
        try:
            return cls(
                target=tuple(ScatterPoint((x, y), r) for x, y, r in d.get("target", [])),
                background=tuple(ScatterPoint((x, y), r) for x, y, r in d.get("background", [])),
                motion=TargetMotion(**d.get("motion", {})),
                snr_db=float("inf") if d.get("snr_db") is None else float(d["snr_db"]),
                n_profiles=int(d.get("n_profiles", 64)),
                chirp=ChirpConfig(**d["chirp"]) if "chirp" in d else ChirpConfig.imaging(),
                standoff=float(d.get("standoff", 1.5)),
                rng_seed=int(d.get("rng_seed", 0)),
                v_s=float(d.get("v_s", SPEED_OF_SOUND)),
                gate_range=d.get("gate_range"),
                spreading=bool(d.get("spreading", False)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"scene: {exc}") from exc

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class PoseSpec:
    pose_id: str = "standing"
    scale: float = 1.7
    joint_angles: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.pose_id not in sk.POSE_IDS:
            raise DomainError(f"unknown pose_id {self.pose_id!r}; expected one of {sk.POSE_IDS}")
        if not self.scale > 0:
            raise DomainError(f"scale must be > 0, got {self.scale}")

    def joints3d(self):
        return sk.pose_joints(self.pose_id, self.scale, self.joint_angles)


def pose_to_scatters(spec, density=50.0, seed=0):
    """Sample scatters along the 15 bones of a pose.

    Returns ``(scatters, joints)`` in the body frame (x lateral, y up): a list
    of :class:`ScatterPoint` and the (16, 2) ground-truth joint positions.
    Scatters are jittered uniformly within a disc of radius ``BONE_RADIUS``.
    """
    if not density > 0:
        raise DomainError(f"density must be > 0, got {density}")
    joints = spec.joints3d()[:, :2]
    rng = np.random.default_rng([seed, sk.POSE_IDS.index(spec.pose_id)])
    pts = []
    for p, c in sk.BONES:
        a, b = joints[p], joints[c]
        n = max(1, int(np.ceil(np.linalg.norm(b - a) * density)))
        t = (np.arange(n) + 0.5) / n
        seg = a + t[:, None] * (b - a)
        r = BONE_RADIUS * np.sqrt(rng.random(n))
        phi = 2 * np.pi * rng.random(n)
        pts.append(seg + np.column_stack([r * np.cos(phi), r * np.sin(phi)]))
    # terminal joints (head, wrists, ankles) get a point on the joint itself
    ends = [i for i in range(sk.N_JOINTS) if not sk.children_of(i)]
    pts.append(joints[ends])
    pts = np.concatenate(pts)
    return [ScatterPoint(tuple(q)) for q in pts], joints


def body_to_scene(xy, standoff, center):
    """Map body-frame (lateral, up) points into scene (cross-range, range).

    ``center`` (body frame) lands at range ``standoff``; height maps to range
    so the head is the farthest part of the body.
    """
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    return np.column_stack([xy[:, 0] - center[0], standoff + xy[:, 1] - center[1]])


def place_pose(spec, standoff=1.5, density=50.0, seed=0):
    """Scatters and ground-truth joints of a pose, in scene coordinates."""
    scatters, joints = pose_to_scatters(spec, density, seed)
    pts = np.array([s.position for s in scatters])
    center = pts.mean(axis=0)
    scene_pts = body_to_scene(pts, standoff, center)
    scene_joints = body_to_scene(joints, standoff, center)
    return [ScatterPoint(tuple(q), s.reflectivity) for q, s in zip(scene_pts, scatters)], scene_joints


def default_background(standoff=1.5):
    """A few static reflectors: side wall, a table edge, and the back wall."""
    return (
        ScatterPoint((-1.1, standoff + 0.4), 2.0),
        ScatterPoint((0.9, standoff - 0.6), 1.5),
        ScatterPoint((0.2, standoff + 1.2), 3.0),
    )


def pose_scene(pose_id, snr_db=20.0, seed=0, scale=1.7, joint_angles=None, standoff=1.5,
               density=50.0, background=True, **scene_kw):
    """SceneConfig for one of the action poses plus its scene-frame joints."""
    spec = PoseSpec(pose_id, scale, dict(joint_angles or {}))
    target, joints = place_pose(spec, standoff, density, seed)
    kw = dict(motion=TargetMotion(radial_velocity=0.05, aperture_angle=0.2))
    kw.update(scene_kw)
    scene = SceneConfig(
        target=tuple(target),
        background=default_background(standoff) if background else (),
        snr_db=snr_db, standoff=standoff, rng_seed=seed, **kw)
    return scene, joints


def synthetic_dataset(snr_db=20.0, seed=0, **kw):
    """One scene per action pose: list of ``(pose_id, SceneConfig, joints)``."""
    return [(pid, *pose_scene(pid, snr_db=snr_db, seed=seed, **kw)) for pid in sk.POSE_IDS]


def _centroid(points):
    if not points:
        return np.zeros(2)
    return np.mean([p.position for p in points], axis=0)


def scatter_ranges(scene, points, moving=True):
    """(n_points, N) ranges in meters of each scatter for every profile."""
    N = scene.n_profiles
    pos = np.array([p.position for p in points], dtype=float).reshape(-1, 2)
    if not moving:
        return np.repeat(pos[:, 1:2], N, axis=1)
    c = _centroid(points)
    n = np.arange(N)
    alpha = (n - (N - 1) / 2) * scene.motion.aperture_angle / (N - 1)
    shift = scene.motion.radial_velocity * n * scene.chirp.T
    d = pos - c
    return c[1] + shift[None, :] + d[:, 0:1] * np.sin(alpha)[None, :] + d[:, 1:2] * np.cos(alpha)[None, :]


def _check_ranges(scene, ranges, label):
    limit = scene.unambiguous_range
    bad = np.flatnonzero(np.any((ranges < 0) | (ranges > limit), axis=1))
    if bad.size:
        i = int(bad[0])
        raise DomainError(
            f"{label} {i} leaves the unambiguous range [0, {limit:.3f}] m "
            f"(range {ranges[i].min():.3f}..{ranges[i].max():.3f} m)")


def _raw_echo(scene, points, ranges):
    """Real passband echoes (M, N) inside the receive gate, before filtering."""
    cfg = scene.chirp
    M, N = cfg.M, scene.n_profiles
    out = np.zeros((M, N))
    if not points:
        return out
    amp = np.array([p.reflectivity for p in points]) * cfg.amplitude
    u = np.arange(M) / cfg.f_s
    tau_g = 2 * scene.gate / scene.v_s
    for n in range(N):
        r = ranges[:, n]
        a = amp * (scene.standoff / r) ** 2 if scene.spreading else amp
        tt = u[None, :] - (2 * r / scene.v_s - tau_g)[:, None]
        live = (tt >= 0) & (tt < cfg.T_c)
        wave = np.cos(2 * np.pi * chirp_phase(tt, cfg)) * live
        out[:, n] = a @ wave
    return out


def _to_matrix(scene, data):
    cfg = scene.chirp
    return ProfileMatrix(
        data=data, f_s=cfg.f_s, k=cfg.k, theta=scene.motion.aperture_angle,
        wavelength=cfg.wavelength(scene.v_s), v_s=scene.v_s, chirp=cfg, gate_range=scene.gate)


def _process(scene, raw):
    cfg = scene.chirp
    return analytic_array(bandpass_columns(raw, cfg.f_start, cfg.f_stop, cfg.f_s), axis=0)


def echo_component(scene, points, moving=True, label="scatter"):
    """Noise-free analytic echoes of ``points``; static when ``moving`` is False."""
    points = list(points)
    ranges = scatter_ranges(scene, points, moving)
    _check_ranges(scene, ranges, label)
    return _process(scene, _raw_echo(scene, points, ranges))


def simulate_echoes(scene):
    """Profile matrix of target + static background + seeded complex noise."""
    clean = (echo_component(scene, scene.target, True, "scatter")
             + echo_component(scene, scene.background, False, "background scatter"))
    if np.isfinite(scene.snr_db):
        power = np.mean(np.abs(clean) ** 2)
        sigma = np.sqrt(power / 10 ** (scene.snr_db / 10) / 2)
        noise = np.empty_like(clean)
        for n in range(scene.n_profiles):
            # per-column stream: results do not depend on generation order
            rng = np.random.default_rng([scene.rng_seed, n])
            noise[:, n] = rng.standard_normal(scene.M) + 1j * rng.standard_normal(scene.M)
        clean = clean + sigma * noise
    return _to_matrix(scene, clean)


def background_profile(scene):
    return _to_matrix(scene, echo_component(scene, scene.background, False, "background scatter"))


def target_profile(scene):
    """Noise-free target-only echoes (the oracle for background subtraction)."""
    return _to_matrix(scene, echo_component(scene, scene.target, True, "scatter"))
