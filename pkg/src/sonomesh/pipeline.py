"""Stage glue shared by the CLI and the end-to-end tests.

Each function maps one config section plus the previous stage's output to
the next artifact, so the CLI subcommands and the in-process pipeline run
exactly the same code.
"""

import numpy as np
from scipy import ndimage

from . import skeleton as sk
from .echosim import TargetMotion, background_profile, pose_scene, simulate_echoes
from .errors import DomainError
from .fusion import FusionInput, FusionParams, fuse, joint_mask, make_fusion_fixture, train_fusion
from .imaging import process
from .pose import extract_joints
from .registration import (CanonicalGrid, box_normalize, make_fixture, register, render_skeleton,
                           train_registration)

CANVAS = 32


def scene_from_config(cfg):
    """SceneConfig and scene-frame (cross-range, range) ground-truth joints."""
    cfg.check_scene_range()
    s = cfg.scene
    return pose_scene(
        s.pose_id, snr_db=float("inf") if s.snr_db is None else s.snr_db, seed=s.seed,
        scale=s.scale, standoff=s.standoff, density=s.density, background=s.background,
        chirp=cfg.chirp, n_profiles=s.n_profiles,
        motion=TargetMotion(radial_velocity=s.radial_velocity, aperture_angle=s.aperture_angle))


def simulate(cfg):
    """``(echoes, background, scene, gt_joints)`` for the configured pose."""
    scene, gt = scene_from_config(cfg)
    return simulate_echoes(scene), background_profile(scene), scene, gt


def form_body_image(m, background, im):
    """Full imaging chain, cropped to ``im.crop_m`` around the gate.

    Returns ``(image, info)`` as :func:`process` does.
    """
    img, info = process(
        m, background, align=im.align != "none", autofocus=im.autofocus, pad=im.pad,
        window=im.window, max_iters=im.max_iters, tol=im.tol, focus_rows=im.focus_rows,
        reference="mean", fit="linear" if im.align == "linear" else None, recenter=im.recenter)
    top = int(np.floor(img.row_of_range(m.gate_range + im.crop_m)))
    bottom = int(np.ceil(img.row_of_range(m.gate_range - im.crop_m))) + 1
    return img.crop(top, bottom), info


def joints_2d(img, pose):
    """Pixel joints (JointSet2D) and the detector/GMM intermediates."""
    return extract_joints(img, K=pose.K, seed=pose.seed, threshold_q=pose.threshold_q)


# -- 3-D stages ------------------------------------------------------------------------------

def to_canvas(joints_px):
    """Affine map of pixel joints into the square canvas the 3-D stages use."""
    scale, offset = box_normalize(joints_px, CANVAS)
    return np.asarray(joints_px, dtype=float) * scale + offset, (scale, offset)


def registration_image(joints_px):
    """Rendered joint-skeleton map, the input representation the registration net is trained on."""
    canvas, _ = to_canvas(joints_px)
    return render_skeleton(canvas, CANVAS)[None], canvas


def resample_to_canvas(pixels, affine):
    """Resample image ``pixels`` under the canvas affine map, normalised to max 1."""
    scale, offset = affine
    yy, xx = np.mgrid[0:CANVAS, 0:CANVAS].astype(float)
    src = np.stack([(yy - offset[1]) / scale, (xx - offset[0]) / scale])
    out = ndimage.map_coordinates(np.asarray(pixels, dtype=float), src, order=1, mode="constant")
    peak = out.max()
    return out / peak if peak > 0 else out


def fusion_input(img, joints_px):
    """Acoustic-only FusionInput: canvas-resampled image plus joint-indexed mask."""
    canvas, affine = to_canvas(joints_px)
    ac = resample_to_canvas(img.pixels, affine)
    return FusionInput(ac, joint_mask(ac.shape, canvas, ac > 0.1))


def grid_from_config(reg):
    return CanonicalGrid.regular(dims=reg.grid_dims)


def train_registration_from_config(reg):
    data = make_fixture(reg.n_train, seed=reg.seed, size=CANVAS)
    return train_registration(data, lr=reg.lr, epochs=reg.epochs, seed=reg.seed,
                              grid=grid_from_config(reg), temperature=reg.temperature)


def train_fusion_from_config(fus):
    data = make_fusion_fixture(fus.n_train, seed=fus.seed, size=CANVAS)
    return train_fusion(data, lr=fus.lr, epochs=fus.epochs, seed=fus.seed, lam=fus.lam,
                        mask_p=fus.mask_p)


def apply_registration(joints_px, params, reg):
    """``(soft_argmax_joints, refined_joints)``, both (16, 3) canonical meters."""
    image, canvas = registration_image(joints_px)
    return register(image, canvas, params, grid_from_config(reg), temperature=reg.temperature)


def apply_fusion(img, joints_px, params):
    if not isinstance(params, FusionParams):
        raise DomainError("fusion parameters required")
    return fuse(fusion_input(img, joints_px), params)


def canonical_gt(cfg):
    """Ground-truth canonical 3-D joints and coarse vertices of the configured pose."""
    from .fusion import PER_BONE

    joints = sk.to_canonical(sk.pose_joints(cfg.scene.pose_id, cfg.scene.scale))
    return joints, sk.interpolate_bones(joints, PER_BONE)
