"""``sonomesh`` command-line interface.

Every subcommand reads the same JSON config (``--config``; built-in
defaults otherwise), computes all of its artifacts in memory, and only then
writes them, each through an atomic rename.  Relative artifact paths live
under the config's ``output_dir``.

Exit codes: 0 success, 2 configuration/input errors (including missing
files), 3 numeric failures.
"""

import argparse
import csv
import io as _io
import json
import os
import sys

from . import FORMATS, __version__
from . import io as sio
from . import pipeline as pl
from . import skeleton as sk
from .config import PipelineConfig
from .errors import NumericError, ShapeError, SonomeshError
from .metrics import evaluate
from .pose import JointSet2D
from .signal import chirp_train


class Artifacts:
    """Outputs collected in memory and flushed together at the end."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.files = {}

    def add(self, name, data):
        self.files[self.cfg.resolve(name)] = data

    def add_json(self, name, obj):
        self.add(name, sio.dumps_json(obj))

    def flush(self):
        for path, data in self.files.items():
            sio.atomic_write(path, data)
        return sorted(self.files)


def _load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if getattr(args, "output_dir", None):
        cfg = PipelineConfig(cfg.chirp, cfg.scene, cfg.imaging, cfg.pose, cfg.registration,
                             cfg.fusion, args.output_dir)
    return cfg


def _input(cfg, value, default):
    path = cfg.resolve(value or default)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def _matrix_meta(scene):
    cfg = scene.chirp
    return dict(theta=scene.motion.aperture_angle, wavelength=cfg.wavelength(scene.v_s),
                v_s=scene.v_s, chirp=cfg, gate_range=scene.gate)


def _entropy_csv(trace):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "entropy"])
    for i, h in enumerate(trace):
        w.writerow([i, f"{h:.12g}"])
    return buf.getvalue()


def _meta_path(path):
    return os.path.splitext(path)[0] + ".json"


def _load_image(path):
    meta_path = _meta_path(path)
    if not os.path.exists(meta_path):
        raise FileNotFoundError(meta_path)
    meta = sio.read_json(meta_path)
    return sio.decode_aimg(_read_bytes(path), azimuth_bin_m=meta["azimuth_bin_m"], pad=meta["pad"],
                           gate_range=meta["gate_range"], center=tuple(meta["center"]))


# -- stage helpers (shared by single commands and the pipeline) -------------------------------

def _stage_simulate(cfg, out):
    m, bg, scene, gt = pl.simulate(cfg)
    out.add("echoes.pmtx", sio.encode_pmtx(m))
    out.add("background.pmtx", sio.encode_pmtx(bg))
    out.add_json("scene.json", scene.to_dict())
    out.add_json("gt_scene.json", sio.jointset_dict(gt, "m", frame="scene"))
    gj, gv = pl.canonical_gt(cfg)
    out.add_json("gt3d.json", sio.jointset_dict(gj, "m", vertices=gv, frame="canonical"))
    return m, bg, gt


def _stage_image(cfg, m, bg, out, autofocus=True):
    im = cfg.imaging
    if not autofocus:
        from dataclasses import replace

        im = replace(im, autofocus=False)
    img, info = pl.form_body_image(m, bg, im)
    out.add("image.aimg", sio.encode_aimg(img))
    out.add_json("image.json", sio.image_meta(img))
    out.add("image.pgm", sio.encode_pgm(img.pixels))
    out.add("entropy.csv", _entropy_csv(info.get("entropy_trace", [])))
    return img


def _stage_joints(cfg, img, out):
    js, _ = pl.joints_2d(img, cfg.pose)
    out.add_json("joints2d.json", js.to_dict())
    out.add_json("joints_scene.json",
                 sio.jointset_dict(img.pixel_to_scene(js.joints), "m", flagged=js.flagged, frame="scene"))
    out.add("joints.pgm", sio.encode_pgm(img.pixels, marks=js.joints))
    return js


def _reg_params(cfg, out, checkpoint=None, train=False):
    path = None if train else checkpoint or cfg.registration.checkpoint
    if path:
        return sio.load_reg_params(_input(cfg, path, path))
    res = pl.train_registration_from_config(cfg.registration)
    out.add("registration.regp", sio.encode_checkpoint(res.params.tensors, b"REGP"))
    out.add("registration_loss.csv", _curve_csv(res.loss, res.match))
    return res.params


def _fus_params(cfg, out, checkpoint=None, train=False):
    path = None if train else checkpoint or cfg.fusion.checkpoint
    if path:
        return sio.load_fusion_params(_input(cfg, path, path))
    res = pl.train_fusion_from_config(cfg.fusion)
    out.add("fusion.fusp", sio.encode_checkpoint(res.params.tensors, b"FUSP"))
    return res.params


def _curve_csv(loss, match):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "match"])
    for i, (a, b) in enumerate(zip(loss, match)):
        w.writerow([i, f"{a:.12g}", f"{b:.12g}"])
    return buf.getvalue()


def _report(out, name, pred, gt, pred_v=None, gt_v=None, label=""):
    names = list(sk.JOINT_NAMES) if len(pred) == sk.N_JOINTS else None
    rep = evaluate([(label or name, pred, gt, pred_v, gt_v)], joint_names=names, label=label)
    out.add(f"{name}.json", rep.to_json())
    out.add(f"{name}.csv", rep.to_csv())
    return rep


# -- commands ------------------------------------------------------------------------------------

def cmd_init_config(args):
    cfg = PipelineConfig.body() if args.preset == "body" else PipelineConfig()
    text = sio.dumps_json(cfg.to_dict())
    if args.output == "-":
        sys.stdout.write(text)
    else:
        sio.atomic_write(args.output, text)
    return []


def cmd_synth(args, cfg, out):
    buf = chirp_train(cfg.chirp, args.periods)
    out.add(args.output or "chirp.wav", sio.encode_wav(buf))


def cmd_simulate(args, cfg, out):
    _stage_simulate(cfg, out)


def cmd_image(args, cfg, out):
    scene, _ = pl.scene_from_config(cfg)
    meta = _matrix_meta(scene)
    m = sio.decode_pmtx(_read_bytes(_input(cfg, args.input, "echoes.pmtx")), **meta)
    bg = None
    if args.background != "none":
        bg = sio.decode_pmtx(_read_bytes(_input(cfg, args.background, "background.pmtx")), **meta)
    _stage_image(cfg, m, bg, out, autofocus=not args.no_autofocus)


def cmd_joints(args, cfg, out):
    img = _load_image(_input(cfg, args.image, "image.aimg"))
    _stage_joints(cfg, img, out)


def cmd_register(args, cfg, out):
    if args.action == "train":
        _reg_params(cfg, out, train=True)
        if args.output:
            out.files[cfg.resolve(args.output)] = out.files.pop(cfg.resolve("registration.regp"))
        return
    params = _reg_params(cfg, out, args.checkpoint)
    js = JointSet2D.from_dict(sio.read_json(_input(cfg, args.joints, "joints2d.json")))
    soft, refined = pl.apply_registration(js.joints, params, cfg.registration)
    out.add_json(args.output or "joints3d.json",
                 sio.jointset_dict(refined, "m", frame="canonical", soft_argmax=soft.tolist()))


def cmd_fuse(args, cfg, out):
    if args.action == "train":
        _fus_params(cfg, out, train=True)
        if args.output:
            out.files[cfg.resolve(args.output)] = out.files.pop(cfg.resolve("fusion.fusp"))
        return
    params = _fus_params(cfg, out, args.checkpoint)
    img = _load_image(_input(cfg, args.image, "image.aimg"))
    js = JointSet2D.from_dict(sio.read_json(_input(cfg, args.joints, "joints2d.json")))
    res = pl.apply_fusion(img, js.joints, params)
    out.add_json(args.output or "fused.json",
                 sio.jointset_dict(res.joints, "m", vertices=res.vertices, frame="canonical",
                                   gim_weights=res.gim_weights.tolist()))


def cmd_eval(args, cfg, out):
    pj, pv, _ = sio.read_jointset(_input(cfg, args.pred, args.pred))
    gj, gv, _ = sio.read_jointset(_input(cfg, args.gt, args.gt))
    if pj.shape != gj.shape:
        raise ShapeError(f"pred joints {pj.shape} and gt joints {gj.shape} differ")
    if pv is None or gv is None:
        pv = gv = None
    _report(out, args.output or "report", pj, gj, pv, gv, label=args.label)


def cmd_pipeline(args, cfg, out):
    m, bg, gt = _stage_simulate(cfg, out)
    img = _stage_image(cfg, m, bg, out)
    js = _stage_joints(cfg, img, out)
    rep = _report(out, "report", img.pixel_to_scene(js.joints), gt, label="joints2d_scene")
    reg = _reg_params(cfg, out)
    soft, refined = pl.apply_registration(js.joints, reg, cfg.registration)
    out.add_json("joints3d.json", sio.jointset_dict(refined, "m", frame="canonical",
                                                    soft_argmax=soft.tolist()))
    fus = _fus_params(cfg, out)
    res = pl.apply_fusion(img, js.joints, fus)
    out.add_json("fused.json", sio.jointset_dict(res.joints, "m", vertices=res.vertices,
                                                 frame="canonical", gim_weights=res.gim_weights.tolist()))
    gj, gv = pl.canonical_gt(cfg)
    _report(out, "report3d", res.joints, gj, res.vertices, gv, label="fused3d_canonical")
    print(f"MPJPE (2-D, scene) {rep.mpjpe_cm:.2f} cm", file=sys.stderr)


# -- parser ---------------------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="sonomesh", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"sonomesh {__version__}")
    p.add_argument("--schema", action="store_true", help="print file-format schema versions and exit")
    sub = p.add_subparsers(dest="command")

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON pipeline config (defaults if omitted)")
        sp.add_argument("--output-dir", help="override the config's output_dir")
        sp.set_defaults(fn=fn)
        return sp

    ic = sub.add_parser("init-config", help="write a default config")
    ic.add_argument("--preset", choices=("default", "body"), default="body")
    ic.add_argument("-o", "--output", default="-")
    ic.set_defaults(fn=None, init=True)

    sp = add("synth", cmd_synth, "write the chirp train as a WAV file")
    sp.add_argument("--periods", type=int, default=1)
    sp.add_argument("-o", "--output")

    add("simulate", cmd_simulate, "simulate echoes of the configured scene (PMTX)")

    sp = add("image", cmd_image, "form the acoustic image (AIMG, PGM, entropy CSV)")
    sp.add_argument("--input")
    sp.add_argument("--background", help="background PMTX, or 'none'")
    sp.add_argument("--no-autofocus", action="store_true")

    sp = add("joints", cmd_joints, "extract 2-D joints from an acoustic image")
    sp.add_argument("--image")

    for name, fn, ck in (("register", cmd_register, "REGP"), ("fuse", cmd_fuse, "FUSP")):
        sp = add(name, fn, f"train or apply the {name} stage")
        sp.add_argument("action", choices=("train", "apply"))
        sp.add_argument("--checkpoint", help=f"{ck} checkpoint for apply (trained on the fly if omitted)")
        sp.add_argument("--joints")
        if name == "fuse":
            sp.add_argument("--image")
        sp.add_argument("-o", "--output")

    sp = add("eval", cmd_eval, "compare predicted and ground-truth joint sets")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--label", default="")
    sp.add_argument("-o", "--output", help="report basename (default 'report')")

    add("pipeline", cmd_pipeline, "run every stage end to end")
    return p


def _threads():
    raw = os.environ.get("SONOMESH_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise SonomeshError(f"SONOMESH_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise SonomeshError("SONOMESH_THREADS must be >= 0")
    if n > 0:
        import torch

        torch.set_num_threads(n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.schema:
        print(json.dumps({"tool": __version__, "formats": FORMATS}, sort_keys=True))
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        _threads()
        if getattr(args, "init", False):
            cmd_init_config(args)
            return 0
        cfg = _load_config(args)
        out = Artifacts(cfg)
        args.fn(args, cfg, out)
        for path in out.flush():
            print(path)
    except NumericError as exc:
        print(f"sonomesh: numeric error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"sonomesh: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2
    except (SonomeshError, KeyError) as exc:
        print(f"sonomesh: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
