"""File formats: PNG images, flow and disparity codecs, key=value configs, datasets."""
from __future__ import annotations

import logging
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

import cv2
import numpy as np

from .core import INVALID_DISPARITY, CameraRig, EnergyParams, as_image
from .datagen import GroundTruthBundle, ObjectSpec, SceneSpec, default_scene, gt_model
from .geometry import ALL_KEYS, RigidMotion, SceneModel
from .pipeline import PipelineOptions
from .sceneflow import ProposalConfig

log = logging.getLogger(__name__)

FLO_MAGIC = b"PIEH"
FLOW_PNG_SCALE = 64.0
FLOW_PNG_OFFSET = 2 ** 15
DISP_PNG_SCALE = 256.0
VIEW_DIRS = ("left", "right")


class FormatError(ValueError):
    pass


# images

def read_image(path) -> np.ndarray:
    """8- or 16-bit PNG -> float ``(H, W, C)`` in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot decode image: {path}")
    if raw.dtype == np.uint8:
        peak = 255.0
    elif raw.dtype == np.uint16:
        peak = 65535.0
    else:
        raise FormatError(f"unsupported bit depth {raw.dtype} in {path}")
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[:, :, :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return as_image(raw.astype(np.float64) / peak)


def write_image(path, img: np.ndarray, bits: int = 16) -> None:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = as_image(img)
    peak = 255 if bits == 8 else 65535
    q = np.rint(np.clip(img, 0.0, 1.0) * peak).astype(np.uint8 if bits == 8 else np.uint16)
    q = q[:, :, 0] if q.shape[2] == 1 else cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    _imwrite(path, q)


def _imwrite(path, arr) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"cannot write {path}")


def read_mask(path) -> np.ndarray:
    return read_image(path)[:, :, 0] > 0.5


def write_mask(path, mask: np.ndarray) -> None:
    _imwrite(path, np.where(np.asarray(mask, bool), 255, 0).astype(np.uint8))


# flow

def write_flow(path, flow: np.ndarray) -> None:
    """Binary ``.flo``: magic, int32 width, int32 height, float32 (u, v) row-major."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be HxWx2, got {flow.shape}")
    h, w = flow.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(FLO_MAGIC)
        np.array([w, h], dtype="<i4").tofile(fh)
        flow.astype("<f4").tofile(fh)


def read_flow(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FormatError(f"bad magic in flow file {path}")
    w, h = np.frombuffer(data, "<i4", count=2, offset=4)
    if w <= 0 or h <= 0:
        raise FormatError(f"bad dimensions {w}x{h} in {path}")
    n = int(w) * int(h) * 2
    if len(data) != 12 + 4 * n:
        raise FormatError(f"dimension mismatch: {w}x{h} header vs {len(data) - 12} payload bytes in {path}")
    return np.frombuffer(data, "<f4", count=n, offset=12).reshape(int(h), int(w), 2).astype(np.float64)


def encode_flow_png(flow: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """KITTI encoding -> ``(H, W, 3)`` uint16 as ``(u, v, valid)``."""
    flow = np.asarray(flow, float)
    if valid is None:
        valid = np.all(np.isfinite(flow), axis=2)
    stored = np.rint(np.nan_to_num(flow) * FLOW_PNG_SCALE + FLOW_PNG_OFFSET)
    if np.any(valid & np.any((stored < 0) | (stored > 65535), axis=2)):
        raise ValueError("flow magnitude exceeds the 16-bit PNG range")
    out = np.zeros(flow.shape[:2] + (3,), np.uint16)
    out[..., :2] = np.clip(stored, 0, 65535)
    out[..., 2] = np.asarray(valid, bool)
    return out


def decode_flow_png(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.asarray(raw)
    flow = (raw[..., :2].astype(np.float64) - FLOW_PNG_OFFSET) / FLOW_PNG_SCALE
    return flow, raw[..., 2] > 0


def write_flow_png(path, flow: np.ndarray, valid: np.ndarray | None = None) -> None:
    _imwrite(path, encode_flow_png(flow, valid)[:, :, ::-1])


def read_flow_png(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot decode flow PNG: {path}")
    if raw.dtype != np.uint16 or raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"flow PNG must be 16-bit with 3 channels: {path}")
    return decode_flow_png(raw[:, :, ::-1])


# disparity

def encode_disparity(disp: np.ndarray) -> np.ndarray:
    disp = np.asarray(disp, float)
    valid = np.isfinite(disp) & (disp > 0)
    stored = np.rint(np.where(valid, disp, 0.0) * DISP_PNG_SCALE)
    if stored.max(initial=0) > 65535:
        raise ValueError("disparity exceeds the 16-bit PNG range")
    return np.maximum(stored, valid).astype(np.uint16)  # tiny valid values stay valid


def decode_disparity(raw: np.ndarray) -> np.ndarray:
    raw = np.asarray(raw)
    return np.where(raw > 0, raw.astype(np.float64) / DISP_PNG_SCALE, INVALID_DISPARITY)


def write_disparity(path, disp: np.ndarray) -> None:
    _imwrite(path, encode_disparity(disp))


def read_disparity(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"cannot decode disparity PNG: {path}")
    if raw.dtype != np.uint16 or raw.ndim != 2:
        raise FormatError(f"disparity PNG must be 16-bit single channel: {path}")
    return decode_disparity(raw)


# key=value files

def parse_kv(text: str, source: str = "<string>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise FormatError(f"{source}:{n}: empty key")
        out[k] = v
    return out


def read_kv(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return parse_kv(path.read_text(), str(path))


def write_kv(path, values: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {_fmt(v)}\n" for k, v in values.items()))


def _fmt(v) -> str:
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(_fmt(x) for x in np.ravel(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _convert(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _convert(text, args[0], key)
    try:
        if tp is bool:
            low = text.lower()
            if low not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(text)
            return low in ("1", "true", "yes")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
    except ValueError:
        raise FormatError(f"bad value for {key}: {text!r}") from None
    return text


def _typed_fields(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


@dataclass
class RunConfig:
    params: EnergyParams = field(default_factory=EnergyParams)
    options: PipelineOptions = field(default_factory=PipelineOptions)
    seed: int = 0
    unknown: list = field(default_factory=list)


PROPOSAL_PREFIX = "proposals."


def parse_config(values: dict) -> RunConfig:
    """Build a :class:`RunConfig` from key=value pairs; missing keys keep defaults.

    Energy keys use the :class:`EnergyParams` field names, pipeline keys the
    :class:`PipelineOptions` names and proposal keys ``proposals.<name>``.
    Unknown keys are ignored and returned in ``unknown``.
    """
    ef, of, pf = _typed_fields(EnergyParams), _typed_fields(PipelineOptions), _typed_fields(ProposalConfig)
    of.pop("proposals")
    e_kw, o_kw, p_kw, seed, unknown = {}, {}, {}, 0, []
    for k, v in values.items():
        if k == "seed":
            seed = _convert(v, int, k)
        elif k in ef:
            e_kw[k] = _convert(v, ef[k], k)
        elif k in of:
            o_kw[k] = _convert(v, of[k], k)
        elif k.startswith(PROPOSAL_PREFIX) and k[len(PROPOSAL_PREFIX):] in pf:
            name = k[len(PROPOSAL_PREFIX):]
            p_kw[name] = _convert(v, pf[name], k)
        else:
            unknown.append(k)
    if unknown:
        log.warning("ignoring unknown config keys: %s", ", ".join(unknown))
    try:
        params = EnergyParams(**e_kw)
        options = PipelineOptions(**o_kw, proposals=ProposalConfig(**p_kw))
    except ValueError as exc:
        raise FormatError(f"invalid configuration: {exc}") from exc
    return RunConfig(params, options, seed, unknown)


def read_config(path) -> RunConfig:
    return parse_config(read_kv(path))


def read_calib(path) -> CameraRig:
    kv = read_kv(path)
    try:
        return CameraRig.from_focal(float(kv["focal"]), float(kv["cx"]), float(kv["cy"]),
                                    float(kv["baseline"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing calibration key {exc.args[0]}") from None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_calib(path, rig: CameraRig) -> None:
    K = rig.K
    if K[0, 1] != 0 or K[0, 0] != K[1, 1]:
        raise ValueError("only square-pixel, zero-skew intrinsics are stored")
    write_kv(path, {"focal": K[0, 0], "cx": K[0, 2], "cy": K[1, 2], "baseline": rig.baseline})


def _floats(text: str, n: int, key: str) -> list:
    try:
        vals = [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise FormatError(f"bad numbers for {key}: {text!r}") from None
    if len(vals) != n:
        raise FormatError(f"{key} needs {n} numbers, got {len(vals)}")
    return vals


def parse_scene(values: dict) -> SceneSpec:
    """Scene description for the generator.

    ``preset = default`` (with optional ``seed``) starts from the default
    scene; ``camera_motion`` and ``object.<i>.motion`` are ``tx ty tz rx ry rz``
    (m, rad); ``object.<i>.rect`` is ``x0 y0 width height`` and
    ``object.<i>.depth`` places a fronto-parallel plane (``object.<i>.plane``
    gives ``n`` directly).
    """
    values = dict(values)
    seed = int(values.pop("seed", "0"))
    preset = values.pop("preset", "")
    if preset not in ("", "default"):
        raise FormatError(f"unknown scene preset {preset!r}")
    spec = default_scene(seed) if preset == "default" else SceneSpec()
    sf = _typed_fields(SceneSpec)
    objs: dict = {}
    for k, v in values.items():
        if k == "camera_motion":
            spec.camera_motion = RigidMotion.from_params(*_floats(v, 6, k))
        elif k.startswith("object."):
            parts = k.split(".")
            if len(parts) != 3 or not parts[1].isdigit():
                raise FormatError(f"bad object key {k!r}")
            objs.setdefault(int(parts[1]), {})[parts[2]] = v
        elif k in sf and sf[k] in (int, float):
            setattr(spec, k, _convert(v, sf[k], k))
        else:
            raise FormatError(f"unknown scene key {k!r}")
    if objs:
        spec.objects = [_object(i, objs[i]) for i in sorted(objs)]
    return spec


def _object(i: int, kv: dict) -> ObjectSpec:
    if "rect" not in kv:
        raise FormatError(f"object.{i}.rect is required")
    if "plane" in kv:
        plane = np.array(_floats(kv["plane"], 3, f"object.{i}.plane"))
    elif "depth" in kv:
        plane = np.array([0.0, 0.0, 1.0 / _floats(kv["depth"], 1, f"object.{i}.depth")[0]])
    else:
        raise FormatError(f"object.{i} needs depth or plane")
    motion = RigidMotion.from_params(*_floats(kv.get("motion", "0 0 0 0 0 0"), 6, f"object.{i}.motion"))
    extra = set(kv) - {"rect", "plane", "depth", "motion", "seed"}
    if extra:
        raise FormatError(f"unknown object keys {sorted(extra)}")
    return ObjectSpec(tuple(_floats(kv["rect"], 4, f"object.{i}.rect")), plane, motion,
                      int(kv.get("seed", 101 + i)))


def read_scene(path) -> SceneSpec:
    return parse_scene(read_kv(path))


# scene models

def save_model(path, model: SceneModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, labels=model.labels, planes=model.planes, objects=model.objects,
             rotations=np.array([m.R for m in model.motions]),
             translations=np.array([m.t for m in model.motions]))


def load_model(path) -> SceneModel:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        with np.load(path) as z:
            motions = [RigidMotion(R, t) for R, t in zip(z["rotations"], z["translations"])]
            return SceneModel(z["labels"], z["planes"], z["objects"], motions)
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"bad model file {path}: {exc}") from None


# directory layout

def frame_name(frame: int) -> str:
    return f"{frame + 1:03d}.png"


def write_views(root, images: dict) -> None:
    for (view, frame), img in images.items():
        write_image(Path(root) / VIEW_DIRS[view] / frame_name(frame), img)


def read_views(root) -> dict:
    """All ``left/NNN.png`` and ``right/NNN.png`` images keyed by ``(view, frame)``."""
    root = Path(root)
    out = {}
    for view, frame in ALL_KEYS:
        p = root / VIEW_DIRS[view] / frame_name(frame)
        if p.is_file():
            out[(view, frame)] = read_image(p)
    if not out:
        raise FileNotFoundError(f"no input images under {root}/left or {root}/right")
    return out


def write_estimates(root, latents: dict, flow_fwd, flow_bwd, disparity: dict, moving) -> None:
    root = Path(root)
    write_views(root, latents)
    write_flow(root / "flow" / "fwd.flo", flow_fwd)
    if flow_bwd is not None:
        write_flow(root / "flow" / "bwd.flo", flow_bwd)
    for fr, d in disparity.items():
        write_disparity(root / "disp" / frame_name(fr), d)
    write_mask(root / "mask.png", moving)


@dataclass
class Estimates:
    latents: dict
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray | None
    disparity: dict
    moving: np.ndarray


def read_estimates(root) -> Estimates:
    root = Path(root)
    bwd = root / "flow" / "bwd.flo"
    disp = {fr: read_disparity(root / "disp" / frame_name(fr))
            for fr in (0, 1) if (root / "disp" / frame_name(fr)).is_file()}
    if not disp:
        raise FileNotFoundError(f"no disparity maps under {root / 'disp'}")
    return Estimates(read_views(root), read_flow(root / "flow" / "fwd.flo"),
                     read_flow(bwd) if bwd.is_file() else None, disp, read_mask(root / "mask.png"))


def write_dataset(root, bundle: GroundTruthBundle) -> None:
    """Blurred inputs, prior mask and calibration, with ground truth under ``gt/``."""
    root = Path(root)
    write_views(root, bundle.blurred)
    write_mask(root / "mask.png", bundle.prior_mask)
    write_calib(root / "calib.txt", bundle.rig)
    gt = root / "gt"
    write_estimates(gt, bundle.latent, bundle.flow_fwd, bundle.flow_bwd, bundle.disparity,
                    bundle.moving_mask)
    save_model(gt / "model.npz", gt_model(bundle, bundle.surface_map))


@dataclass
class InputSequence:
    blurred: dict
    mask: np.ndarray
    rig: CameraRig


def read_inputs(root) -> InputSequence:
    root = Path(root)
    return InputSequence(read_views(root), read_mask(root / "mask.png"), read_calib(root / "calib.txt"))
