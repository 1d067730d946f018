"""Batch command-line frontend: encode / detect / eval / bench.

Structured data is JSON everywhere; tensors travel as CTSR files.  Every
command is a pure function of its inputs plus the resolved flags, so reruns
are byte-identical (benchmark latency numbers are the one documented
exception, and a bench config can turn them off).

Flag resolution is three-layered: an explicit command-line flag wins, then a
value from the --config JSON file, then the built-in default.

Exit codes: 0 success; 2 for unreadable or malformed inputs (files, config
contents); 3 for a flag/data inconsistency, such as a strategy that needs
tensors the maps directory does not provide.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .decoder import CornerCandidate, CornerMaps, decode_corners
from .encoder import (
    SceneError,
    SceneFormatError,
    SceneObject,
    encode,
    scene_from_json,
)
from .evaluator import evaluate
from .geometry import BBox, MuPolicy
from .matcher import STRATEGIES, MatchConfig, ScoredBox, match
from .synthbench import NoiseModel, SceneSpec, generate_layout, run_benchmark
from .tensorio import TensorFormatError, load_tensor, save_tensor

MAP_NAMES = (
    "tl_heat", "br_heat",
    "tl_offset", "br_offset",
    "tl_shift", "br_shift",
    "tl_guide", "br_guide",
)
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "ctsr-maps-v1"

HARD_DEFAULTS = {
    "stride": 4,
    "topk": 100,
    "strategy": "centripetal",
    "mu_large": 1 / 2.1,
    "mu_small": 1 / 2.4,
    "area_threshold": 3500.0,
    "soft_nms_sigma": 0.5,
    "seed": None,  # bench: fall back to the spec's own seed
    "threads": None,  # all cores
    "plot": False,
}


class InputError(Exception):
    """Unreadable or malformed input file; exits 2."""


class ConfigError(Exception):
    """Flags and data disagree; exits 3."""


# ---------------------------------------------------------------------------
# flag plumbing


def _build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, help="JSON file supplying any flag's value")
    shared.add_argument("--stride", type=int, default=None)
    shared.add_argument("--topk", type=int, default=None, help="corner candidates per kind")
    shared.add_argument("--strategy", choices=STRATEGIES, default=None)
    shared.add_argument("--mu-large", type=float, default=None, dest="mu_large")
    shared.add_argument("--mu-small", type=float, default=None, dest="mu_small")
    shared.add_argument("--area-threshold", type=float, default=None, dest="area_threshold")
    shared.add_argument("--soft-nms-sigma", type=float, default=None, dest="soft_nms_sigma")
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--threads", type=int, default=None)
    shared.add_argument("--plot", action="store_true", default=None)

    p = argparse.ArgumentParser(prog="cornermatch", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    enc = sub.add_parser("encode", parents=[shared], help="scene JSON -> target map tensors")
    enc.add_argument("scene", type=Path)
    enc.add_argument("out_dir", type=Path)

    det = sub.add_parser("detect", parents=[shared], help="map tensors -> detections JSON")
    det.add_argument("maps_dir", type=Path)
    det.add_argument("--out", type=Path, default=None, help="default: <maps_dir>/detections.json")

    ev = sub.add_parser("eval", parents=[shared], help="detections + ground truth -> metrics")
    ev.add_argument("detections", type=Path, help="file, or directory paired by stem")
    ev.add_argument("ground_truth", type=Path)
    ev.add_argument("--out", type=Path, default=None, help="default: stdout")

    ben = sub.add_parser("bench", parents=[shared], help="run a synthetic benchmark grid")
    ben.add_argument("bench_config", type=Path)
    ben.add_argument("--out", type=Path, default=None, help="default: stdout")
    return p


class _Flags:
    """Explicit flag > --config file > hard default."""

    def __init__(self, args: argparse.Namespace) -> None:
        self.args = args
        self.config: dict = {}
        if args.config is not None:
            doc = _load_json(args.config)
            if not isinstance(doc, dict):
                raise InputError(f"{args.config}: config must be a JSON object")
            unknown = set(doc) - set(HARD_DEFAULTS)
            if unknown:
                raise InputError(f"{args.config}: unknown config keys {sorted(unknown)}")
            self.config = doc

    def get(self, name: str):
        v = getattr(self.args, name, None)
        if v is not None:
            return v
        if name in self.config:
            return self.config[name]
        return HARD_DEFAULTS[name]

    def given(self, name: str) -> bool:
        return getattr(self.args, name, None) is not None or name in self.config

    def match_config(self, strategy: str | None = None) -> MatchConfig:
        return MatchConfig(
            strategy=strategy if strategy is not None else self.get("strategy"),
            mu_policy=MuPolicy(
                large_mu=self.get("mu_large"),
                small_mu=self.get("mu_small"),
                area_threshold=self.get("area_threshold"),
            ),
            soft_nms_sigma=self.get("soft_nms_sigma"),
        )


def _load_json(path: Path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise InputError(f"{path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e})") from e


def _dump_json(doc: dict | list, out: Path | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True)
    if out is None:
        print(text)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# encode


def cmd_encode(scene_path: Path, out_dir: Path, stride: int) -> int:
    try:
        scene = scene_from_json(scene_path)
    except (SceneFormatError, SceneError) as e:
        raise InputError(f"{scene_path}: {e}") from e
    except OSError as e:
        raise InputError(f"{scene_path}: {e.strerror or e}") from e
    if scene.width % stride or scene.height % stride:
        raise ConfigError(f"stride {stride} does not divide image {scene.width}x{scene.height}")
    # Floor of two heat channels: a single channel softmaxes to a flat 1.0
    # map and decode loses the peaks, so single-category (and empty) scenes
    # get a zero-padded second channel to keep the round trip working.
    maps = encode(scene, max(2, scene.num_categories_lower_bound()), stride=stride)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in MAP_NAMES:
        fname = f"{name}.ctsr"
        save_tensor(out_dir / fname, getattr(maps, name))
        files[name] = fname
    manifest = {
        "format": MANIFEST_FORMAT,
        "width": scene.width,
        "height": scene.height,
        "stride": stride,
        "num_categories": maps.num_categories,
        "shift_encoding": "log",
        "files": files,
    }
    _dump_json(manifest, out_dir / MANIFEST_NAME)
    return 0


# ---------------------------------------------------------------------------
# detect


def _load_maps(maps_dir: Path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = maps_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise InputError(f"{manifest_path}: manifest not found")
    manifest = _load_json(manifest_path)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise InputError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    tensors: dict[str, np.ndarray] = {}
    for name in MAP_NAMES:
        fname = manifest.get("files", {}).get(name)
        if fname is None:
            raise InputError(f"{manifest_path}: no entry for tensor {name!r}")
        path = maps_dir / fname
        if not path.is_file():
            raise InputError(f"{path}: tensor file missing")
        try:
            tensors[name] = load_tensor(path)
        except TensorFormatError as e:
            raise InputError(f"{path}: {e}") from e
    hs = manifest["height"] // manifest["stride"]
    ws = manifest["width"] // manifest["stride"]
    c = manifest["num_categories"]
    want = {"heat": (c, hs, ws), "offset": (2, hs, ws), "shift": (2, hs, ws), "guide": (2, hs, ws)}
    for name, arr in tensors.items():
        expected = want[name.split("_", 1)[1]]
        if arr.shape != expected:
            raise InputError(f"{name}: shape {arr.shape} does not match manifest {expected}")
    return tensors, manifest


def _evidence_filter(cands: list[CornerCandidate], raw_heat: np.ndarray) -> list[CornerCandidate]:
    # Zero raw heat means no peak was ever rendered at that cell; such
    # candidates are softmax-plateau artifacts, not detections.
    return [c for c in cands if raw_heat[c.category, c.cell[0], c.cell[1]] > 0.0]


def detect_from_tensors(
    tensors: dict[str, np.ndarray],
    cfg: MatchConfig,
    k: int,
    stride: int,
) -> list[ScoredBox]:
    """The detect pipeline on in-memory maps; cmd_detect is this plus IO.

    The associative and center-validation strategies need inputs (embedding
    tensors, center keypoints) the encode-side map bundle cannot carry, so
    they are rejected here as configuration conflicts.
    """
    if cfg.strategy in ("associative_1d", "associative_2d"):
        raise ConfigError("embeddings required: maps carry no embedding tensors")
    if cfg.strategy == "center_validation":
        raise ConfigError("centers required: maps carry no center keypoints")
    if cfg.strategy == "center_regression":
        # stored shifts are log-encoded; linear decode wants signed cells
        tl_shift = np.exp(tensors["tl_shift"].astype(np.float64))
        br_shift = -np.exp(tensors["br_shift"].astype(np.float64))
    else:
        tl_shift, br_shift = tensors["tl_shift"], tensors["br_shift"]
    tl_maps = CornerMaps(tensors["tl_heat"], tensors["tl_offset"], tl_shift)
    br_maps = CornerMaps(tensors["br_heat"], tensors["br_offset"], br_shift)
    tls, brs = decode_corners(tl_maps, br_maps, k=k, stride=stride)
    tls = _evidence_filter(tls, tensors["tl_heat"])
    brs = _evidence_filter(brs, tensors["br_heat"])
    return match(tls, brs, cfg, stride=stride)


def detections_to_json(dets: list[ScoredBox]) -> list[dict]:
    return [
        {
            "bbox": [d.box.tlx, d.box.tly, d.box.brx, d.box.bry],
            "category": d.category,
            "score": d.score,
            "weight": d.weight,
        }
        for d in dets
    ]


def cmd_detect(maps_dir: Path, out: Path | None, flags: _Flags) -> int:
    tensors, manifest = _load_maps(maps_dir)
    stride = manifest["stride"]
    if flags.given("stride") and flags.get("stride") != stride:
        raise ConfigError(
            f"--stride {flags.get('stride')} conflicts with maps encoded at stride {stride}"
        )
    dets = detect_from_tensors(tensors, flags.match_config(), flags.get("topk"), stride)
    _dump_json(detections_to_json(dets), out if out is not None else maps_dir / "detections.json")
    return 0


# ---------------------------------------------------------------------------
# eval


def _detections_from_json(path: Path) -> list[ScoredBox]:
    doc = _load_json(path)
    if not isinstance(doc, list):
        raise InputError(f"{path}: expected a JSON array of detections")
    out = []
    for idx, entry in enumerate(doc):
        try:
            box = BBox(*[float(v) for v in entry["bbox"]])
            out.append(
                ScoredBox(
                    box=box,
                    category=int(entry["category"]),
                    score=float(entry["score"]),
                    weight=float(entry.get("weight", 1.0)),
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise InputError(f"{path}: detections[{idx}]: {e}") from e
    return out


def _scene_objects(path: Path) -> list[SceneObject]:
    try:
        return list(scene_from_json(path).objects)
    except (SceneFormatError, SceneError) as e:
        raise InputError(f"{path}: {e}") from e


def _eval_pairs(dets_path: Path, gt_path: Path) -> tuple[list[list], list[list]]:
    if dets_path.is_dir() != gt_path.is_dir():
        raise InputError("detections and ground truth must both be files or both directories")
    if not dets_path.is_dir():
        return [_detections_from_json(dets_path)], [_scene_objects(gt_path)]
    dets_files = sorted(dets_path.glob("*.json"))
    if not dets_files:
        raise InputError(f"{dets_path}: no *.json detection files")
    dets, gts = [], []
    for df in dets_files:
        gf = gt_path / df.name
        if not gf.is_file():
            raise InputError(f"{gf}: no ground truth for {df.name}")
        dets.append(_detections_from_json(df))
        gts.append(_scene_objects(gf))
    return dets, gts


def cmd_eval(dets_path: Path, gt_path: Path, out: Path | None) -> int:
    dets, gts = _eval_pairs(dets_path, gt_path)
    gt_cats = {g.category for img in gts for g in img}
    det_cats = {d.category for img in dets for d in img}
    stray = sorted(det_cats - gt_cats)
    if stray:
        print(
            f"warning: detection categories absent from ground truth: {stray}",
            file=sys.stderr,
        )
    _dump_json(evaluate(dets, gts).to_dict(), out)
    return 0


# ---------------------------------------------------------------------------
# bench


def _parse_bench_config(doc: dict, flags: _Flags) -> dict:
    if not isinstance(doc, dict):
        raise InputError("bench config must be a JSON object")
    known = {"spec", "noise_grid", "strategies", "n_scenes", "include_latency"}
    unknown = set(doc) - known
    if unknown:
        raise InputError(f"unknown bench config keys {sorted(unknown)}")
    try:
        spec = SceneSpec.from_dict(doc.get("spec", {}))
        if flags.given("seed"):
            spec = SceneSpec.from_dict({**spec.to_dict(), "seed": flags.get("seed")})
        noise_grid = [NoiseModel.from_dict(n) for n in doc.get("noise_grid", [{}])]
    except (TypeError, ValueError) as e:
        raise InputError(f"bench config: {e}") from e
    strategies = doc.get("strategies", list(STRATEGIES))
    if flags.given("strategy"):
        strategies = [flags.get("strategy")]
    return {
        "spec": spec,
        "noise_grid": noise_grid,
        "strategies": strategies,
        "n_scenes": doc.get("n_scenes", 50),
        "include_latency": bool(doc.get("include_latency", True)),
    }


def cmd_bench(config_path: Path, out: Path | None, flags: _Flags) -> int:
    cfg = _parse_bench_config(_load_json(config_path), flags)
    threads = flags.get("threads")
    try:
        report = run_benchmark(
            cfg["spec"],
            cfg["noise_grid"],
            cfg["strategies"],
            n_scenes=int(cfg["n_scenes"]),
            stride=flags.get("stride"),
            k=flags.get("topk"),
            match_config=flags.match_config(strategy="centripetal"),
            include_latency=cfg["include_latency"],
            threads=threads if threads is not None else (os.cpu_count() or 1),
        )
    except (TypeError, ValueError) as e:
        raise InputError(f"bench config: {e}") from e
    _dump_json(report, out)
    if flags.get("plot"):
        _emit_plots(report, cfg["spec"], flags.get("stride"), out)
    return 0


def _emit_plots(report: dict, spec: SceneSpec, stride: int, out: Path | None) -> None:
    from .plots import guide_offset_field, plot_benchmark_row

    plot_dir = out.parent if out is not None else Path(".")
    plot_dir.mkdir(parents=True, exist_ok=True)
    offset_field = None
    if report["n_scenes"] > 0:
        layout = generate_layout(spec, 0)
        maps = encode(layout.scene, spec.num_categories, stride=stride)
        offset_field = guide_offset_field(maps.tl_guide)
    for row in range(len(report["grid"])):
        plot_benchmark_row(report, row, offset_field, plot_dir / f"bench_row_{row}.svg")


# ---------------------------------------------------------------------------
# entry points


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        flags = _Flags(args)
        if args.cmd == "encode":
            return cmd_encode(args.scene, args.out_dir, flags.get("stride"))
        if args.cmd == "detect":
            return cmd_detect(args.maps_dir, args.out, flags)
        if args.cmd == "eval":
            return cmd_eval(args.detections, args.ground_truth, args.out)
        return cmd_bench(args.bench_config, args.out, flags)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def run() -> None:
    raise SystemExit(main())
