import json
import subprocess
import sys

import numpy as np
import pytest

from cornermatch.cli import main
from cornermatch.geometry import BBox, iou
from cornermatch.tensorio import load_tensor

THREE_BOXES = [
    ((8.5, 10.25, 47.0, 60.5), 0),
    ((70.0, 12.0, 118.0, 50.0), 1),
    ((20.0, 80.0, 100.0, 120.0), 2),
]


def write_scene(path, objects, width=128, height=128):
    doc = {
        "width": width,
        "height": height,
        "objects": [{"bbox": list(b), "category": c} for b, c in objects],
    }
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def best_box_per_category(dets):
    # detect output is in soft-NMS selection order, best first
    out = {}
    for d in dets:
        out.setdefault(d["category"], BBox(*d["bbox"]))
    return out


# ---------------------------------------------------------------------------
# encode


def test_encode_writes_bundle(tmp_path):
    scene = write_scene(tmp_path / "scene.json", THREE_BOXES)
    out = tmp_path / "maps"
    assert main(["encode", str(scene), str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["format"] == "ctsr-maps-v1"
    assert manifest["stride"] == 4
    assert manifest["num_categories"] == 3
    assert manifest["shift_encoding"] == "log"
    assert sorted(manifest["files"]) == sorted(
        ["tl_heat", "br_heat", "tl_offset", "br_offset",
         "tl_shift", "br_shift", "tl_guide", "br_guide"]
    )
    heat = load_tensor(out / manifest["files"]["tl_heat"])
    assert heat.shape == (3, 32, 32)
    assert load_tensor(out / manifest["files"]["tl_offset"]).shape == (2, 32, 32)


def test_encode_field_error_exits_2(tmp_path, capsys):
    p = tmp_path / "scene.json"
    p.write_text(json.dumps({"width": 64, "objects": []}))
    assert main(["encode", str(p), str(tmp_path / "o")]) == 2
    assert "height" in capsys.readouterr().err


def test_encode_out_of_bounds_exits_2(tmp_path, capsys):
    scene = write_scene(tmp_path / "s.json", [((100.0, 10.0, 140.0, 30.0), 0)])
    assert main(["encode", str(scene), str(tmp_path / "o")]) == 2
    assert "outside image" in capsys.readouterr().err


def test_encode_stride_conflict_exits_3(tmp_path, capsys):
    scene = write_scene(tmp_path / "s.json", [], width=130)
    assert main(["encode", str(scene), str(tmp_path / "o")]) == 3
    assert "does not divide" in capsys.readouterr().err


def test_encode_single_category_floors_channels(tmp_path):
    scene = write_scene(tmp_path / "s.json", [((8.0, 8.0, 40.0, 40.0), 0)])
    out = tmp_path / "maps"
    assert main(["encode", str(scene), str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["num_categories"] == 2
    heat = load_tensor(out / "tl_heat.ctsr")
    assert heat[1].max() == 0.0  # padding channel stays empty


# ---------------------------------------------------------------------------
# detect


def encode_then_detect(tmp_path, objects, extra=(), **scene_kw):
    scene = write_scene(tmp_path / "scene.json", objects, **scene_kw)
    maps = tmp_path / "maps"
    assert main(["encode", str(scene), str(maps)]) == 0
    assert main(["detect", str(maps), *extra]) == 0
    return json.loads((maps / "detections.json").read_text())


def test_encode_detect_round_trip(tmp_path):
    dets = encode_then_detect(tmp_path, THREE_BOXES)
    best = best_box_per_category(dets)
    assert set(best) == {0, 1, 2}
    for b, c in THREE_BOXES:
        assert iou(best[c], BBox(*b)) >= 0.98


def test_detect_single_category_round_trip(tmp_path):
    dets = encode_then_detect(tmp_path, [((8.5, 10.25, 47.0, 60.5), 0)])
    best = best_box_per_category(dets)
    assert iou(best[0], BBox(8.5, 10.25, 47.0, 60.5)) >= 0.98


def test_detect_empty_scene_round_trip(tmp_path):
    assert encode_then_detect(tmp_path, []) == []


def test_detect_center_regression_round_trip(tmp_path):
    # stored shifts are log cells; the linear strategy must see them converted
    dets = encode_then_detect(tmp_path, THREE_BOXES, extra=["--strategy", "center_regression"])
    best = best_box_per_category(dets)
    for b, c in THREE_BOXES:
        assert iou(best[c], BBox(*b)) >= 0.98


def test_detect_stride_conflict_exits_3(tmp_path, capsys):
    scene = write_scene(tmp_path / "s.json", THREE_BOXES)
    maps = tmp_path / "maps"
    main(["encode", str(scene), str(maps)])
    assert main(["detect", str(maps), "--stride", "8"]) == 3
    assert "stride" in capsys.readouterr().err


def test_detect_missing_manifest_exits_2(tmp_path, capsys):
    assert main(["detect", str(tmp_path)]) == 2
    assert "manifest" in capsys.readouterr().err


@pytest.mark.parametrize(
    "strategy,needle",
    [
        ("associative_1d", "embeddings required"),
        ("associative_2d", "embeddings required"),
        ("center_validation", "centers required"),
    ],
)
def test_detect_strategies_needing_extra_inputs_exit_3(tmp_path, capsys, strategy, needle):
    scene = write_scene(tmp_path / "s.json", THREE_BOXES)
    maps = tmp_path / "maps"
    main(["encode", str(scene), str(maps)])
    assert main(["detect", str(maps), "--strategy", strategy]) == 3
    assert needle in capsys.readouterr().err


def test_detect_out_flag(tmp_path):
    scene = write_scene(tmp_path / "s.json", THREE_BOXES)
    maps = tmp_path / "maps"
    main(["encode", str(scene), str(maps)])
    out = tmp_path / "elsewhere" / "d.json"
    assert main(["detect", str(maps), "--out", str(out)]) == 0
    assert json.loads(out.read_text())


# ---------------------------------------------------------------------------
# eval


def test_eval_file_pair_perfect(tmp_path, capsys):
    scene = write_scene(tmp_path / "gt.json", THREE_BOXES)
    dets = [
        {"bbox": list(b), "category": c, "score": 0.9 - 0.1 * c} for b, c in THREE_BOXES
    ]
    dp = tmp_path / "dets.json"
    dp.write_text(json.dumps(dets))
    assert main(["eval", str(dp), str(scene)]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["ap"] == 1.0
    assert metrics["ar_100"] == 1.0


def test_eval_full_chain(tmp_path, capsys):
    scene = write_scene(tmp_path / "scene.json", THREE_BOXES)
    maps = tmp_path / "maps"
    main(["encode", str(scene), str(maps)])
    main(["detect", str(maps)])
    assert main(["eval", str(maps / "detections.json"), str(scene)]) == 0
    metrics = json.loads(capsys.readouterr().out)
    assert metrics["ap"] >= 0.99


def test_eval_directory_pairing(tmp_path, capsys):
    dd, gd = tmp_path / "dets", tmp_path / "gts"
    dd.mkdir(), gd.mkdir()
    for name, objs in (("a.json", THREE_BOXES[:1]), ("b.json", THREE_BOXES[1:])):
        write_scene(gd / name, objs)
        (dd / name).write_text(
            json.dumps([{"bbox": list(b), "category": c, "score": 0.8} for b, c in objs])
        )
    assert main(["eval", str(dd), str(gd)]) == 0
    assert json.loads(capsys.readouterr().out)["ap"] == 1.0


def test_eval_missing_ground_truth_exits_2(tmp_path, capsys):
    dd, gd = tmp_path / "dets", tmp_path / "gts"
    dd.mkdir(), gd.mkdir()
    (dd / "a.json").write_text("[]")
    assert main(["eval", str(dd), str(gd)]) == 2
    assert "no ground truth" in capsys.readouterr().err


def test_eval_mixed_file_and_directory_exits_2(tmp_path, capsys):
    dd = tmp_path / "dets"
    dd.mkdir()
    gt = write_scene(tmp_path / "gt.json", THREE_BOXES)
    assert main(["eval", str(dd), str(gt)]) == 2
    assert "both" in capsys.readouterr().err


def test_eval_stray_category_warns_but_proceeds(tmp_path, capsys):
    gt = write_scene(tmp_path / "gt.json", THREE_BOXES[:1])
    dp = tmp_path / "dets.json"
    dp.write_text(
        json.dumps(
            [
                {"bbox": list(THREE_BOXES[0][0]), "category": 0, "score": 0.9},
                {"bbox": [0.0, 0.0, 10.0, 10.0], "category": 7, "score": 0.5},
            ]
        )
    )
    assert main(["eval", str(dp), str(gt)]) == 0
    captured = capsys.readouterr()
    assert "7" in captured.err
    assert json.loads(captured.out)["ap"] == 1.0


# ---------------------------------------------------------------------------
# bench


BENCH_SPEC = {
    "width": 128,
    "height": 128,
    "num_categories": 2,
    "n_singles": [1, 2],
    "seed": 5,
}


def write_bench_config(path, **overrides):
    doc = {
        "spec": BENCH_SPEC,
        "noise_grid": [{}],
        "strategies": ["centripetal"],
        "n_scenes": 2,
        "include_latency": False,
    }
    doc.update(overrides)
    path.write_text(json.dumps(doc))
    return path


def test_bench_writes_report(tmp_path):
    cfg = write_bench_config(tmp_path / "b.json")
    out = tmp_path / "report.json"
    assert main(["bench", str(cfg), "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["n_scenes"] == 2
    assert len(report["grid"]) == 1
    assert report["grid"][0]["cells"]["centripetal"]["metrics"]["ap"] == 1.0


def test_bench_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = write_bench_config(tmp_path / "b.json", scenes=9)
    assert main(["bench", str(cfg), "--out", str(tmp_path / "r.json")]) == 2
    assert "scenes" in capsys.readouterr().err


def test_bench_seed_flag_overrides_spec(tmp_path):
    cfg = write_bench_config(tmp_path / "b.json")
    out = tmp_path / "r.json"
    assert main(["bench", str(cfg), "--seed", "77", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["spec"]["seed"] == 77


def test_bench_strategy_flag_narrows_grid(tmp_path):
    cfg = write_bench_config(tmp_path / "b.json", strategies=["centripetal", "center_regression"])
    out = tmp_path / "r.json"
    assert main(["bench", str(cfg), "--strategy", "center_regression", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert set(report["grid"][0]["cells"]) == {"center_regression"}


def test_bench_latency_block_present_by_default(tmp_path):
    cfg = write_bench_config(tmp_path / "b.json", include_latency=True)
    out = tmp_path / "r.json"
    assert main(["bench", str(cfg), "--threads", "1", "--out", str(out)]) == 0
    cell = json.loads(out.read_text())["grid"][0]["cells"]["centripetal"]
    assert set(cell["latency_ms"]) == {"mean", "p50", "max"}


def test_bench_plot_emits_svg_per_row(tmp_path):
    cfg = write_bench_config(tmp_path / "b.json", noise_grid=[{}, {"sigma_pos": 0.2}])
    out = tmp_path / "plots" / "r.json"
    assert main(["bench", str(cfg), "--plot", "--out", str(out)]) == 0
    assert (tmp_path / "plots" / "bench_row_0.svg").is_file()
    assert (tmp_path / "plots" / "bench_row_1.svg").is_file()


# ---------------------------------------------------------------------------
# flag plumbing


def test_flag_beats_config_beats_default(tmp_path):
    scene = write_scene(tmp_path / "s.json", [], width=64, height=64)
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps({"stride": 8}))

    out_a = tmp_path / "a"
    main(["encode", str(scene), str(out_a)])
    assert json.loads((out_a / "manifest.json").read_text())["stride"] == 4

    out_b = tmp_path / "b"
    main(["encode", str(scene), str(out_b), "--config", str(cfgp)])
    assert json.loads((out_b / "manifest.json").read_text())["stride"] == 8

    out_c = tmp_path / "c"
    main(["encode", str(scene), str(out_c), "--config", str(cfgp), "--stride", "2"])
    assert json.loads((out_c / "manifest.json").read_text())["stride"] == 2


def test_config_unknown_key_exits_2(tmp_path, capsys):
    scene = write_scene(tmp_path / "s.json", [])
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text(json.dumps({"strid": 8}))
    assert main(["encode", str(scene), str(tmp_path / "o"), "--config", str(cfgp)]) == 2
    assert "strid" in capsys.readouterr().err


def test_config_must_be_object_exits_2(tmp_path, capsys):
    scene = write_scene(tmp_path / "s.json", [])
    cfgp = tmp_path / "cfg.json"
    cfgp.write_text("[1, 2]")
    assert main(["encode", str(scene), str(tmp_path / "o"), "--config", str(cfgp)]) == 2
    assert "object" in capsys.readouterr().err


def test_console_script_round_trip(tmp_path):
    scene = write_scene(tmp_path / "scene.json", THREE_BOXES)
    maps = tmp_path / "maps"
    run = lambda *a: subprocess.run(
        [*a], capture_output=True, text=True, check=False
    )
    enc = run("cornermatch", "encode", str(scene), str(maps))
    assert enc.returncode == 0, enc.stderr
    det = run("cornermatch", "detect", str(maps))
    assert det.returncode == 0, det.stderr
    dets = json.loads((maps / "detections.json").read_text())
    best = best_box_per_category(dets)
    for b, c in THREE_BOXES:
        assert iou(best[c], BBox(*b)) >= 0.98
