"""Operator surface: synthesize data, train, infer, evaluate.

Every flag has a config-file equivalent (one flat JSON object, unknown
keys are hard errors) and explicit flags always win. Exit codes: 0 ok,
1 usage/config, 2 data error, 3 numeric failure. POLYROOM_THREADS caps
scene-parallel loops.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

from . import dataio
from .errors import ConfigError, CoverageError, DataError, NumericError, PolyroomError
from .evaluation import EvalConfig, aggregate_reports, evaluate, write_report
from .extraction import (
    ExtractionConfig,
    export_json,
    export_svg,
    extract_floorplan,
    load_floorplan_json,
)
from .model import FloorplanModel, ModelConfig
from .queryinit import init_queries
from .representation import DEFAULT_MAX_ROOMS
from .training import TrainConfig, load_checkpoint, scene_seed, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

# config-file keys accepted per subcommand (flat JSON)
_CONFIG_KEYS = {
    "synth": {
        "out", "scenes", "seed", "rooms_min", "rooms_max", "size",
        "degrade_masks", "p_drop", "morph_min", "morph_max",
    },
    "train": {
        "data", "out", "epochs", "lr", "d", "layers", "seed", "batch_size",
        "resume", "init", "attention", "m", "n",
    },
    "infer": {
        "model", "scene", "out", "use_gt_masks", "t_pro", "t_ang", "dp_eps",
        "svg", "dump_queries", "seed",
    },
    "eval": {"pred", "gt", "iou_thresh", "corner_px", "angle_deg", "out"},
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _threads() -> int:
    raw = os.environ.get("POLYROOM_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"POLYROOM_THREADS must be an integer, got '{raw}'")


def _load_config_file(path, command: str) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold one flat JSON object")
    unknown = set(cfg) - _CONFIG_KEYS[command]
    if unknown:
        raise ConfigError(
            f"unknown config keys for '{command}': {', '.join(sorted(unknown))}"
        )
    return cfg


def _resolve(args: argparse.Namespace, explicit: set, command: str) -> dict:
    """Merge precedence: parser defaults < config file < explicit flags."""
    merged = dict(vars(args))
    file_cfg = _load_config_file(merged.pop("config", None), command)
    for key, value in file_cfg.items():
        if key not in explicit:
            merged[key] = value
    merged.pop("command", None)
    return merged


def _explicit_flags(argv) -> set:
    keys = set()
    for tok in argv:
        if tok.startswith("--"):
            keys.add(tok[2:].split("=")[0].replace("-", "_"))
    return keys


def _echo_config(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_config.json"), "w") as fh:
        json.dump(cfg, fh, indent=1, default=str)


# -- subcommands -----------------------------------------------------------------

def cmd_synth(cfg: dict) -> int:
    if cfg["rooms_max"] > DEFAULT_MAX_ROOMS:
        raise ConfigError(
            f"rooms_max {cfg['rooms_max']} exceeds the room capacity {DEFAULT_MAX_ROOMS}"
        )
    synth = dataio.SynthConfig(
        size=cfg["size"],
        rooms_min=cfg["rooms_min"],
        rooms_max=cfg["rooms_max"],
        degrade_masks=cfg["degrade_masks"],
        p_drop=cfg["p_drop"],
        morph_min=cfg["morph_min"],
        morph_max=cfg["morph_max"],
    )
    _echo_config(cfg, cfg["out"])
    ids = dataio.generate_dataset(
        cfg["out"], cfg["scenes"], cfg["seed"], synth, threads=_threads()
    )
    print(f"wrote {len(ids)} scenes to {cfg['out']}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    if not os.path.isdir(cfg["data"]):
        raise DataError(f"data directory not found: {cfg['data']}")
    records = dataio.load_dataset(cfg["data"])
    _echo_config(cfg, cfg["out"])
    start_step = 0
    optimizer = None
    if cfg.get("resume"):
        model, optimizer, start_step = load_checkpoint(cfg["resume"], lr=cfg["lr"])
        print(f"resumed from {cfg['resume']} at step {start_step}")
    else:
        mc = ModelConfig(
            m=cfg["m"], n=cfg["n"], d=cfg["d"], layers=cfg["layers"],
            attention=cfg["attention"],
        )
        model = FloorplanModel(mc, seed=cfg["seed"])
    tc = TrainConfig(
        lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
        seed=cfg["seed"], init_mode=cfg["init"],
    )

    def progress(comps):
        print(
            f"step {comps['step']:>6}  total {comps['total']:.4f}  "
            f"cls {comps['cls']:.4f}  coord {comps['coord']:.4f}  "
            f"ras {comps['ras']:.4f}  ang {comps['ang']:.4f}"
        )

    _, _, step = train(
        records, model, tc, out_dir=cfg["out"],
        start_step=start_step, optimizer=optimizer, progress=progress,
    )
    print(f"finished at step {step}; checkpoint in {cfg['out']}")
    return EXIT_OK


def _scene_dirs(root: str) -> list:
    if os.path.exists(os.path.join(root, "scene.json")):
        return [root]
    index = os.path.join(root, "index.json")
    if os.path.exists(index):
        with open(index) as fh:
            ids = json.load(fh)["scenes"]
        return [os.path.join(root, sid) for sid in ids]
    if not os.path.isdir(root):
        raise DataError(f"scene directory not found: {root}")
    subs = sorted(
        os.path.join(root, d) for d in os.listdir(root)
        if os.path.exists(os.path.join(root, d, "scene.json"))
    )
    if not subs:
        raise DataError(f"no scenes under {root}")
    return subs


def cmd_infer(cfg: dict) -> int:
    model, _, _ = load_checkpoint(cfg["model"])
    mc = model.cfg
    ex_cfg = ExtractionConfig(
        t_pro=cfg["t_pro"], t_ang=cfg["t_ang"], dp_eps=cfg["dp_eps"]
    )
    os.makedirs(cfg["out"], exist_ok=True)
    _echo_config(cfg, cfg["out"])
    for scene_dir in _scene_dirs(cfg["scene"]):
        rec = dataio.load_scene(scene_dir)
        if cfg["use_gt_masks"]:
            masks = dataio.InstanceMasks(
                [
                    dataio.rasterize_polygon(r, int(rec.gt.width), int(rec.gt.height))
                    for r in rec.gt.rooms
                ]
            )
        else:
            if rec.masks is None:
                raise DataError(f"scene {rec.id} has no masks; pass --use-gt-masks")
            masks = rec.masks
        q0 = init_queries(masks, mc.m, mc.n, scene_seed(cfg["seed"], rec.id))
        out = model.forward(rec.density.grid, q0)
        fp = extract_floorplan(out, q0, ex_cfg, rec.gt.width, rec.gt.height)
        export_json(fp, os.path.join(cfg["out"], f"{rec.id}.floorplan.json"), rec.id)
        if cfg["svg"]:
            export_svg(fp, os.path.join(cfg["out"], f"{rec.id}.svg"), rec.density.grid)
        if cfg["dump_queries"]:
            snaps = [q.tolist() for q in out.queries]
            with open(os.path.join(cfg["out"], f"{rec.id}.queries.json"), "w") as fh:
                json.dump({"id": rec.id, "layers": snaps}, fh)
        print(f"{rec.id}: {len(fp.rooms)} rooms ({len(fp.dropped)} dropped)")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    gt_dirs = {os.path.basename(d): d for d in _scene_dirs(cfg["gt"])}
    preds = {}
    if not os.path.isdir(cfg["pred"]):
        raise DataError(f"prediction directory not found: {cfg['pred']}")
    for name in os.listdir(cfg["pred"]):
        if name.endswith(".floorplan.json"):
            sid, rooms, _, _ = load_floorplan_json(os.path.join(cfg["pred"], name))
            preds[sid] = rooms
    if not preds:
        raise DataError(f"no *.floorplan.json under {cfg['pred']}")
    gt_ids = set(gt_dirs)
    if not (gt_ids & set(preds)):
        raise CoverageError("prediction and GT scene ids are disjoint")
    missing = sorted(gt_ids - set(preds))
    if missing:
        raise CoverageError(
            f"predictions missing for {len(missing)} scenes, e.g. {missing[:5]}"
        )
    ec = EvalConfig(
        iou_thresh=cfg["iou_thresh"], corner_px=cfg["corner_px"],
        angle_deg=cfg["angle_deg"],
    )

    def score(sid):
        rec = dataio.load_scene(gt_dirs[sid])
        return evaluate(preds[sid], rec.gt, ec)

    ordered = sorted(gt_ids)
    threads = _threads()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(score, ordered))
    else:
        reports = [score(sid) for sid in ordered]
    total = aggregate_reports(reports)
    print(total.to_text())
    out_path = cfg.get("out") or os.path.join(cfg["pred"], "metrics.json")
    write_report(total, out_path)
    print(f"report written to {out_path}")
    return EXIT_OK


# -- argument wiring ---------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="polyroom", description="Vectorized floorplan reconstruction")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate synthetic scenes")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--rooms-min", type=int, default=1)
    sp.add_argument("--rooms-max", type=int, default=4)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--degrade-masks", action="store_true")
    sp.add_argument("--p-drop", type=float, default=0.05)
    sp.add_argument("--morph-min", type=int, default=1)
    sp.add_argument("--morph-max", type=int, default=3)

    tp = sub.add_parser("train", help="train a model on a scene directory")
    tp.add_argument("--config")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--epochs", type=int, default=10)
    tp.add_argument("--lr", type=float, default=2e-4)
    tp.add_argument("--d", type=int, default=64)
    tp.add_argument("--layers", type=int, default=6)
    tp.add_argument("--m", type=int, default=20)
    tp.add_argument("--n", type=int, default=40)
    tp.add_argument("--seed", type=int, default=0)
    tp.add_argument("--batch-size", type=int, default=1)
    tp.add_argument("--resume")
    tp.add_argument("--init", choices=["masks", "random"], default="masks")
    tp.add_argument("--attention", choices=["room_aware", "vanilla"], default="room_aware")

    ip = sub.add_parser("infer", help="reconstruct floorplans with a checkpoint")
    ip.add_argument("--config")
    ip.add_argument("--model", required=True)
    ip.add_argument("--scene", required=True)
    ip.add_argument("--out", required=True)
    ip.add_argument("--use-gt-masks", action="store_true")
    ip.add_argument("--t-pro", type=float, default=0.01)
    ip.add_argument("--t-ang", type=float, default=math.sqrt(3.0) / 2.0)
    ip.add_argument("--dp-eps", type=float, default=4.0)
    ip.add_argument("--svg", action="store_true")
    ip.add_argument("--dump-queries", action="store_true")
    ip.add_argument("--seed", type=int, default=0)

    ep = sub.add_parser("eval", help="score predictions against GT scenes")
    ep.add_argument("--config")
    ep.add_argument("--pred", required=True)
    ep.add_argument("--gt", required=True)
    ep.add_argument("--iou-thresh", type=float, default=0.5)
    ep.add_argument("--corner-px", type=float, default=10.0)
    ep.add_argument("--angle-deg", type=float, default=5.0)
    ep.add_argument("--out")

    return p


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _resolve(args, _explicit_flags(argv), args.command)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PolyroomError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
