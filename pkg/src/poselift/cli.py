"""Command-line pipeline: synth -> train-flow -> train-lifters ->
train-occlusion -> eval/render.

Every training command requires a seed (--seed or the LINKS_SEED env var)
and is bit-reproducible: identical config + seed gives identical
checkpoints and trace CSVs. Exit codes: 0 success, 2 config error,
3 data error, 4 numerical divergence.
"""

import argparse
import csv
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import data as data_mod
from . import nn, occlusion
from .errors import ConfigError, DataError, DivergenceError, PoseliftError
from .flow import DEFAULT_SIGMA, SUBNET_WIDTH, FlowModel, train_flow
from .geometry import CAMERA_DISTANCE, METRIC_NAMES, _optimal_l1_scale, \
    compute_metrics, lift_batch, mpjpe_batch, n_mpjpe_batch, pa_mpjpe_batch
from .lifter import (
    CANDIDATE_NAMES,
    DEFAULT_WIDTH,
    LifterNet,
    flatten_nonroot,
    init_lifters,
    lift_candidates,
    segment_flat_columns,
    train_lifters,
)
from .occlusion import SCENARIO_NAMES, OcclusionNet, OcclusionScenario, train_occlusion
from .render import render_pose_svg
from .topology import SEGMENT_NAMES, SkeletonTopology

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

FLOW_SEGMENTS = ("full",) + SEGMENT_NAMES
DEFAULT_METRICS = "pa-mpjpe,n-mpjpe"


# ---------------------------------------------------------------------------
# shared helpers


def _require_seed(args):
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get("LINKS_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"LINKS_SEED must be an integer, got {env!r}")
    raise ConfigError("training commands need --seed (or the LINKS_SEED env var)")


def _derive(seed, *key):
    return np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))


def _require_file(path, what):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")
    return path


def _load_records(path, n_joints=17):
    result = data_mod.load_dataset(_require_file(path, "dataset"), n_joints)
    for line_no, msg in result.errors:
        print(f"warning: {path}:{line_no}: {msg}", file=sys.stderr)
    if not result.records:
        raise DataError(f"no valid records in {path}")
    return result.records


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _save_model(path, kind, model, seed_note):
    nn.save_checkpoint(path, kind, model.architecture(), model.params(),
                       rng_seed=seed_note)


def load_flow(path):
    payload = nn.load_checkpoint(_require_file(path, "flow checkpoint"), "flow")
    flow = FlowModel.from_architecture(payload["architecture"])
    nn.assign_params(flow.params(), payload["params"])
    return flow


def load_lifter(path):
    payload = nn.load_checkpoint(_require_file(path, "lifter checkpoint"), "lifter")
    model = LifterNet.from_architecture(payload["architecture"])
    nn.assign_params(model.params(), payload["params"])
    return model


def load_occlusion_net(path):
    payload = nn.load_checkpoint(_require_file(path, "occlusion checkpoint"), "occlusion")
    net = OcclusionNet.from_architecture(payload["architecture"])
    nn.assign_params(net.params(), payload["params"])
    return net


def load_lifter_dir(path):
    return {name: load_lifter(os.path.join(path, f"lifter-{name}.json"))
            for name in SEGMENT_NAMES}


def load_flow_dir(path, segments=FLOW_SEGMENTS):
    return {name: load_flow(os.path.join(path, f"flow-{name}.json"))
            for name in segments}


def _bone_means(args, records, topology):
    if getattr(args, "bone_stats", None):
        return data_mod.BoneStats.load(args.bone_stats, topology).values
    with_3d = [r for r in records if r.joints_3d is not None]
    if not with_3d:
        raise ConfigError("dataset has no 3D ground truth; pass --bone-stats FILE")
    return data_mod.compute_bone_stats(with_3d, topology).values


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args):
    seed = _require_seed(args)
    config = (data_mod.GeneratorConfig.from_file(_require_file(args.config, "config"))
              if args.config else data_mod.GeneratorConfig())
    records = data_mod.generate_synthetic(args.count, seed, config)
    data_mod.save_dataset(records, args.out)
    print(f"wrote {len(records)} synthetic poses to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-flow


def _train_one_flow(segment, records2d, out_dir, seed, epochs, batch, lr, sigma,
                    width, topology, full_ckpt):
    role = FLOW_SEGMENTS.index(segment)
    init_rng = np.random.default_rng(_derive(seed, role, 0))
    train_ss = _derive(seed, role, 1)
    full_data = flatten_nonroot(records2d, topology)
    if segment == "full":
        seg_data, cols, full_flow = full_data, None, None
        flow = FlowModel.init(init_rng, full_data.shape[1], segment="full", width=width)
        trace = train_flow(flow, seg_data, epochs=epochs, batch_size=batch,
                           seed=train_ss, base_lr=lr, sigma=sigma)
    else:
        cols = segment_flat_columns(topology, segment)
        seg_data = np.ascontiguousarray(full_data[:, cols])
        full_flow = load_flow(full_ckpt)
        flow = FlowModel.init(init_rng, seg_data.shape[1], segment=segment, width=width)
        trace = train_flow(flow, seg_data, full_data=full_data, full_flow=full_flow,
                           segment_cols=cols, epochs=epochs, batch_size=batch,
                           seed=train_ss, base_lr=lr, sigma=sigma)
    ckpt = os.path.join(out_dir, f"flow-{segment}.json")
    _save_model(ckpt, "flow", flow, seed)
    _write_csv(os.path.join(out_dir, f"flow-{segment}-trace.csv"),
               ["epoch", "nll"], trace)
    return segment, trace[-1][1] if trace else float("nan")


def _flow_worker(payload):
    return _train_one_flow(*payload)


def cmd_train_flow(args):
    seed = _require_seed(args)
    topology = SkeletonTopology.default()
    records = _load_records(args.data)
    y2d = data_mod.stack_2d(records)
    os.makedirs(args.out, exist_ok=True)

    if args.segment == "all":
        segments = list(FLOW_SEGMENTS)
    else:
        segments = [args.segment]
    if args.full_flow:
        full_ckpt = _require_file(args.full_flow, "full-pose flow checkpoint")
    else:
        full_ckpt = os.path.join(args.out, "flow-full.json")
        if "full" not in segments and any(s != "full" for s in segments):
            _require_file(full_ckpt,
                          "full-pose flow checkpoint (train --segment full first)")

    if "full" in segments:
        _train_one_flow("full", y2d, args.out, seed, args.epochs, args.batch,
                        args.lr, args.sigma, args.width, topology, None)
        print(f"trained flow-full -> {args.out}")
        segments = [s for s in segments if s != "full"]
        full_ckpt = os.path.join(args.out, "flow-full.json")

    payloads = [(s, y2d, args.out, seed, args.epochs, args.batch, args.lr,
                 args.sigma, args.width, topology, full_ckpt) for s in segments]
    if args.parallel > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for segment, _ in pool.map(_flow_worker, payloads):
                print(f"trained flow-{segment} -> {args.out}")
    else:
        for payload in payloads:
            segment, _ = _train_one_flow(*payload)
            print(f"trained flow-{segment} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-lifters


def _resolve_lifter_config(args):
    """Explicit flags win; then the optional JSON config file; then defaults."""
    import json as json_mod

    cfg = {}
    if args.config:
        with open(_require_file(args.config, "training config")) as fh:
            cfg = json_mod.load(fh)
        unknown = set(cfg) - {"epochs", "batch", "lr", "sigma", "seed",
                              "candidate_weights", "width"}
        if unknown:
            raise ConfigError(f"unknown training-config keys: {sorted(unknown)}")
    defaults = {"epochs": 100, "batch": 256, "lr": nn.BASE_LR, "sigma": DEFAULT_SIGMA,
                "width": DEFAULT_WIDTH, "seed": None, "candidate_weights": None}
    out = {}
    for key in defaults:
        flag = getattr(args, key, None)
        out[key] = flag if flag is not None else cfg.get(key, defaults[key])
    return out


def cmd_train_lifters(args):
    cfg = _resolve_lifter_config(args)
    args.seed = cfg["seed"]
    seed = _require_seed(args)
    topology = SkeletonTopology.default()
    records = _load_records(args.data)
    y2d = data_mod.stack_2d(records)
    flows = load_flow_dir(args.flows)
    bone_means = _bone_means(args, records, topology)
    os.makedirs(args.out, exist_ok=True)

    lifters = init_lifters(_derive(seed, 100), topology, width=cfg["width"])
    seg_flows = {name: flows[name] for name in SEGMENT_NAMES}
    try:
        trace = train_lifters(lifters, y2d, seg_flows, flows["full"], bone_means,
                              topology, epochs=cfg["epochs"], batch_size=cfg["batch"],
                              seed=_derive(seed, 101), base_lr=cfg["lr"],
                              sigma=cfg["sigma"],
                              candidate_weights=cfg["candidate_weights"])
    except DivergenceError as err:
        if err.last_good:
            for name in SEGMENT_NAMES:
                nn.assign_params(lifters[name].params(), err.last_good[name])
                _save_model(os.path.join(args.out, f"lifter-{name}.last-good.json"),
                            "lifter", lifters[name], seed)
            print("divergence: last good checkpoints saved", file=sys.stderr)
        raise
    for name in SEGMENT_NAMES:
        _save_model(os.path.join(args.out, f"lifter-{name}.json"), "lifter",
                    lifters[name], seed)
    _write_csv(os.path.join(args.out, "lifters-trace.csv"),
               ["epoch", "l_nf", "l_2d", "l_3d", "l_def", "l_b", "total", "skipped"],
               trace)
    print(f"trained 4 lifters -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train-occlusion


def _train_one_occlusion(scenario_name, space, lifter_dir, records2d, out_dir, seed,
                         epochs, batch, lr, width, topology):
    lifters = load_lifter_dir(lifter_dir)
    scenario = OcclusionScenario.named(scenario_name, topology)
    scen_idx = SCENARIO_NAMES.index(scenario_name)
    space_idx = 0 if space == "3d" else 1
    init_rng = np.random.default_rng(_derive(seed, 200, scen_idx, space_idx, 0))
    net = OcclusionNet.init(init_rng, scenario, space, topology, width=width)
    trace = train_occlusion(net, lifters, records2d, topology, epochs=epochs,
                            batch_size=batch, seed=_derive(seed, 200, scen_idx,
                                                           space_idx, 1),
                            base_lr=lr)
    stem = f"occ-{space}-{scenario_name}"
    _save_model(os.path.join(out_dir, f"{stem}.json"), "occlusion", net, seed)
    _write_csv(os.path.join(out_dir, f"{stem}-trace.csv"), ["epoch", "mse"], trace)
    return stem


def _occlusion_worker(payload):
    return _train_one_occlusion(*payload)


def cmd_train_occlusion(args):
    seed = _require_seed(args)
    topology = SkeletonTopology.default()
    records = _load_records(args.data)
    y2d = data_mod.stack_2d(records)
    _require_file(os.path.join(args.lifters, "lifter-legs.json"),
                  "lifter checkpoints (train-lifters first)")
    os.makedirs(args.out, exist_ok=True)
    names = list(SCENARIO_NAMES) if args.scenario == "all" else [args.scenario]
    payloads = [(name, args.space, args.lifters, y2d, args.out, seed, args.epochs,
                 args.batch, args.lr, args.width, topology) for name in names]
    if args.parallel > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for stem in pool.map(_occlusion_worker, payloads):
                print(f"trained {stem} -> {args.out}")
    else:
        for payload in payloads:
            stem = _train_one_occlusion(*payload)
            print(f"trained {stem} -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _center(pts, root=0):
    return pts - pts[:, root:root + 1, :]


def _metric_values(pred_c, gt_c, metric):
    """Per-pose metric values; threshold metrics are scale-aligned (N-PCK style)."""
    if metric == "mpjpe":
        return mpjpe_batch(pred_c, gt_c)
    if metric == "pa-mpjpe":
        return pa_mpjpe_batch(pred_c, gt_c)
    if metric == "n-mpjpe":
        return n_mpjpe_batch(pred_c, gt_c)
    if metric in ("pck150", "auc"):
        out = np.empty(pred_c.shape[0])
        for i in range(pred_c.shape[0]):
            s = _optimal_l1_scale(pred_c[i], gt_c[i])
            out[i] = compute_metrics(s * pred_c[i], gt_c[i], metric)
        return out
    raise ConfigError(f"unknown metric {metric!r}; expected one of {METRIC_NAMES}")


def _oracle_predictions(records, topology, c):
    depths = np.stack([data_mod.true_depth_offsets(r, c) for r in records])
    y2d = data_mod.stack_2d(records)
    pts, _ = lift_batch(y2d, depths, c)
    return pts


def cmd_eval(args):
    topology = SkeletonTopology.default()
    records = _load_records(args.data)
    if any(r.joints_3d is None for r in records):
        raise DataError("evaluation refused: dataset lacks 3D ground truth")
    y2d = data_mod.stack_2d(records)
    gt = data_mod.stack_3d(records)
    gt_c = _center(gt, topology.root_index)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in METRIC_NAMES:
            raise ConfigError(f"unknown metric {m!r}; expected one of {METRIC_NAMES}")
    os.makedirs(args.out, exist_ok=True)

    preds = {}
    if args.oracle:
        preds["oracle"] = _oracle_predictions(records, topology, CAMERA_DISTANCE)
        lifters = load_lifter_dir(args.lifters) if args.lifters else None
    else:
        if not args.lifters:
            raise ConfigError("eval needs --lifters (or --oracle)")
        lifters = load_lifter_dir(args.lifters)
    if lifters is not None:
        cands = lift_candidates(lifters, y2d, topology, CAMERA_DISTANCE)
        wanted = list(CANDIDATE_NAMES) if args.candidate == "all" else [args.candidate]
        for name in wanted:
            preds[name] = cands[name][0]

    rows = []
    for cand_name, pred in preds.items():
        pred_c = _center(pred, topology.root_index)
        for metric in metrics:
            values = _metric_values(pred_c, gt_c, metric)
            rows.append(["no-occlusion", cand_name, metric,
                         float(values.mean()), len(records)])
    _write_csv(os.path.join(args.out, "metrics.csv"),
               ["context", "candidate", "metric", "value", "sample_count"], rows)
    for row in rows:
        print(f"{row[0]:>14s}  {row[1]:>14s}  {row[2]:>8s}  {row[3]:.3f}")

    if args.occlusion_3d or args.occlusion_2d:
        if lifters is None:
            raise ConfigError("occlusion evaluation needs --lifters")
        names = (list(SCENARIO_NAMES) if args.scenarios == "all"
                 else [s.strip() for s in args.scenarios.split(",") if s.strip()])
        scenarios = [OcclusionScenario.named(n, topology) for n in names]
        nets3d = nets2d = None
        if args.occlusion_3d:
            nets3d = {}
            for s in scenarios:
                path = os.path.join(args.occlusion_3d, f"occ-3d-{s.name}.json")
                if os.path.isfile(path):
                    nets3d[s.name] = load_occlusion_net(path)
        if args.occlusion_2d:
            nets2d = {}
            for s in scenarios:
                path = os.path.join(args.occlusion_2d, f"occ-2d-{s.name}.json")
                if os.path.isfile(path):
                    nets2d[s.name] = load_occlusion_net(path)
        occ_rows, warnings = occlusion.evaluate_occlusion(
            scenarios, nets3d, nets2d, lifters, y2d, gt, topology)
        for w in warnings:
            print(f"warning: {w}", file=sys.stderr)
        _write_csv(os.path.join(args.out, "occlusion.csv"),
                   ["scenario", "space", "pa_mpjpe", "n_mpjpe", "sample_count"],
                   [[r["scenario"], r["space"], r["pa_mpjpe"], r["n_mpjpe"],
                     r["sample_count"]] for r in occ_rows])
        for r in occ_rows:
            print(f"{r['scenario']:>18s}  O_{r['space']}  pa={r['pa_mpjpe']:.3f}  "
                  f"n={r['n_mpjpe']:.3f}")

    if args.render > 0:
        pred_for_render = next(iter(preds.values()))
        for i in range(min(args.render, len(records))):
            panels = [("predicted 3d", _center(pred_for_render[i:i + 1])[0]),
                      ("ground truth 3d", gt_c[i])]
            render_pose_svg(os.path.join(args.out, f"render-{records[i].id}.svg"),
                            topology, pose_2d=records[i].joints_2d, poses_3d=panels)
    return EXIT_OK


# ---------------------------------------------------------------------------
# render


def cmd_render(args):
    topology = SkeletonTopology.default()
    records = _load_records(args.data)
    os.makedirs(args.out, exist_ok=True)
    count = min(args.count, len(records))
    for rec in records[:count]:
        panels = []
        if rec.joints_3d is not None:
            panels.append(("3d (mm)", rec.joints_3d))
        render_pose_svg(os.path.join(args.out, f"{rec.id}.svg"), topology,
                        pose_2d=rec.joints_2d, poses_3d=panels)
    print(f"rendered {count} poses to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="poselift",
        description="Unsupervised segment-wise 2D->3D pose lifting with "
                    "lift-then-fill occlusion handling.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common_train(p):
        p.add_argument("--seed", type=int, default=None,
                       help="RNG seed (falls back to LINKS_SEED)")
        p.add_argument("--batch", type=int, default=256)
        p.add_argument("--lr", type=float, default=nn.BASE_LR)

    p = sub.add_parser("synth", help="generate a synthetic pose dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="generator config JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-flow", help="train normalizing flows")
    p.add_argument("--data", required=True)
    p.add_argument("--segment", choices=FLOW_SEGMENTS + ("all",), default="all")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--sigma", type=float, default=DEFAULT_SIGMA)
    p.add_argument("--width", type=int, default=SUBNET_WIDTH)
    p.add_argument("--full-flow", default=None,
                   help="existing full-pose flow checkpoint (segment flows)")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True)
    add_common_train(p)
    p.set_defaults(func=cmd_train_flow)

    p = sub.add_parser("train-lifters", help="train the four segment lifters")
    p.add_argument("--data", required=True)
    p.add_argument("--flows", required=True, help="directory with the 5 flow checkpoints")
    p.add_argument("--bone-stats", default=None,
                   help="bone statistics JSON (default: compute from the data's 3D)")
    p.add_argument("--config", default=None,
                   help="training config JSON (epochs, batch, lr, sigma, seed, "
                        "width, candidate_weights); explicit flags win")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (falls back to LINKS_SEED)")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_lifters)

    p = sub.add_parser("train-occlusion", help="train occlusion fill networks")
    p.add_argument("--data", required=True)
    p.add_argument("--lifters", required=True)
    p.add_argument("--scenario", choices=SCENARIO_NAMES + ("all",), default="all")
    p.add_argument("--space", choices=("3d", "2d"), default="3d")
    p.add_argument("--epochs", type=int, default=occlusion.OCCLUSION_EPOCHS)
    p.add_argument("--width", type=int, default=occlusion.NET_WIDTH)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--out", required=True)
    add_common_train(p)
    p.set_defaults(func=cmd_train_occlusion)

    p = sub.add_parser("eval", help="evaluate lifters (and occlusion paths)")
    p.add_argument("--data", required=True, help="dataset with 3D ground truth")
    p.add_argument("--lifters", default=None)
    p.add_argument("--candidate", choices=CANDIDATE_NAMES + ("all",),
                   default="legs-torso")
    p.add_argument("--metrics", default=DEFAULT_METRICS,
                   help=f"comma list from {METRIC_NAMES}; threshold metrics are "
                        "scale-aligned before thresholding")
    p.add_argument("--oracle", action="store_true",
                   help="use ground-truth depth offsets instead of lifters")
    p.add_argument("--occlusion-3d", default=None)
    p.add_argument("--occlusion-2d", default=None)
    p.add_argument("--scenarios", default="all")
    p.add_argument("--render", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render poses as SVG figures")
    p.add_argument("--data", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as err:
        print(f"numerical divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except PoseliftError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
