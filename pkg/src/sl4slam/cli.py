"""Command line front door: simulate, run, eval and verify-pair."""

from __future__ import annotations

import argparse

from .dataset import DiskSubmapSource
from .evaluation import ate_rmse, parse_tum
from .pipeline import INTER_EDGE_MODES, SlamConfig, run_slam
from .retrieval import TokenSet, verify_pair
from .simulator import NOISE_PROFILES, PRESETS, generate_dataset
from .vgsb import read_blob


def cmd_simulate(args) -> int:
    manifest = generate_dataset(
        args.preset, NOISE_PROFILES[args.noise], args.seed, args.out,
        submaps=args.submaps, submap_size=args.submap_size)
    print("wrote %s: %d submaps, %d frames, %d loop pairs, diameter %.3f m"
          % (args.out, manifest["submap_count"], manifest["frame_count"],
             len(manifest["loop_pairs"]), manifest["diameter"]))
    return 0


def cmd_run(args) -> int:
    config = SlamConfig(
        submap_size=args.submap_size,
        retrieval_threshold=args.retrieval_threshold,
        match_threshold=args.match_threshold,
        conf_percentile=args.conf_percentile,
        min_disparity_px=args.min_disparity,
        inter_edge_mode=args.inter_edge_mode,
        enable_loop_closures=not args.no_loop_closures,
        retrieval_stride=args.retrieval_stride,
    )
    source = DiskSubmapSource(args.dataset)
    rec, report = run_slam(source, config, out_dir=args.out)
    closures = report["closures"]
    print("frames %d  points %d  variables %d"
          % (report["frames"], report["points"], report["variables"]))
    print("closures: found %d  accepted %d  rejected %d"
          % (closures["found"], closures["accepted"], closures["rejected"]))
    if report["final_cost"] is not None:
        print("final cost %.6e" % report["final_cost"])
    for warning in report["warnings"]:
        print("warning: %s" % warning)
    print("wrote trajectory.tum, map.ply, report.json to %s" % args.out)
    return 0


def cmd_eval(args) -> int:
    result = ate_rmse(parse_tum(args.est), parse_tum(args.gt), mode=args.mode)
    print("pairs %d  scale %.6f" % (result.pairs, result.scale))
    print("rmse %.6f  mean %.6f  median %.6f  max %.6f"
          % (result.rmse, result.mean, result.median, result.max))
    return 0


def cmd_verify_pair(args) -> int:
    query = TokenSet(read_blob(args.query_qtok), read_blob(args.query_ktok))
    retrieved = TokenSet(read_blob(args.ref_qtok), read_blob(args.ref_ktok))
    alpha, accepted = verify_pair(query, retrieved,
                                  threshold=args.match_threshold)
    print("alpha %.4f  %s (threshold %.2f)"
          % (alpha, "accept" if accepted else "reject", args.match_threshold))
    return 0 if accepted else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sl4slam",
        description="Submap alignment over 15-DoF homographies with "
                    "attention-verified loop closures.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate",
                         help="render a synthetic dataset directory")
    sim.add_argument("--preset", choices=sorted(PRESETS), required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--noise", choices=sorted(NOISE_PROFILES),
                     default="inmodel")
    sim.add_argument("--out", required=True)
    sim.add_argument("--submaps", type=int, default=None,
                     help="override the preset submap count")
    sim.add_argument("--submap-size", type=int, default=None,
                     help="override the preset frames per submap")
    sim.set_defaults(func=cmd_simulate)

    run = sub.add_parser("run", help="align a dataset directory")
    run.add_argument("--dataset", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--submap-size", type=int, default=16)
    run.add_argument("--retrieval-threshold", type=float, default=0.95)
    run.add_argument("--match-threshold", type=float, default=0.85)
    run.add_argument("--conf-percentile", type=float, default=0.25)
    run.add_argument("--min-disparity", type=float, default=50.0)
    run.add_argument("--inter-edge-mode", choices=INTER_EDGE_MODES,
                     default="full")
    run.add_argument("--no-loop-closures", action="store_true")
    run.add_argument("--retrieval-stride", type=int, default=1)
    run.set_defaults(func=cmd_run)

    ev = sub.add_parser("eval", help="trajectory error against ground truth")
    ev.add_argument("--est", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--mode", choices=("sim3", "se3"), default="sim3")
    ev.set_defaults(func=cmd_eval)

    vp = sub.add_parser(
        "verify-pair",
        help="match score between two frames' token files; exit code 0 on "
             "accept, 1 on reject")
    vp.add_argument("query_qtok", help="query frame qtok_*.vgsb")
    vp.add_argument("query_ktok", help="query frame ktok_*.vgsb")
    vp.add_argument("ref_qtok", help="retrieved frame qtok_*.vgsb")
    vp.add_argument("ref_ktok", help="retrieved frame ktok_*.vgsb")
    vp.add_argument("--match-threshold", type=float, default=0.85)
    vp.set_defaults(func=cmd_verify_pair)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
