#!/usr/bin/env python3
"""
Tube Linker CLI
===============
Command-line interface for linking, scoring and evaluating action tubes.

Usage:
    python tubelink.py <command> [options]

Commands:
    link        Link proposals into action tubes
    score       Fill proposal scores from features and a linear model
    eval        Evaluate tubes against ground truth
    curves      Write the four threshold-sweep curves as CSV
    gen         Generate a synthetic scenario
    propose     Build power-set proposals from binary segmentations
    prune       Drop low-actionness proposals (and optionally apply NMS)
    areas       Compute per-class average areas from ground truth
    config      View and modify configuration

Examples:
    python tubelink.py gen scenarios/three_tubes.json -o ./out
    python tubelink.py link out/synthetic_proposals.jsonl -o out/tubes.jsonl
    python tubelink.py eval out/tubes.jsonl out/synthetic_gt.jsonl -o out/report.json
    python tubelink.py link proposals.jsonl -o tubes.jsonl --alpha 5 --max-paths auto
    python tubelink.py config --set class_areas.handshaking=2200
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from src.config_manager import ConfigManager
from src.core_model import InvariantError, ValidationError
from src.evaluation import (
    AXES,
    check_classes,
    confusion_matrix,
    class_average_areas,
    evaluation_report,
    match_tubes,
    metric_curves,
    write_confusion_csv,
    write_curves_csv,
    write_report,
)
from src.proposal_ingest import (
    load_flow_maps,
    load_ground_truth,
    load_segmentations,
    nms_video,
    prune_video,
    proposals_from_segmentations,
    read_tubes,
    read_videos,
    save_ground_truth,
    save_proposals,
    write_tubes,
    write_videos,
)
from src.scoring import load_features, load_model, score_video
from src.synthetic import generate_scenario, load_scenario
from src.tube_builder import TubeLinker

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INVARIANT = 3

# flag dest -> config key
OVERRIDES = {
    "lam": "lambda",
    "alpha": "alpha",
    "delta": "delta",
    "tau": "tau",
    "max_paths": "max_paths",
    "nms_iou": "nms_iou",
    "actionness_threshold": "actionness_threshold",
    "eta": "eta",
    "grid_step": "grid_step",
    "threads": "threads",
    "background_score": "background_score",
    "top_k": "top_k_score",
    "t_sr": "t_sr",
    "t_tr": "t_tr",
    "t_sp": "t_sp",
    "t_tp": "t_tp",
}

NULL_WORDS = ("auto", "none", "null")


class UsageError(Exception):
    """Bad command line."""


class TubeLinkArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class _Unset:
    """Marks a nullable flag explicitly set to null on the command line."""


UNSET = _Unset()


def _int_or_null(value: str):
    if value.lower() in NULL_WORDS:
        return UNSET
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer or 'auto', got '{value}'")


def _float_or_null(value: str):
    if value.lower() in NULL_WORDS:
        return UNSET
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'none', got '{value}'")


@dataclass
class CommandResult:
    """Result of one subcommand."""
    success: bool
    exit_code: int = EXIT_OK
    output_paths: List[str] = field(default_factory=list)
    error: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)


def _banner(title: str) -> None:
    print(f"\n{'='*50}")
    print(title)
    print(f"{'='*50}")


# =============================================================================
# Commands
# =============================================================================

def cmd_link(args, config: ConfigManager) -> CommandResult:
    """Link every video of a proposals file into tubes."""
    videos = read_videos(args.proposals)
    linker = TubeLinker(config.linker_config)
    per_video = linker.link_videos(videos, threads=config.threads)
    tubes = [tube for video_tubes in per_video for tube in video_tubes]
    write_tubes(tubes, args.output)

    counts: Dict[str, int] = {}
    for tube in tubes:
        counts[tube.class_name] = counts.get(tube.class_name, 0) + 1

    _banner("LINK")
    print(f"Videos: {len(videos)} | Tubes: {len(tubes)}")
    for name in sorted(counts):
        print(f"  {name:<25} {counts[name]}")
    print(f"Saved: {args.output}")
    return CommandResult(True, output_paths=[args.output], metadata={"tubes": len(tubes), "per_class": counts})


def cmd_score(args, config: ConfigManager) -> CommandResult:
    """Score proposals with a linear model over fused features."""
    settings = config.scoring_settings
    videos = read_videos(args.proposals)
    features = load_features(args.features)
    model = load_model(args.model)
    scored = [score_video(v, features, model, settings.w_appearance, settings.w_flow) for v in videos]
    write_videos(scored, args.output)

    _banner("SCORE")
    print(f"Videos: {len(scored)} | Proposals: {sum(v.proposal_count for v in scored)}")
    print(f"Classes: {', '.join(model.class_names)}")
    print(f"Saved: {args.output}")
    return CommandResult(True, output_paths=[args.output])


def _load_eval_inputs(args, config: ConfigManager):
    class_names = config.class_names or None
    gts = load_ground_truth(args.ground_truth, class_names)
    dets = read_tubes(args.tubes, class_names)
    if class_names:
        check_classes(dets, gts, class_names)
    return dets, gts


def cmd_eval(args, config: ConfigManager) -> CommandResult:
    """Evaluate detections against ground truth."""
    th = config.eval_thresholds
    dets, gts = _load_eval_inputs(args, config)
    report = evaluation_report(dets, gts, th, no_localisation=args.no_localisation)
    outputs = []

    if args.output:
        write_report(report, args.output)
        outputs.append(args.output)

    matching = None
    if args.curves or args.confusion:
        matching = match_tubes(dets, gts)
    if args.curves:
        rows = [row for axis in AXES for row in metric_curves(dets, gts, axis, th.eta, th.grid_step, matching)]
        write_curves_csv(rows, args.curves)
        outputs.append(args.curves)
    if args.confusion:
        names = config.class_names or sorted({g.class_name for g in gts} | {d.class_name for d in dets})
        write_confusion_csv(confusion_matrix(dets, gts, names, matching), names, args.confusion)
        outputs.append(args.confusion)

    detection = report["detection"]
    integrated = report["integrated"]
    _banner("EVALUATION")
    print(f"Detections: {len(dets)} | Ground truth: {len(gts)}")
    print(f"Thresholds: t_sr={th.t_sr} t_tr={th.t_tr} t_sp={th.t_sp} t_tp={th.t_tp}")
    print(f"Recall: {detection['recall']:.4f} | Precision: {detection['precision']:.4f} | F1: {detection['f1']:.4f}")
    print(f"Integrated: I_sr={integrated['I_sr']:.4f} I_sp={integrated['I_sp']:.4f} "
          f"I_tr={integrated['I_tr']:.4f} I_tp={integrated['I_tp']:.4f} overall={integrated['overall']:.4f}")
    if "no_localisation" in report:
        nl = report["no_localisation"]
        print(f"No localisation: Recall {nl['recall']:.4f} | Precision {nl['precision']:.4f} | F1 {nl['f1']:.4f}")
    for path in outputs:
        print(f"Saved: {path}")
    return CommandResult(True, output_paths=outputs, metadata=report)


def cmd_curves(args, config: ConfigManager) -> CommandResult:
    """Write recall/precision/F1 sweeps for all four axes."""
    th = config.eval_thresholds
    dets, gts = _load_eval_inputs(args, config)
    matching = match_tubes(dets, gts)
    rows = [row for axis in AXES for row in metric_curves(dets, gts, axis, th.eta, th.grid_step, matching)]
    write_curves_csv(rows, args.output)

    _banner("CURVES")
    print(f"Axes: {', '.join(AXES)} | Points per axis: {len(th.grid)}")
    print(f"Saved: {args.output}")
    return CommandResult(True, output_paths=[args.output], metadata={"rows": len(rows)})


def cmd_gen(args, config: ConfigManager) -> CommandResult:
    """Generate proposals and ground truth for a scenario."""
    spec = load_scenario(args.scenario)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    video, gts = generate_scenario(spec)

    out_dir = Path(args.output)
    proposals_path = out_dir / f"{spec.video_id}_proposals.jsonl"
    gt_path = out_dir / f"{spec.video_id}_gt.jsonl"
    save_proposals(video, str(proposals_path))
    save_ground_truth(gts, str(gt_path))

    _banner("GENERATE")
    print(f"Scenario: {spec.video_id} | Seed: {spec.seed}")
    print(f"Frames: {video.frame_count} | Proposals: {video.proposal_count} | Planted tubes: {len(gts)}")
    print(f"Saved: {proposals_path}")
    print(f"Saved: {gt_path}")
    return CommandResult(True, output_paths=[str(proposals_path), str(gt_path)])


def cmd_propose(args, config: ConfigManager) -> CommandResult:
    """Power-set proposals from binary segmentations."""
    class_names = [c.strip() for c in args.classes.split(",")] if args.classes else config.class_names
    if not class_names:
        return CommandResult(False, EXIT_INPUT, error="no class names: pass --classes or set class_names in the config")

    segs = load_segmentations(args.segmentations)
    video = proposals_from_segmentations(
        segs, args.video_id, args.frames, class_names, config.ingest_settings.powerset_cap
    )
    save_proposals(video, args.output)

    _banner("PROPOSE")
    print(f"Video: {video.video_id} | Frames: {video.frame_count} | Proposals: {video.proposal_count}")
    print(f"Saved: {args.output}")
    return CommandResult(True, output_paths=[args.output])


def cmd_prune(args, config: ConfigManager) -> CommandResult:
    """Actionness pruning, then optional NMS."""
    threshold = config.ingest_settings.actionness_threshold
    videos = read_videos(args.proposals)
    flows = load_flow_maps(args.flow)
    before = sum(v.proposal_count for v in videos)

    pruned = [prune_video(v, flows, threshold) for v in videos]
    if args.nms:
        pruned = [nms_video(v, config.linker_config.nms_iou) for v in pruned]
    write_videos(pruned, args.output)

    after = sum(v.proposal_count for v in pruned)
    _banner("PRUNE")
    print(f"Actionness threshold: {threshold} | NMS: {'on' if args.nms else 'off'}")
    print(f"Proposals: {before} -> {after}")
    print(f"Saved: {args.output}")
    return CommandResult(True, output_paths=[args.output], metadata={"before": before, "after": after})


def cmd_areas(args, config: ConfigManager) -> CommandResult:
    """Per-class average areas from ground truth, optionally stored in the config."""
    gts = load_ground_truth(args.ground_truth, config.class_names or None)
    areas = class_average_areas(gts)

    _banner("CLASS AREAS")
    for name, area in areas.items():
        print(f"  {name:<25} {area:.1f}")

    outputs = []
    if args.save:
        config.set_class_areas({**config.linker_config.class_areas, **areas})
        config.save()
        outputs.append(str(config.config_path or config.DEFAULT_CONFIG_PATH))
        print(f"Saved: {outputs[0]}")
    return CommandResult(True, output_paths=outputs, metadata={"class_areas": areas})


def cmd_config(args, config: ConfigManager) -> CommandResult:
    """View or modify configuration."""
    if args.get:
        value = config.get_value(args.get)
        print(f"{args.get} = {json.dumps(value)}")
        return CommandResult(True, metadata={args.get: value})

    if args.set:
        if "=" not in args.set:
            return CommandResult(False, EXIT_USAGE, error="--set expects key=value")
        key, value = args.set.split("=", 1)
        # Try to parse as JSON, otherwise use as string
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        config.set_value(key.strip(), value)
        config.save()
        print(f"Set {key.strip()} = {json.dumps(value)}")
        return CommandResult(True, output_paths=[str(config.config_path or config.DEFAULT_CONFIG_PATH)])

    if args.export:
        with open(args.export, "w") as f:
            json.dump(config.export_config(), f, indent=2, sort_keys=True)
        print(f"Config exported to: {args.export}")
        return CommandResult(True, output_paths=[args.export])

    # Default: show summary
    config.print_summary()
    return CommandResult(True)


COMMANDS = {
    "link": cmd_link,
    "score": cmd_score,
    "eval": cmd_eval,
    "curves": cmd_curves,
    "gen": cmd_gen,
    "propose": cmd_propose,
    "prune": cmd_prune,
    "areas": cmd_areas,
    "config": cmd_config,
}


# =============================================================================
# Parser
# =============================================================================

def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", help="Path to config file", default=None)
    common.add_argument("--threads", type=int, help="Videos linked in parallel")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    verbosity.add_argument("--quiet", "-q", action="store_true", help="Warnings and errors only")
    return common


def _linker_options() -> argparse.ArgumentParser:
    linker = argparse.ArgumentParser(add_help=False)
    linker.add_argument("--lambda", dest="lam", type=float, help="Weight of the overlap term")
    linker.add_argument("--alpha", type=float, help="Label change penalty")
    linker.add_argument("--delta", type=int, help="Minimum tube length in frames")
    linker.add_argument("--tau", type=float, help="Area filter divisor")
    linker.add_argument("--max-paths", type=_int_or_null, help="Paths per class ('auto': K-connected)")
    linker.add_argument("--nms-iou", type=float, help="NMS overlap threshold")
    linker.add_argument("--background-score", type=_float_or_null,
                        help="Score of the no-action label ('none' disables it)")
    linker.add_argument("--top-k", type=int, help="Member scores averaged into the tube score")
    return linker


def _eval_options() -> argparse.ArgumentParser:
    ev = argparse.ArgumentParser(add_help=False)
    ev.add_argument("--eta", type=float, help="Value of the pinned thresholds during sweeps")
    ev.add_argument("--grid-step", type=float, help="Sweep resolution")
    ev.add_argument("--t-sr", type=float, help="Spatial recall threshold")
    ev.add_argument("--t-tr", type=float, help="Temporal recall threshold")
    ev.add_argument("--t-sp", type=float, help="Spatial precision threshold")
    ev.add_argument("--t-tp", type=float, help="Temporal precision threshold")
    return ev


def build_parser() -> argparse.ArgumentParser:
    parser = TubeLinkArgumentParser(
        description="Action tube linker",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python tubelink.py gen scenarios/three_tubes.json -o ./out
  python tubelink.py link out/synthetic_proposals.jsonl -o out/tubes.jsonl
  python tubelink.py eval out/tubes.jsonl out/synthetic_gt.jsonl -o out/report.json --no-localisation
  python tubelink.py curves out/tubes.jsonl out/synthetic_gt.jsonl -o out/curves.csv
  python tubelink.py config --summary
        """
    )
    common, linker, ev = _common_options(), _linker_options(), _eval_options()
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    # Link command
    link_parser = subparsers.add_parser("link", parents=[common, linker], help="Link proposals into tubes")
    link_parser.add_argument("proposals", help="Proposals file (JSON lines)")
    link_parser.add_argument("--output", "-o", required=True, help="Tube output file")

    # Score command
    score_parser = subparsers.add_parser("score", parents=[common], help="Score proposals with a linear model")
    score_parser.add_argument("proposals", help="Proposals file")
    score_parser.add_argument("--features", "-f", required=True, help="Feature file (JSON lines)")
    score_parser.add_argument("--model", "-m", required=True, help="Model file (JSON)")
    score_parser.add_argument("--output", "-o", required=True, help="Scored proposals output")

    # Eval command
    eval_parser = subparsers.add_parser("eval", parents=[common, ev], help="Evaluate tubes")
    eval_parser.add_argument("tubes", help="Detected tubes file")
    eval_parser.add_argument("ground_truth", help="Ground truth file")
    eval_parser.add_argument("--output", "-o", help="JSON report output")
    eval_parser.add_argument("--curves", help="Also write the curves CSV here")
    eval_parser.add_argument("--confusion", help="Write the confusion matrix CSV here")
    eval_parser.add_argument("--no-localisation", action="store_true", help="Add the class-only report")

    # Curves command
    curves_parser = subparsers.add_parser("curves", parents=[common, ev], help="Write threshold-sweep curves")
    curves_parser.add_argument("tubes", help="Detected tubes file")
    curves_parser.add_argument("ground_truth", help="Ground truth file")
    curves_parser.add_argument("--output", "-o", required=True, help="CSV output")

    # Gen command
    gen_parser = subparsers.add_parser("gen", parents=[common], help="Generate a synthetic scenario")
    gen_parser.add_argument("scenario", help="Scenario file (JSON)")
    gen_parser.add_argument("--output", "-o", required=True, help="Output directory")
    gen_parser.add_argument("--seed", type=int, help="Override the scenario seed")

    # Propose command
    propose_parser = subparsers.add_parser("propose", parents=[common], help="Proposals from segmentations")
    propose_parser.add_argument("segmentations", help="Segmentation file (JSON lines)")
    propose_parser.add_argument("--video-id", required=True, help="Video to build")
    propose_parser.add_argument("--frames", type=int, required=True, help="Frame count of the video")
    propose_parser.add_argument("--classes", help="Comma-separated class names")
    propose_parser.add_argument("--output", "-o", required=True, help="Proposals output")

    # Prune command
    prune_parser = subparsers.add_parser("prune", parents=[common], help="Actionness pruning")
    prune_parser.add_argument("proposals", help="Proposals file")
    prune_parser.add_argument("--flow", required=True, help="Flow magnitude file (JSON lines)")
    prune_parser.add_argument("--actionness-threshold", type=float, help="Minimum actionness")
    prune_parser.add_argument("--nms", action="store_true", help="Also apply per-class NMS")
    prune_parser.add_argument("--nms-iou", type=float, help="NMS overlap threshold")
    prune_parser.add_argument("--output", "-o", required=True, help="Pruned proposals output")

    # Areas command
    areas_parser = subparsers.add_parser("areas", parents=[common], help="Per-class average areas")
    areas_parser.add_argument("ground_truth", help="Ground truth file")
    areas_parser.add_argument("--save", action="store_true", help="Store the areas in the config file")

    # Config command
    config_parser = subparsers.add_parser("config", parents=[common], help="View/modify configuration")
    config_parser.add_argument("--summary", "-s", action="store_true", help="Show config summary")
    config_parser.add_argument("--get", help="Get a config value (dot notation)")
    config_parser.add_argument("--set", help="Set a config value (key=value)")
    config_parser.add_argument("--export", help="Export config to file")

    return parser


def _overrides(args) -> Dict[str, Any]:
    overrides = {}
    for dest, key in OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _configure(args) -> ConfigManager:
    config = ConfigManager(ConfigManager.resolve_path(args.config))
    overrides = _overrides(args)
    nulls = [key for key, value in overrides.items() if value is UNSET]
    config.apply_overrides({k: v for k, v in overrides.items() if v is not UNSET})
    for key in nulls:
        config.set_value(key, None)
    return config


def _setup_logging(args, config: Optional[ConfigManager]) -> None:
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    else:
        level = getattr(logging, (config.log_level if config else "INFO").upper(), logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE

    # Show help if no command
    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    try:
        config = _configure(args)
    except FileNotFoundError as e:
        print(f"Error: {e}", file=sys.stderr)
        print("Or specify config path: python tubelink.py <command> --config /path/to/config.json", file=sys.stderr)
        return EXIT_INPUT
    except ValidationError as e:
        print(f"Error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_INPUT

    _setup_logging(args, config)

    try:
        result = COMMANDS[args.command](args, config)
    except (ValidationError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except InvariantError as e:
        print(f"Internal error: {e}", file=sys.stderr)
        return EXIT_INVARIANT

    if not result.success:
        print(f"Error: {result.error}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
