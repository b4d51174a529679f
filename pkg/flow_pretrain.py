#!/usr/bin/env python3
"""Self-supervised scene flow pre-training for point-cloud 3D detection."""

import argparse
import os
import platform
import sys
from datetime import datetime

try:
    from humanize import precisedelta

    from modules.logs import MyLogger
except ModuleNotFoundError:
    print("Requirements Error: Requirements are not installed")
    sys.exit(1)

REQUIRED_VERSION = (3, 9, 0)
REQUIRED_VERSION_STR = ".".join(str(x) for x in REQUIRED_VERSION)
current_version = sys.version_info

if current_version < (REQUIRED_VERSION):
    print(
        f"Version Error: Version: {current_version[0]}.{current_version[1]}.{current_version[2]} incompatible with "
        f"flow_pretrain please use Python {REQUIRED_VERSION_STR}+"
    )
    sys.exit(1)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

COMMANDS = {
    "generate": "Write a synthetic scene archive and its manifest",
    "pretrain-flow": "Self-supervised scene flow pre-training of the backbone and flow head",
    "train-detect": "Detection training, optionally from a pre-trained backbone",
    "alternate": "Four-stage alternating flow / detection schedule",
    "eval-flow": "End-point error of a checkpoint on held-out scenes",
    "eval-detect": "AP_R40 of a checkpoint on held-out scenes",
    "export-ply": "Write the sparse-flow visualisation or a KITTI .bin scan as PLY",
    "grad-check": "Finite-difference gradient checks of every op and the full model",
    "benchmark": "Low-data protocol: label fractions x seeds x {random, flow} init",
}

default_dir = os.path.dirname(os.path.abspath(__file__))


def global_flags(suppress=False):
    """
    Flags accepted before and after the subcommand.

    The subcommand copy suppresses its defaults so it never overwrites a value given before the subcommand.
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-db", "--debug", dest="debug", help=argparse.SUPPRESS, action="store_true", default=False)
    common.add_argument("-tr", "--trace", dest="trace", help=argparse.SUPPRESS, action="store_true", default=False)
    common.add_argument(
        "-c",
        "--config",
        dest="config_file",
        action="store",
        default=None,
        type=str,
        help="Config file or preset name (smoke, desk, full, lowdata). Default: config/config.yml or built-in defaults",
    )
    common.add_argument("-s", "--seed", dest="seed", action="store", default=None, type=int, help="Override run.seed")
    common.add_argument("-o", "--out", dest="out_dir", action="store", default=None, type=str, help="Override run.out_dir")
    common.add_argument(
        "--loss-distance",
        dest="loss_distance",
        action="store",
        default=None,
        choices=["squared", "euclidean"],
        help="Distance used by the flow losses (overrides loss.distance)",
    )
    common.add_argument("--iou", dest="iou", action="store", default=None, type=float, help="AP IoU threshold (default 0.7)")
    common.add_argument(
        "-lf", "--log-file", dest="logfile", action="store", default="flow_pretrain.log", type=str, help="Log file name"
    )
    common.add_argument(
        "-ll", "--log-level", dest="log_level", action="store", default="INFO", type=str, help="Change your log level."
    )
    common.add_argument(
        "-d", "--divider", dest="divider", help="Character that divides the sections (Default: '=')", default="=", type=str
    )
    common.add_argument("-w", "--width", dest="width", help="Screen Width (Default: 100)", default=100, type=int)
    common.add_argument(
        "-ls", "--log-size", dest="log_size", action="store", default=10, type=int, help="Maximum log size per file (in MB)"
    )
    common.add_argument(
        "-lc", "--log-count", dest="log_count", action="store", default=5, type=int, help="Maximum number of logs to keep"
    )
    if suppress:
        for action in common._actions:
            action.default = argparse.SUPPRESS
    return common


def build_parser():
    parser = argparse.ArgumentParser(
        "flow_pretrain", description="Self-supervised scene flow pre-training for point-cloud 3D detection.", parents=[global_flags()]
    )
    commands = parser.add_subparsers(dest="command", metavar="command")
    commands.required = True
    for name, help_text in COMMANDS.items():
        sub = commands.add_parser(name, help=help_text, description=help_text, parents=[global_flags(suppress=True)])
        if name == "generate":
            sub.add_argument("--dest", dest="dest", default=None, help="Archive directory (default <out>/scenes)")
        if name == "train-detect":
            sub.add_argument("--init", dest="init", default=None, help="Checkpoint whose backbone (g.*) initialises the detector")
            sub.add_argument("--label-fraction", dest="label_fraction", default=None, type=float, help="Labeled share in (0, 1]")
        if name in ("eval-flow", "eval-detect", "export-ply"):
            sub.add_argument("--checkpoint", dest="checkpoint", default=None, help="Checkpoint to evaluate / predict with")
        if name == "export-ply":
            sub.add_argument("--scene", dest="scene", default=0, type=int, help="Scene id to visualise")
            sub.add_argument("--kitti", dest="kitti", default=None, help="Convert this KITTI .bin scan instead of a scene")
            sub.add_argument("--dest", dest="dest", default=None, help="PLY file (default <out>/scene_<id>.ply)")
            sub.add_argument("--segments", dest="segments", action="store_true", default=False, help="Draw flow vectors as edges")
            sub.add_argument("--boxes", dest="boxes", action="store_true", default=False, help="Draw ground-truth boxes")
        if name == "grad-check":
            sub.add_argument("--ops-only", dest="ops_only", action="store_true", default=False, help="Skip the full-model checks")
    return parser


def get_arg(env_str, default, arg_bool=False, arg_int=False, arg_float=False):
    env_vars = [env_str] if not isinstance(env_str, list) else env_str
    final_value = None
    for env_var in env_vars:
        env_value = os.environ.get(env_var)
        if env_value is not None:
            final_value = env_value
            break
    if final_value or (arg_int and final_value == 0):
        if arg_bool:
            if final_value is True or final_value is False:
                return final_value
            elif final_value.lower() in ["t", "true"]:
                return True
            else:
                return False
        elif arg_int:
            try:
                return int(final_value)
            except ValueError:
                return default
        elif arg_float:
            try:
                return float(final_value)
            except ValueError:
                return default
        else:
            return str(final_value)
    else:
        return default


def resolve_args(parsed):
    """Command line values with FPT_* environment overrides"""
    args = vars(parsed).copy()
    args["config_file"] = get_arg("FPT_CONFIG", parsed.config_file)
    args["seed"] = get_arg("FPT_SEED", parsed.seed, arg_int=True)
    args["out_dir"] = get_arg("FPT_OUT", parsed.out_dir)
    args["loss_distance"] = get_arg("FPT_LOSS_DISTANCE", parsed.loss_distance)
    args["iou"] = get_arg("FPT_IOU", parsed.iou, arg_float=True)
    args["log_file"] = get_arg("FPT_LOGFILE", parsed.logfile)
    args["log_level"] = get_arg("FPT_LOG_LEVEL", parsed.log_level)
    args["log_size"] = get_arg("FPT_LOG_SIZE", parsed.log_size, arg_int=True)
    args["log_count"] = get_arg("FPT_LOG_COUNT", parsed.log_count, arg_int=True)
    args["divider"] = get_arg("FPT_DIVIDER", parsed.divider)
    args["screen_width"] = get_arg("FPT_WIDTH", parsed.width, arg_int=True)
    args["debug"] = get_arg("FPT_DEBUG", parsed.debug, arg_bool=True)
    args["trace"] = get_arg("FPT_TRACE", parsed.trace, arg_bool=True)
    if args["debug"]:
        args["log_level"] = "DEBUG"
    if args["trace"]:
        args["log_level"] = "TRACE"
    if args["screen_width"] < 90 or args["screen_width"] > 300:
        print(f"Argument Error: width argument invalid: {args['screen_width']} must be an integer between 90 and 300 using the default 100")
        args["screen_width"] = 100
    args["stage"] = parsed.command if parsed.command in ("pretrain-flow", "train-detect", "alternate", "eval-flow", "eval-detect") else None
    return args


def print_logo(logger, version):
    logger.separator()
    logger.info_center(" _____ _                 ____           _             _       ")
    logger.info_center("|  ___| | _____      __ |  _ \\ _ __ ___| |_ _ __ __ _(_)_ __  ")
    logger.info_center("| |_  | |/ _ \\ \\ /\\ / / | |_) | '__/ _ \\ __| '__/ _` | | '_ \\ ")
    logger.info_center("|  _| | | (_) \\ V  V /  |  __/| | |  __/ |_| | | (_| | | | | |")
    logger.info_center(r"|_|   |_|\___/ \_/\_/   |_|   |_|  \___|\__|_|  \__,_|_|_| |_|")
    logger.info(f"    Version: {version} (Python {platform.python_version()})")
    logger.info(f"    Platform: {platform.platform()}")


def generate(cfg, args, logger):
    from modules.core.training import build_dataset
    from modules.data import save_scene
    from modules.data import scene_file
    from modules.data import write_manifest

    dest = args.get("dest") or os.path.join(cfg.out_dir, "scenes")
    os.makedirs(dest, exist_ok=True)
    dataset = build_dataset(cfg)
    logger.separator(f"Generating {len(dataset.ids)} scenes", space=False, border=False)
    for scene_id in dataset.ids:
        save_scene(dataset.scene(scene_id), os.path.join(dest, scene_file(scene_id)))
        logger.ghost(f"scene {scene_id + 1}/{len(dataset.ids)}")
    logger.exorcise()
    write_manifest(dest, dataset.ids, cfg.generator.digest, cfg.seed, {"generator": cfg.generator.as_dict()})
    logger.print_line(f"Scene archive written to {dest}", "INFO")
    return [f"Scenes Written: {len(dataset.ids)}", f"Archive: {dest}"]


def export_ply(cfg, args, logger):
    from modules.core.evaluate import load_params
    from modules.core.training import build_dataset
    from modules.data import BLUE
    from modules.data import GRAY
    from modules.data import export_ply as write_ply
    from modules.data import flow_visualization_layers
    from modules.data import load_kitti_bin
    from modules.data import sample_points
    from modules.evaluation import flow_at_samples
    from modules.model import predict_flow

    os.makedirs(cfg.out_dir, exist_ok=True)
    if args.get("kitti"):
        cloud = load_kitti_bin(args["kitti"])
        dest = args.get("dest") or os.path.join(cfg.out_dir, os.path.splitext(os.path.basename(args["kitti"]))[0] + ".ply")
        n_vertices, _ = write_ply([(cloud, GRAY)], dest)
        return [f"PLY Vertices: {n_vertices}", f"PLY: {dest}"]
    sample = build_dataset(cfg).scene(args["scene"])
    if args.get("checkpoint"):
        params = load_params(cfg, args["checkpoint"])
        sampled_xyz, flow = predict_flow(sample.frame_t, sample.frame_t1, cfg.model, params, seed=cfg.seed)
        source = "predicted"
    else:
        _, sampled_xyz = sample_points(sample.frame_t, cfg.model.backbone.n_sample, seed=cfg.seed)
        flow = flow_at_samples(sample.frame_t.xyz, sample.gt_flow, sampled_xyz)
        source = "ground-truth"
    layers = flow_visualization_layers(sample.frame_t1, sampled_xyz, flow, segments=args.get("segments", False))
    if args.get("boxes") and sample.gt_boxes_t:
        layers.append((sample.gt_boxes_t, BLUE))
    dest = args.get("dest") or os.path.join(cfg.out_dir, f"scene_{args['scene']:06d}.ply")
    n_vertices, n_edges = write_ply(layers, dest)
    logger.print_line(f"Scene {args['scene']} with {source} flow written to {dest}", "INFO")
    return [f"PLY Vertices: {n_vertices}", f"PLY Edges: {n_edges}", f"PLY: {dest}"]


def run_command(cfg, args, logger):
    """Dispatch one subcommand; returns (exit code, summary lines)"""
    command = args["command"]
    if command == "generate":
        return EXIT_OK, generate(cfg, args, logger)
    if command == "export-ply":
        return EXIT_OK, export_ply(cfg, args, logger)
    if command == "pretrain-flow":
        from modules.core.pretrain_flow import PretrainFlow

        stage = PretrainFlow(cfg)
        return EXIT_OK, [f"Best Validation Loss: {stage.stats['best_val']:.6f}", f"Checkpoint: {stage.checkpoint_path}"]
    if command == "train-detect":
        from modules.core.train_detect import TrainDetect
        from modules.core.train_detect import backbone_initialised_params

        init = args.get("init") or cfg.training["init_checkpoint"]
        params = backbone_initialised_params(cfg, init)
        stage = TrainDetect(cfg, params, label_fraction=args.get("label_fraction"))
        return EXIT_OK, [f"Best Validation AP: {stage.best_ap:.4f}", f"Checkpoint: {stage.checkpoint_path}"]
    if command == "alternate":
        from modules.core.alternate import Alternate

        schedule = Alternate(cfg)
        return EXIT_OK, [
            f"AP After Stage (ii): {schedule.ap['stage_ii']:.4f}",
            f"AP After Stage (iv): {schedule.ap['stage_iv']:.4f}",
            f"Checkpoint: {schedule.checkpoint_path}",
        ]
    if command == "eval-flow":
        from modules.core.evaluate import EvalFlow

        result = EvalFlow(cfg, args.get("checkpoint"))
        return EXIT_OK, [f"EPE: {result.report.flow['epe']:.4f} m", f"Zero-flow EPE: {result.report.flow['epe_zero_flow']:.4f} m"]
    if command == "eval-detect":
        from modules.core.evaluate import EvalDetect

        result = EvalDetect(cfg, args.get("checkpoint"))
        return EXIT_OK, [f"AP_R40 (IoU {cfg.eval['iou']}): {result.ap:.4f}"]
    if command == "benchmark":
        from modules.core.benchmark import Benchmark

        bench = Benchmark(cfg)
        return EXIT_OK, [
            f"Fraction {fraction:g}: gap {entry['gap']:+.4f}" for fraction, entry in bench.gaps().items()
        ]
    if command == "grad-check":
        from modules.core.grad_suite import GradSuite

        suite = GradSuite(cfg, include_model=not args.get("ops_only"))
        code = EXIT_OK if suite.passed else EXIT_CHECK_FAILED
        return code, [f"Gradient Checks Passed: {len(suite.reports) - len(suite.failures)}/{len(suite.reports)}"]
    raise ValueError(f"unknown command {command}")


def main(argv=None):
    """Run one subcommand; returns the process exit code"""
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        parsed = build_parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    args = resolve_args(parsed)

    logger = MyLogger(
        "Flow Pretrain",
        args["log_file"],
        args["log_level"],
        default_dir,
        args["screen_width"],
        args["divider"][0],
        False,
        args["log_size"],
        args["log_count"],
    )
    from modules import util  # noqa

    util.logger = logger
    from modules import __version__  # noqa
    from modules.config import Config  # noqa
    from modules.util import Diverged  # noqa
    from modules.util import Failed  # noqa

    def my_except_hook(exctype, value, tbi):
        """Handle uncaught exceptions"""
        if issubclass(exctype, KeyboardInterrupt):
            sys.__excepthook__(exctype, value, tbi)
        else:
            logger.critical("Uncaught Exception", exc_info=(exctype, value, tbi))

    sys.excepthook = my_except_hook

    logger.add_main_handler()
    print_logo(logger, __version__)
    start_time = datetime.now()
    logger.separator(f"Starting {args['command']}")
    cfg = None
    code = EXIT_OK
    summary = []
    try:
        cfg = Config(default_dir, args)
        logger.add_run_handler(cfg.out_dir)
        cfg.write_resolved()
        cfg.write_run_info(__version__, command=" ".join(["flow_pretrain.py", *argv]))
        code, summary = run_command(cfg, args, logger)
    except Diverged as e:
        logger.stacktrace()
        logger.critical(e)
        code = EXIT_DIVERGED
    except Failed as e:
        logger.stacktrace()
        logger.critical(e)
        code = EXIT_CONFIG
    run_time = precisedelta(datetime.now() - start_time, minimum_unit="seconds", format="%0.1f")
    status = "Finished" if code == EXIT_OK else f"Failed (exit {code})"
    logger.separator(f"{status} {args['command']}\n" + "\n".join([*summary, f"Run Time: {run_time}"]))
    if cfg is not None:
        logger.remove_run_handler(cfg.out_dir)
    logger.remove_main_handler()
    return code


def cli():
    sys.exit(main())


if __name__ == "__main__":
    cli()
