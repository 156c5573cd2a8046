"""
Command-line surface: ``dispose <subcommand>``.

Every subcommand builds a RunConfig (flags > --config JSON > environment >
defaults), sets up logging and writes under the configured output dir.
Errors map to exit codes in one place: 2 for bad input, 1 for invariant or
runtime failures.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Type

import numpy as np
from rich.table import Table

from . import __version__
from .checks import load_check_modules, registry
from .config import RunConfig, load_run_config
from .correspondence import (
    FileFeatureProvider,
    SyntheticFeatureProvider,
    correspondence_pyramid,
    extract_point_embeddings,
    load_feature_file,
    retrieve_point,
)
from .exceptions import (
    EXIT_INPUT,
    EXIT_INVARIANT,
    EXIT_OK,
    DisposeError,
    InputError,
    InvariantViolation,
    ParameterError,
)
from .flow_sampling import sample_sparse_flow
from .logging_utils import console, setup_logging
from .motion_field import (
    ExternalPropagator,
    HarmonicPropagator,
    PropagatorParams,
    dense_field_stack,
    export_constraints,
    rasterize_sparse_field,
)
from .pose_io import (
    load_flow,
    load_pose_sequence,
    load_reference_image,
    render_flow_png,
    save_flow_stack,
)
from .run_registry import CheckStatus, RunLedger
from .trajectory import build_trajectory, reference_displacements, track_matrix

logger = logging.getLogger(__name__)

CONFIG_FIELDS = set(RunConfig.model_fields)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def _require(value, flag: str):
    if value is None:
        raise ParameterError(f"{flag} is required (flag or config file)")
    return value


def _reference_for(config: RunConfig, height: int, width: int) -> np.ndarray:
    if config.reference is None:
        logger.info("No reference image given; propagating over a uniform gray image")
        return np.full((height, width, 3), 0.5)
    reference = load_reference_image(config.reference)
    if reference.shape[:2] != (height, width):
        raise ParameterError(
            f"reference image is {reference.shape[1]}x{reference.shape[0]}, poses are {width}x{height}"
        )
    return reference


def _field_stats(field: np.ndarray) -> Tuple[float, float]:
    magnitude = np.hypot(field[0], field[1])
    return float(magnitude.max()) if magnitude.size else 0.0, float(np.mean(magnitude > 0))


def _flow_paths(path: Path) -> List[Path]:
    if path.is_dir():
        paths = sorted(path.glob("*.flo"))
        if not paths:
            raise ParameterError(f"no .flo files in {path}")
        return paths
    return [path]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_poses2fields(config: RunConfig, args: argparse.Namespace) -> int:
    seq = load_pose_sequence(_require(config.poses, "--poses"))
    height, width = seq.height, seq.width
    traj = build_trajectory(seq, config.conf_threshold)
    ref_disp = reference_displacements(traj)
    sparse_disp = track_matrix(traj) if config.sparse_source == "track" else ref_disp

    sparse = rasterize_sparse_field(sparse_disp, traj, height, width, config.sigma)
    reference = _reference_for(config, height, width)
    params = PropagatorParams(beta=config.beta, tol=config.tol, max_iters=config.max_iters)
    propagator = ExternalPropagator(config.external_cmp) if config.external_cmp else HarmonicPropagator(params)

    dense = dense_field_stack(reference, ref_disp, traj, propagator=propagator)

    out = config.output_dir
    save_flow_stack(sparse, out, "sparse")
    save_flow_stack(dense, out, "dense")

    table = Table(title=f"Motion fields ({config.sparse_source} sparse source)")
    for column in ("frame", "sparse max |v|", "sparse nonzero", "dense max |v|", "dense nonzero"):
        table.add_column(column, justify="right")
    for n in range(sparse.frames):
        render_flow_png(sparse, n, out / f"sparse_{n + 1:04d}.png")
        render_flow_png(dense, n, out / f"dense_{n + 1:04d}.png")
        s_max, s_nz = _field_stats(sparse.frame(n))
        d_max, d_nz = _field_stats(dense.frame(n))
        table.add_row(str(n + 1), f"{s_max:.3f}", f"{s_nz:.1%}", f"{d_max:.3f}", f"{d_nz:.1%}")
    console.print(table)
    logger.info(f"Wrote {sparse.frames} sparse and {dense.frames} dense fields to {out}")
    return EXIT_OK


def cmd_sample_flow(config: RunConfig, args: argparse.Namespace) -> int:
    out = config.output_dir
    table = Table(title=f"Watershed sampling (K_f={config.kf})")
    table.add_column("flow")
    table.add_column("samples", justify="right")
    for path in _flow_paths(_require(config.flow, "--flow")):
        samples = sample_sparse_flow(load_flow(path).frame(0), config.edge_threshold, config.kf)
        if len(samples) == 0:
            logger.warning(f"{path.name}: no samples (flow has no interior distance peaks); writing an empty constraint file")
        export_constraints(samples, out / f"samples_{path.stem}.flo", allow_empty=True)
        table.add_row(path.name, str(len(samples)))
    console.print(table)
    return EXIT_OK


def cmd_build_correspondence(config: RunConfig, args: argparse.Namespace) -> int:
    seq = load_pose_sequence(_require(config.poses, "--poses"))
    height, width = seq.height, seq.width
    traj = build_trajectory(seq, config.conf_threshold)
    image = np.zeros((height, width, 3))
    if config.features is not None:
        provider = FileFeatureProvider(config.features)
    else:
        logger.info("No feature file given; using seeded synthetic features")
        provider = SyntheticFeatureProvider(config.feature_dim, seed=config.seed)
    embeddings = extract_point_embeddings(provider.features(image), traj)

    level_dims = [
        (max(1, height // (config.latent_factor * 2 ** l)), max(1, width // (config.latent_factor * 2 ** l)))
        for l in range(config.levels)
    ]
    pyramid = correspondence_pyramid(embeddings, traj, height, width, level_dims)

    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    table = Table(title="Correspondence pyramid")
    for column in ("level", "dims", "nonzero per frame"):
        table.add_column(column)
    for level, stack in enumerate(pyramid):
        np.save(out / f"correspondence_l{level}.npy", stack.data)
        table.add_row(str(level), f"{stack.height}x{stack.width}", ", ".join(map(str, stack.nonzero_counts())))
    console.print(table)
    return EXIT_OK


def cmd_render_flow(config: RunConfig, args: argparse.Namespace) -> int:
    for path in _flow_paths(_require(config.flow, "--flow")):
        target = render_flow_png(load_flow(path), 0, config.output_dir / f"{path.stem}.png")
        logger.info(f"Rendered {path.name} -> {target}")
    return EXIT_OK


def cmd_train_toy(config: RunConfig, args: argparse.Namespace) -> int:
    from .guidance_net.checkpoint import save_checkpoint
    from .guidance_net.data import DataConfig
    from .guidance_net.pipeline import NetConfig, trainable_parameter_report
    from .guidance_net.training import TrainConfig, train_toy, write_loss_csv

    data = DataConfig(
        sparse_source=config.sparse_source, dense_source=args.dense_source,
        conf_threshold=config.conf_threshold, sigma=config.sigma, beta=config.beta, tol=config.tol,
        max_iters=config.max_iters, kf=config.kf, edge_threshold=config.edge_threshold,
    )
    net = NetConfig(variant=config.variant, latent_factor=config.latent_factor,
                    feature_dim=config.feature_dim, seed=config.seed)
    result = train_toy(TrainConfig(steps=config.steps, seed=config.seed, data=data), net)

    out = config.output_dir
    write_loss_csv(result.losses, out / "loss.csv")
    save_checkpoint(result.pipeline, out / "checkpoint", seed=config.seed, extra={"steps": config.steps})

    table = Table(title=f"train-toy ({config.variant}, seed {config.seed})")
    for column in ("component", "trainable", "frozen"):
        table.add_column(column, justify="right")
    for name, counts in trainable_parameter_report(result.pipeline).items():
        table.add_row(name, str(counts["trainable"]), str(counts["frozen"]))
    console.print(table)
    console.print(
        f"loss {result.initial_loss:.5f} -> {result.final_loss:.5f}; "
        f"frozen base {'unchanged' if result.base_unchanged else '[bold red]CHANGED[/bold red]'}"
    )
    if not result.base_unchanged:
        raise InvariantViolation("guidance_net", "frozen base unchanged",
                                 {"before": result.checksum_before, "after": result.checksum_after})
    return EXIT_OK


def cmd_check(config: RunConfig, args: argparse.Namespace) -> int:
    load_check_modules()
    ledger = RunLedger()
    runs = registry.run_suite(args.suite, ledger, include_slow=not args.skip_slow)

    table = Table(title=f"Invariant checks: {args.suite}")
    for column in ("module", "check", "status", "seconds"):
        table.add_column(column)
    colours = {CheckStatus.PASSED: "green", CheckStatus.FAILED: "red", CheckStatus.ERROR: "magenta"}
    for run in runs:
        colour = colours.get(run.status, "white")
        table.add_row(run.module, run.check_name, f"[{colour}]{run.status.value}[/{colour}]", f"{run.duration:.2f}")
    console.print(table)
    if args.json:
        ledger.write_json(args.json)

    failure = ledger.first_failure()
    if failure is None:
        console.print(f"[bold green]{len(runs)} checks passed[/bold green]")
        return EXIT_OK
    console.print(f"[bold red]First failure:[/bold red] {failure.get_status_message()}")
    if failure.error:
        console.print(f"  {failure.error}")
    counts = ledger.summary()
    logger.error(f"{counts['failed']} failed, {counts['error']} errored of {len(runs)} checks")
    return EXIT_INVARIANT


def cmd_retrieve(config: RunConfig, args: argparse.Namespace) -> int:
    src = load_feature_file(args.src_features)
    tgt = load_feature_file(args.tgt_features)
    x, y = retrieve_point(src, tuple(args.point), tgt)
    console.print(f"({args.point[0]}, {args.point[1]}) -> ({x}, {y})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Error handling
# ---------------------------------------------------------------------------

def _invariant_handler(exc: InvariantViolation) -> int:
    console.print(f"[bold red]Invariant violated[/bold red] in {exc.module}: {exc.invariant}")
    for key, value in exc.witness.items():
        console.print(f"  {key} = {value}")
    return exc.exit_code


def _input_handler(exc: InputError) -> int:
    console.print(f"[bold red]Input error:[/bold red] {exc.detail}")
    return exc.exit_code


def _dispose_handler(exc: DisposeError) -> int:
    console.print(f"[bold red]Error:[/bold red] {exc.detail}")
    return exc.exit_code


def _os_handler(exc: OSError) -> int:
    console.print(f"[bold red]I/O error:[/bold red] {exc}")
    return EXIT_INPUT


# Checked in order; the first matching type handles the exception
ERROR_HANDLERS: List[Tuple[Type[BaseException], Callable[..., int]]] = [
    (InvariantViolation, _invariant_handler),
    (InputError, _input_handler),
    (DisposeError, _dispose_handler),
    (OSError, _os_handler),
]


def handle_error(exc: BaseException) -> Optional[int]:
    for exc_type, handler in ERROR_HANDLERS:
        if isinstance(exc, exc_type):
            logger.debug("Handled error", exc_info=exc)
            return handler(exc)
    return None


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], int]] = {
    "poses2fields": cmd_poses2fields,
    "sample-flow": cmd_sample_flow,
    "build-correspondence": cmd_build_correspondence,
    "render-flow": cmd_render_flow,
    "train-toy": cmd_train_toy,
    "check": cmd_check,
    "retrieve": cmd_retrieve,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run config; flags override its values")
    common.add_argument("--output-dir", type=Path, help="Directory for all outputs (default: outputs)")
    common.add_argument("--log-level", help="Logging level (default: INFO)")
    common.add_argument("--log-file", type=Path, help="Also write logs to this file")
    common.add_argument("--seed", type=int, help="Random seed (default: 0)")

    parser = argparse.ArgumentParser(prog="dispose", description="Pose-driven motion and correspondence guidance")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("poses2fields", parents=[common], help="Pose file -> sparse and dense motion fields")
    p.add_argument("--poses", type=Path, help="Pose JSON file")
    p.add_argument("--reference", type=Path, help="Reference image (default: uniform gray)")
    p.add_argument("--sigma", type=float, help="Gaussian splat sigma in pixels (default: 3.0)")
    p.add_argument("--beta", type=float, help="Edge sensitivity of the propagation (default: 0.01)")
    p.add_argument("--tol", type=float, help="Propagation tolerance (default: 1e-5)")
    p.add_argument("--max-iters", type=int, help="Propagation iteration cap (default: 10*H*W)")
    p.add_argument("--conf-threshold", type=float, help="Keypoint confidence threshold (default: 0.3)")
    p.add_argument("--sparse-source", choices=["track", "reference"], help="Sparse field source (default: track)")
    p.add_argument("--external-cmp", type=Path, help="Exchange directory for an external propagation model")

    p = sub.add_parser("sample-flow", parents=[common], help="Watershed-sample sparse flow from .flo files")
    p.add_argument("--flow", type=Path, help=".flo file or directory of .flo files")
    p.add_argument("--kf", type=int, help="NMS kernel size, odd >= 3 (default: 9)")
    p.add_argument("--edge-threshold", type=float, help="Sobel magnitude threshold for motion edges (default: 1.0)")

    p = sub.add_parser("build-correspondence", parents=[common], help="Pose file + features -> correspondence pyramid")
    p.add_argument("--poses", type=Path, help="Pose JSON file")
    p.add_argument("--features", type=Path, help="Feature file (default: seeded synthetic features)")
    p.add_argument("--levels", type=int, help="Pyramid levels (default: 4)")
    p.add_argument("--latent-factor", type=int, help="Latent downsampling factor (default: 8)")
    p.add_argument("--feature-dim", type=int, help="Synthetic feature channels (default: 8)")
    p.add_argument("--conf-threshold", type=float, help="Keypoint confidence threshold (default: 0.3)")

    p = sub.add_parser("render-flow", parents=[common], help="Render .flo files as color-wheel PNGs")
    p.add_argument("--flow", type=Path, help=".flo file or directory of .flo files")

    p = sub.add_parser("train-toy", parents=[common], help="Train the guidance branches on the synthetic set")
    p.add_argument("--steps", type=int, help="Training steps (default: 200)")
    p.add_argument("--variant", choices=["full", "exp1", "exp2"], help="Guidance wiring (default: full)")
    p.add_argument("--dense-source", choices=["keypoints", "flow"], default="keypoints",
                   help="Dense field from propagated keypoints or sampled ground-truth flow (default: keypoints)")

    p = sub.add_parser("check", parents=[common], help="Run the invariant check suite")
    p.add_argument("--suite", default="all", help="'all' or a module name (default: all)")
    p.add_argument("--skip-slow", action="store_true", help="Skip the toy training run")
    p.add_argument("--json", type=Path, help="Also write the run ledger (status, witness, timings) to this JSON file")

    p = sub.add_parser("retrieve", parents=[common], help="Find the best-matching target point for a source point")
    p.add_argument("--src-features", type=Path, required=True, help="Source feature file")
    p.add_argument("--tgt-features", type=Path, required=True, help="Target feature file")
    p.add_argument("--point", type=int, nargs=2, metavar=("X", "Y"), required=True,
                   help="Source point in feature-map pixels")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k in CONFIG_FIELDS}
    try:
        config = load_run_config(args.config, **overrides)
        setup_logging(config.log_level.upper(), config.log_file)
        logger.debug(f"Running {args.command} with {config.model_dump()}")
        return COMMANDS[args.command](config, args)
    except Exception as exc:
        code = handle_error(exc)
        if code is None:
            raise
        return code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
