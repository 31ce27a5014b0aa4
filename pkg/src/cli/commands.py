"""
Command-line entry point

Subcommands: make-noise, train, eval, gradcheck, sweep, chart.
Exit codes: 0 ok, 1 I/O or format error, 2 bad arguments or configuration,
3 training divergence, 4 gradient check failure, 5 partial sweep failure.
"""

import argparse
import os
import sys
from datetime import datetime
from typing import Any, Dict, Optional, Sequence

from src.cli.charts import write_sweep_chart
from src.cli.manifest import read_manifest, verify_inputs
from src.cli.runner import default_run_dir, execute_run, parse_ratio
from src.cli.sweep import FIGURE_FILE, plan_sweep, run_sweep
from src.config import Config, config as default_config
from src.core.evaluation import EvalConfig, evaluate, export_metrics
from src.core.gradcheck import DEFAULT_DIMS, DEFAULT_STEP, TOLERANCE, run_gradient_check
from src.core.numerics import STREAM_MIX, make_rng
from src.core.trainer import TrainConfig
from src.core.vae_model import load_checkpoint
from src.data.dataset import NoiseMixSpec, binarize_dataset, export_mixed, load_idx, mix
from src.utils.errors import ConfigurationError, GradientCheckError, RvaeError
from src.utils.logger import logger, set_level


LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR')
GRADCHECK_STEPS = (1e-3, 1e-4, 1e-5)

EPILOG = """
Examples:
  # Mix one noise image per original image into MNIST
  python main.py make-noise --images data/train-images-idx3-ubyte --ratio 1:1 --out mixed-idx3-ubyte

  # Plain VAE baseline, then a robust run at log alpha = -50 on 2:1 noisy data
  python main.py train --objective elbo --ratio 2:1
  python main.py train --objective robust --log-alpha -50 --ratio 2:1

  # Repeat a run exactly
  python main.py train --manifest runs/20170301-120000_seed0/manifest.json

  # Desk-scale sweep, then redraw its chart
  python main.py sweep --base-config config/desk_scale.cfg --ratios 2:1 1:1 1:2 --log-alphas -50 -150 --seeds 0 1
  python main.py chart runs/sweep/sweep.csv
"""


def _ratio_arg(text: str) -> str:
    try:
        parse_ratio(text)
    except RvaeError as e:
        raise argparse.ArgumentTypeError(str(e))
    return text


def _mix_arg(text: str) -> NoiseMixSpec:
    try:
        return NoiseMixSpec.parse(text)
    except RvaeError as e:
        raise argparse.ArgumentTypeError(str(e))


def _dims_arg(text: str):
    parts = text.split(',')
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        dims = ()
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers I,H,L, got '{text}'")
    return dims


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got '{text}'")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def _add_training_overrides(parser: argparse.ArgumentParser, grid: bool = False):
    """Flags that override the training section of the config file"""
    group = parser.add_argument_group('training overrides')
    if not grid:
        group.add_argument('--objective', choices=['elbo', 'robust'])
        group.add_argument('--log-alpha', type=float, dest='log_alpha')
        group.add_argument('--seed', type=int)
    group.add_argument('--epochs', type=_positive_int)
    group.add_argument('--batch-size', type=_positive_int, dest='batch_size')
    group.add_argument('--lr', type=float)
    group.add_argument('--gamma', type=float)
    group.add_argument('--hidden', type=_positive_int)
    group.add_argument('--latent', type=_positive_int)
    group.add_argument('--eval-interval', type=_positive_int, dest='eval_interval')
    group.add_argument('--k', type=_positive_int, dest='eval_k', help='importance samples for evaluation')
    group.add_argument('--samples', type=_positive_int, help='reparametrization samples per example')
    group.add_argument('--elbo-estimator', choices=['analytic', 'sampled'], dest='elbo_estimator')
    group.add_argument('--eps-init', choices=['literal', 'scaled'], dest='eps_init')
    group.add_argument('--epoch-update', choices=['smoothed', 'hard', 'none'], dest='epoch_update')
    group.add_argument('--train-subset', type=_positive_int, dest='train_subset')
    group.add_argument('--test-subset', type=_positive_int, dest='test_subset')
    group.add_argument('--record-wall-time', action='store_const', const=True, default=None,
                       dest='record_wall_time')


OVERRIDE_FIELDS = (
    'objective', 'log_alpha', 'seed', 'epochs', 'batch_size', 'lr', 'gamma', 'hidden', 'latent',
    'eval_interval', 'eval_k', 'samples', 'elbo_estimator', 'eps_init', 'epoch_update',
    'train_subset', 'test_subset', 'record_wall_time',
)


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in OVERRIDE_FIELDS if getattr(args, name, None) is not None}


def _load_config(path: Optional[str]) -> Config:
    if path is None:
        return default_config
    if not os.path.isfile(path):
        raise FileNotFoundError(2, 'No such file or directory', path)
    return Config(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='rvae',
        description='Robust variational autoencoders: training, evaluation and noise experiments',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=EPILOG,
    )
    parser.add_argument('--log-level', type=str.upper, choices=LOG_LEVELS,
                        help='defaults to monitoring.log_level of the config')
    sub = parser.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True

    p = sub.add_parser('make-noise', help='mix constant-intensity noise images into an IDX file')
    p.add_argument('--images', required=True, help='input IDX3 file')
    p.add_argument('--ratio', required=True, type=_mix_arg, help='original:noise, e.g. 2:1')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--out', required=True, help='output IDX3 file (provenance sidecar written beside it)')
    p.set_defaults(handler=cmd_make_noise)

    p = sub.add_parser('train', help='train one model into a run directory')
    p.add_argument('--config', help='config.yaml or key=value file')
    p.add_argument('--manifest', help='repeat the run described by this manifest.json')
    p.add_argument('--train', help='training IDX3 file (default data.train_images)')
    p.add_argument('--test', help='test IDX3 file (default data.test_images)')
    p.add_argument('--no-test', action='store_true', help='skip evaluation')
    p.add_argument('--ratio', type=_ratio_arg, help="original:noise mixed into the training set, or 'clean'")
    p.add_argument('--mix-seed', type=int, dest='mix_seed', help='seed of the mixing shuffle (default --seed)')
    p.add_argument('--run-dir', dest='run_dir', help='exact output directory')
    p.add_argument('--out-dir', dest='out_dir', help='parent of <timestamp>_seed<N> (default output.dir)')
    _add_training_overrides(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', help='importance-sampled test log-likelihood of a checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--config', help='config.yaml or key=value file')
    p.add_argument('--test', help='test IDX3 file (default data.test_images)')
    p.add_argument('--k', type=_positive_int, help='importance samples (default evaluation.k)')
    p.add_argument('--seed', type=int, help='evaluation seed (default evaluation.seed)')
    p.add_argument('--subset', type=_positive_int, help='evaluate the first n test images')
    p.add_argument('--hidden', type=_positive_int, help='expected hidden units (default training.hidden)')
    p.add_argument('--latent', type=_positive_int, help='expected latent units (default training.latent)')
    p.add_argument('--estimator', choices=['iwae', 'elbo'], default='iwae')
    p.add_argument('--out', help='per-example CSV (default <checkpoint dir>/eval/test_ll.csv)')
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('gradcheck', help='finite-difference check of every backward pass')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--dims', type=_dims_arg, default=DEFAULT_DIMS, help='I,H,L (default 8,5,2)')
    p.add_argument('--h', type=float, default=DEFAULT_STEP, help='step size the verdict uses')
    p.add_argument('--corrupt-backward', action='store_true', help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('sweep', help='grid of runs over ratio x log alpha x seed')
    p.add_argument('--base-config', dest='base_config', help='config every run starts from')
    p.add_argument('--ratios', nargs='+', type=_ratio_arg, default=['2:1', '1:1', '1:2'])
    p.add_argument('--log-alphas', nargs='*', type=float, dest='log_alphas',
                   help='robust runs per cell (default training.log_alpha; empty for baselines only)')
    p.add_argument('--seeds', nargs='+', type=int, default=[0])
    p.add_argument('--no-baseline', action='store_true', help='skip the plain VAE runs')
    p.add_argument('--train', help='training IDX3 file (default data.train_images)')
    p.add_argument('--test', help='test IDX3 file (default data.test_images)')
    p.add_argument('--out-dir', dest='out_dir', help='sweep directory (default output.dir/sweep-<timestamp>)')
    p.add_argument('--jobs', type=_positive_int, default=1, help='worker processes')
    _add_training_overrides(p, grid=True)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('chart', help='redraw figure.svg from a sweep.csv')
    p.add_argument('csv', help='sweep.csv')
    p.add_argument('--out', help='SVG path (default figure.svg beside the CSV)')
    p.set_defaults(handler=cmd_chart)
    return parser


def cmd_make_noise(args: argparse.Namespace) -> int:
    original = load_idx(args.images)
    mixed = mix(original, args.ratio, make_rng(args.seed, STREAM_MIX))
    export_mixed(mixed, args.out)
    print(args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    if args.manifest:
        manifest = read_manifest(args.manifest)
        verify_inputs(manifest)
        train_config = manifest.train_config()
        train_images = manifest.train_images.path
        test_images = manifest.test_images.path if manifest.test_images else None
        ratio, mix_seed = manifest.ratio, manifest.mix_seed
        out_dir = args.out_dir or default_config.get('output.dir', 'runs')
    else:
        cfg = _load_config(args.config)
        train_config = TrainConfig.from_config(cfg, _overrides(args))
        train_images = args.train or cfg.get('data.train_images')
        test_images = None if args.no_test else (args.test or cfg.get('data.test_images'))
        ratio, mix_seed = args.ratio, args.mix_seed
        out_dir = args.out_dir or cfg.get('output.dir', 'runs')
    if not train_images:
        raise ConfigurationError("no training images: pass --train or set data.train_images")

    run_dir = args.run_dir or default_run_dir(out_dir, train_config.seed)
    outcome = execute_run(train_config, train_images, test_images, run_dir, ratio=ratio, mix_seed=mix_seed)
    if outcome.test_ll is not None:
        logger.info(f"Final test log-likelihood: {outcome.test_ll:.4f} nats")
    print(outcome.run_dir)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    test_images = args.test or cfg.get('data.test_images')
    k = args.k or cfg.get('evaluation.k', 200)
    seed = args.seed if args.seed is not None else cfg.get('evaluation.seed', 20170301)
    hidden = args.hidden or cfg.get('training.hidden', 200)
    latent = args.latent or cfg.get('training.latent', 50)

    test = load_idx(test_images)
    params = load_checkpoint(args.checkpoint, expected=(test.dim, int(hidden), int(latent)))
    eval_cfg = EvalConfig(K=int(k), seed=int(seed), subset=args.subset, estimator=args.estimator)
    result = evaluate(params, binarize_dataset(test.head(args.subset), eval_cfg.seed), eval_cfg,
                      checkpoint=args.checkpoint)

    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), 'eval', 'test_ll.csv')
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    export_metrics(result, out)
    print(f"{result.mean_ll:.6f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    steps = sorted(set(GRADCHECK_STEPS) | {args.h}, reverse=True)
    report = run_gradient_check(seed=args.seed, dims=args.dims, steps=steps,
                                corrupt=args.corrupt_backward, tolerance=TOLERANCE)
    print(f"{'objective':<15} {'h':>8} {'max_rel_err':>11}  worst_coordinate")
    for row in report.rows:
        print(f"{row.objective:<15} {row.h:>8.0e} {row.error:>11.3e}  {row.worst_coordinate}")
    worst = report.worst(args.h)
    print(f"max relative error at h={args.h:g}: {worst.error:.3e}")
    if not report.passed(args.h):
        print(f"worst coordinate: {worst.worst_coordinate} ({worst.objective})")
        raise GradientCheckError(
            f"relative error {worst.error:.3e} exceeds {TOLERANCE:g} in {worst.objective} "
            f"at {worst.worst_coordinate}",
            worst.worst_coordinate,
        )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_config(args.base_config)
    base = TrainConfig.from_config(cfg, _overrides(args))
    log_alphas = [base.log_alpha] if args.log_alphas is None else args.log_alphas
    train_images = args.train or cfg.get('data.train_images')
    test_images = args.test or cfg.get('data.test_images')
    out_dir = args.out_dir or os.path.join(
        cfg.get('output.dir', 'runs'), f"sweep-{datetime.now().strftime('%Y%m%d-%H%M%S')}"
    )
    jobs = plan_sweep(base, args.ratios, log_alphas, args.seeds, train_images, test_images,
                      out_dir, baseline=not args.no_baseline)
    if not jobs:
        raise ConfigurationError("sweep is empty: give --log-alphas or drop --no-baseline")
    run_sweep(jobs, out_dir, n_jobs=args.jobs)
    print(out_dir)
    return 0


def cmd_chart(args: argparse.Namespace) -> int:
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.csv)), FIGURE_FILE)
    print(write_sweep_chart(args.csv, out))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Parse arguments, run one subcommand and map errors to exit codes

    Args:
        argv: Arguments without the program name (defaults to sys.argv[1:])

    Returns:
        Process exit code
    """
    args = build_parser().parse_args(list(argv) if argv is not None else None)
    try:
        set_level(args.log_level or str(default_config.get('monitoring.log_level', 'INFO')))
        return args.handler(args)
    except RvaeError as e:
        logger.error(str(e).splitlines()[0])
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        where = e.filename or ''
        logger.error(f"{where}: {e.strerror or e}")
        print(f"error: {where}: {e.strerror or e}", file=sys.stderr)
        return 1
