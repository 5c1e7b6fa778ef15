"""
Command-line entry point: pre-train a score network, search a sampler,
draw samples, evaluate the sampler grid, and plot scatter panels.

    python cli.py train  --config configs/toy.toml
    python cli.py search --config configs/toy.toml --family ggdm --time --K 5
    python cli.py sample --sampler ddss:runs/toy/sampler_best.ckpt --n 1000
    python cli.py eval   --sampler ddpm --sampler ddim --sampler ddss:runs/toy/sampler_best.ckpt
    python cli.py plot   --K 5 --K 10
"""
from __future__ import annotations
import argparse
import logging
import os
import sys
from typing import Any, Dict, Optional, Sequence

import numpy as np

from checkpoints import load_model, save_model, save_sampler
from config import RunConfig, load_config
from utils.datasets import make_dataset, mixture_centers
from utils.ddss import build_feature_map, ddss_search
from utils.diffusion import NoiseSchedule, ScoreNetwork, make_schedule, train_ddpm
from utils.errors import DDSSError, FingerprintMismatchError, SearchDivergedError, TrainingDivergedError
from utils.evalharness import SamplerEntry, build_report, check_fingerprints
from utils.plotting import write_panels
from utils.samplers import sample_ggdm
from utils.trace_log import read_points, write_points, write_rows, write_trace, write_trajectory

logger = logging.getLogger('ddss')

# dataset seeds are offset from the run seed so the splits never overlap
TRAIN_OFFSET, VAL_OFFSET, EVAL_OFFSET = 0, 1, 2
LAST_GOOD_MODEL = 'model_last_good.ckpt'


def setup_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)


def _dataset(cfg: RunConfig, n: int, offset: int) -> np.ndarray:
    points, _ = make_dataset(cfg.data.kind, n, cfg.seed + offset, radius=cfg.data.radius, std=cfg.data.std,
                             n_modes=cfg.data.n_modes)
    return points


def _schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.kind, s.T, beta_min=s.beta_min, beta_max=s.beta_max,
                         logsnr_max=s.logsnr_max, logsnr_min=s.logsnr_min)


def _model(cfg: RunConfig, path: Optional[str]) -> tuple[ScoreNetwork, NoiseSchedule]:
    """EMA weights of the pre-trained model, checked against the configured schedule."""
    _, ema, schedule = load_model(path or os.path.join(cfg.out, 'model.ckpt'))
    expected = _schedule(cfg).fingerprint()
    if schedule.fingerprint() != expected:
        raise FingerprintMismatchError(expected, schedule.fingerprint(), 'model checkpoint')
    return ema, schedule


def _out(cfg: RunConfig, name: str) -> str:
    return os.path.join(cfg.out, name)


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    schedule = _schedule(cfg)
    train = _dataset(cfg, cfg.data.n_train, TRAIN_OFFSET)
    network = ScoreNetwork.init(train.shape[1], schedule.T, hidden=cfg.model.hidden, depth=cfg.model.depth,
                                time_dim=cfg.model.time_dim, seed=cfg.seed)
    try:
        result = train_ddpm(network, schedule, train, cfg.train, seed=cfg.seed, progress=args.progress)
    except TrainingDivergedError as e:
        if e.last_good is not None:
            e.saved_to = _out(cfg, LAST_GOOD_MODEL)
            save_model(e.saved_to, e.last_good, e.last_good, schedule, seed=cfg.seed, final_loss=e.loss)
        raise
    path = _out(cfg, 'model.ckpt')
    save_model(path, result.network, result.ema, schedule, seed=cfg.seed, final_loss=result.final_loss)
    write_rows(_out(cfg, 'train_loss.csv'), ('step', 'loss'), ((i + 1, v) for i, v in enumerate(result.losses)))
    print(f"[OK] final loss {result.final_loss:.6f}")
    print(f"[OK] wrote {path}")
    return 0


def cmd_search(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, schedule = _model(cfg, args.model)
    train = _dataset(cfg, cfg.data.n_train, TRAIN_OFFSET)
    val = _dataset(cfg, cfg.data.n_val, VAL_OFFSET)
    extra = {'config_hash': cfg.config_hash()}
    best, final = _out(cfg, 'sampler_best.ckpt'), _out(cfg, 'sampler_final.ckpt')
    try:
        result = ddss_search(model, schedule, cfg.search, train, val, progress=args.progress)
    except SearchDivergedError as e:
        if e.last_good is not None:
            e.saved_to = best
            save_sampler(best, e.last_good, seed=cfg.seed, extra={**extra, 'diverged_at': e.step})
        raise
    save_sampler(best, result.best, seed=cfg.seed, extra={**extra, 'step': result.best_step})
    save_sampler(final, result.final, seed=cfg.seed, extra={**extra, 'step': cfg.search.steps})
    write_trace(_out(cfg, 'search_trace.csv'), result.trace)
    if cfg.sampling.trajectory:
        batch = sample_ggdm(model, result.best, schedule, cfg.sampling.n, cfg.seed, trajectory=True)
        write_trajectory(_out(cfg, 'search_trajectory.csv'), batch.trajectory_arrays(), batch.timesteps)
    print(f"[OK] best val KID {result.best_val:.6f} at step {result.best_step}")
    print(f"[OK] wrote {best}, {final}")
    return 0


def cmd_sample(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, schedule = _model(cfg, args.model)
    text = cfg.sampling.sampler
    if text == 'ddim':
        text = f"ddim:{cfg.sampling.eta}"
    entry = SamplerEntry.parse(text, cfg.sampling.stride)
    check_fingerprints([entry], schedule)
    if entry.kind == 'ddss' and len(entry.params) == 1:
        K = next(iter(entry.params))
    else:
        K = entry.Ks([cfg.sampling.K])[0]
    batch = entry.batch(model, schedule, K, cfg.sampling.n, cfg.seed, trajectory=cfg.sampling.trajectory)
    path = _out(cfg, 'samples.csv')
    write_points(path, batch.samples)
    if cfg.sampling.trajectory:
        write_trajectory(_out(cfg, 'trajectory.csv'), batch.trajectory_arrays(), batch.timesteps)
    print(f"[OK] {batch.sampler} K={K}: wrote {len(batch.samples)} samples to {path}")
    return 0


def _real(cfg: RunConfig, path: Optional[str], n: int) -> np.ndarray:
    return read_points(path) if path else _dataset(cfg, n, EVAL_OFFSET)


def cmd_eval(cfg: RunConfig, args: argparse.Namespace) -> int:
    model, schedule = _model(cfg, args.model)
    entries = [SamplerEntry.parse(s, cfg.sampling.stride) for s in cfg.eval.samplers]
    real = _real(cfg, args.real, cfg.data.n_eval)
    train = _dataset(cfg, cfg.data.n_train, TRAIN_OFFSET)
    fmap = build_feature_map(cfg.eval.features, train, rff_dim=cfg.search.rff_dim, seed=cfg.seed)
    report = build_report(model, schedule, entries, cfg.eval.Ks, cfg.eval.seeds, cfg.eval.n_eval, real=real,
                          centers=mixture_centers(cfg.data.n_modes, cfg.data.radius), fmap=fmap,
                          coverage_radius=cfg.eval.radius, metadata={'config_hash': cfg.config_hash()})
    path = _out(cfg, 'report.csv')
    report.to_csv(path)
    print(f"[OK] wrote {len(report.rows)} report rows to {path}")
    return 0


def cmd_plot(cfg: RunConfig, args: argparse.Namespace) -> int:
    n = cfg.plot.n
    real = _real(cfg, args.real, n)[:n]
    panels = [('real', real)]
    if args.points:
        panels += [(os.path.splitext(os.path.basename(p))[0], read_points(p)) for p in args.points]
    else:
        model, schedule = _model(cfg, args.model)
        entries = [SamplerEntry.parse(s, cfg.sampling.stride) for s in cfg.plot.samplers]
        check_fingerprints(entries, schedule)
        for entry in entries:
            for K in entry.Ks(cfg.plot.Ks):
                panels.append((f"{entry.name} K={K}", entry.sample(model, schedule, K, n, cfg.seed)))
    path = write_panels(_out(cfg, 'panels.svg'), panels, config_hash=cfg.config_hash())
    print(f"[OK] wrote {len(panels)} panels to {path}")
    return 0


HANDLERS = {'train': cmd_train, 'search': cmd_search, 'sample': cmd_sample, 'eval': cmd_eval, 'plot': cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog='ddss', description='Differentiable diffusion sampler search on 2D toy data.')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, default=None, help='TOML or JSON run configuration.')
    common.add_argument('--out', type=str, default=None, help='Output directory.')
    common.add_argument('--seed', type=int, default=None)
    common.add_argument('-v', '--verbose', action='store_true')
    common.add_argument('--quiet', action='store_true')
    common.add_argument('--no-progress', action='store_true', help='Hide progress bars.')
    sub = ap.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', parents=[common], help='Pre-train the score network.')
    p.add_argument('--steps', type=int, default=None)

    p = sub.add_parser('search', parents=[common], help='Search sampler parameters.')
    p.add_argument('--model', type=str, default=None, help='Model checkpoint (default: OUT/model.ckpt).')
    p.add_argument('--K', type=int, default=None)
    p.add_argument('--family', choices=['ddim', 'vars', 'ggdm', 'ggdm_pred'], default=None)
    p.add_argument('--time', action=argparse.BooleanOptionalAction, default=None, help='Also learn timesteps.')
    p.add_argument('--steps', type=int, default=None)
    p.add_argument('--kernel', choices=['linear', 'cubic'], default=None)
    p.add_argument('--features', type=str, default=None, help='identity, rff or file:PATH')
    p.add_argument('--stride', choices=['linear', 'quadratic', 'learned'], default=None)
    p.add_argument('--trajectory', action='store_true', default=None)

    p = sub.add_parser('sample', parents=[common], help='Draw samples from one sampler.')
    p.add_argument('--model', type=str, default=None)
    p.add_argument('--sampler', type=str, default=None, help='ddpm, ddim[:ETA] or ddss:PATH')
    p.add_argument('--K', type=int, default=None)
    p.add_argument('--stride', choices=['linear', 'quadratic'], default=None)
    p.add_argument('--eta', type=float, default=None)
    p.add_argument('--n', type=int, default=None)
    p.add_argument('--trajectory', action='store_true', default=None)

    for name, text in (('eval', 'Write the sampler comparison report.'), ('plot', 'Write SVG scatter panels.')):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument('--model', type=str, default=None)
        p.add_argument('--sampler', action='append', default=None, help='Repeatable; replaces the configured list.')
        p.add_argument('--K', action='append', type=int, default=None, help='Repeatable.')
        p.add_argument('--stride', choices=['linear', 'quadratic'], default=None)
        p.add_argument('--real', type=str, default=None, help='CSV of reference points.')
    sub.choices['plot'].add_argument('--points', action='append', default=None, help='Plot these CSVs instead of sampling.')
    sub.choices['eval'].add_argument('--seeds', type=int, nargs='+', default=None)
    sub.choices['eval'].add_argument('--features', type=str, default=None)
    return ap


def overrides_for(args: argparse.Namespace) -> Dict[str, Any]:
    """Map command-line flags onto dotted config keys."""
    cmd = args.command
    get = lambda name: getattr(args, name, None)  # noqa: E731
    out: Dict[str, Any] = {'seed': args.seed, 'out': args.out}
    if cmd == 'train':
        out['train.steps'] = get('steps')
    elif cmd == 'search':
        out.update({'search.K': get('K'), 'search.family': get('family'), 'search.time': get('time'),
                    'search.steps': get('steps'), 'search.kernel': get('kernel'),
                    'search.features': get('features'), 'search.stride': get('stride'),
                    'sampling.trajectory': get('trajectory')})
    elif cmd == 'sample':
        out.update({'sampling.sampler': get('sampler'), 'sampling.K': get('K'), 'sampling.stride': get('stride'),
                    'sampling.eta': get('eta'), 'sampling.n': get('n'), 'sampling.trajectory': get('trajectory')})
    else:
        out.update({f'{cmd}.samplers': get('sampler'), f'{cmd}.Ks': get('K'), 'sampling.stride': get('stride')})
        if cmd == 'eval':
            out.update({'eval.seeds': get('seeds'), 'eval.features': get('features')})
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose, args.quiet)
    args.progress = not (args.no_progress or args.quiet) and sys.stderr.isatty()
    try:
        cfg = load_config(args.config, overrides_for(args))
        cfg.write_resolved(cfg.out)
        logger.info("%s: config %s -> %s", args.command, cfg.config_hash(), cfg.out)
        return HANDLERS[args.command](cfg, args)
    except DDSSError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return 4


if __name__ == '__main__':
    sys.exit(main())
