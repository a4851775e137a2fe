#!/usr/bin/env python3
"""
Command line interface for PyAVSep
"""

import argparse
import dataclasses
import logging
import sys

from . import __version__
from .config import TrainConfig, resolve_config
from .core import TAU_SWEEP, PyAVSep
from .corpus import SPLITS, CorpusConfig
from .gradcheck import run_gradcheck_suite


def _field_type(f: dataclasses.Field):
    if f.default is None:
        return int
    return type(f.default)


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    """--config plus one --<field> override per TrainConfig field"""
    parser.add_argument('--config', help='JSON config file (keys mirror TrainConfig)')
    group = parser.add_argument_group('config overrides')
    for f in dataclasses.fields(TrainConfig):
        option = f"--{f.name.replace('_', '-')}"
        if isinstance(f.default, tuple):
            group.add_argument(option, dest=f.name, type=int, nargs='*', default=None, metavar='CLASS',
                               help='class ids (default: none)')
            continue
        group.add_argument(option, dest=f.name, type=_field_type(f), default=None,
                           help=f"default: {'from preset' if f.default is None else f.default}")


def _overrides(args: argparse.Namespace):
    return {f.name: getattr(args, f.name, None) for f in dataclasses.fields(TrainConfig)}


def _parse_models(specs, default_checkpoint: str):
    """NAME=PATH pairs; a bare PATH is named after its position"""
    if not specs:
        return {"model": default_checkpoint}
    models = {}
    for index, spec in enumerate(specs):
        name, sep, path = spec.partition('=')
        if not sep:
            name, path = f"model{index}", spec
        if name in models:
            raise ValueError(f"model name '{name}' given twice")
        models[name] = path
    return models


def _split_counts(values, default):
    return default if values is None else dict(zip(SPLITS, values))


def main():
    parser = argparse.ArgumentParser(
        description="PyAVSep - audio-visual sound source detection and separation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the desk-scale synthetic corpus
  pyavsep synth --corpus-dir corpus --workers 4

  # Train with ratio masks and save model.ckpt (+ model.ckpt.json)
  pyavsep train --corpus-dir corpus --mask-kind ratio --checkpoint model.ckpt

  # Separate one mixture given the frames of its two clips
  pyavsep separate -f a.ppm -f b.ppm -m mix.wav -o separated --checkpoint model.ckpt

  # SDR/SIR/SAR of two models against the mixture baseline
  pyavsep eval-sep -M binary=binary.ckpt -M ratio=ratio.ckpt --output-dir results

  # Unseen objects: train without classes 2 and 3, then score them separately
  pyavsep train --held-out-classes 2 3 --checkpoint unseen.ckpt
  pyavsep eval-sep -M unseen=unseen.ckpt --output-dir results_unseen

  # Classification accuracy over the tau sweep
  pyavsep eval-cls -M model.ckpt

  # Ideal-mask upper bounds
  pyavsep oracle --corpus-dir corpus

  # Finite-difference gradient checks (64-bit)
  pyavsep gradcheck
        """
    )
    parser.add_argument('-v', '--version', action='version', version=f'PyAVSep {__version__}')
    parser.add_argument('--verbose', action='count', default=0, help='More log output (repeat for debug)')
    parser.add_argument('-q', '--quiet', action='store_true', help='Only errors, no progress bars')

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    # Synth command
    synth_parser = subparsers.add_parser('synth', help='Generate the synthetic corpus')
    _add_config_options(synth_parser)
    synth_parser.add_argument('--workers', type=int, default=1, help='Generation threads')
    synth_parser.add_argument('--overwrite', action='store_true', help='Write into a non-empty directory')
    synth_parser.add_argument('--solos', type=int, nargs=3, metavar=('TRAIN', 'VAL', 'TEST'),
                              help='Solo clips per class in each split')
    synth_parser.add_argument('--duets', type=int, nargs=3, metavar=('TRAIN', 'VAL', 'TEST'),
                              help='Duet clips in each split')

    # Train command
    train_parser = subparsers.add_parser('train', help='Train a model with mix-and-separate')
    _add_config_options(train_parser)

    # Separate command
    separate_parser = subparsers.add_parser('separate', help='Separate one mixture into per-object WAVs')
    _add_config_options(separate_parser)
    separate_parser.add_argument('-f', '--frame', action='append', required=True, help='Frame image (repeatable)')
    separate_parser.add_argument('-m', '--mixture', required=True, help='Mixture WAV file')
    separate_parser.add_argument('-o', '--output', default='separated', help='Output directory')

    # Eval-sep command
    eval_sep_parser = subparsers.add_parser('eval-sep', help='BSS-eval metrics on test mixtures')
    _add_config_options(eval_sep_parser)
    eval_sep_parser.add_argument('-M', '--model', action='append', help='NAME=CHECKPOINT (repeatable)')

    # Eval-cls command
    eval_cls_parser = subparsers.add_parser('eval-cls', help='Multi-label classification accuracy per tau')
    _add_config_options(eval_cls_parser)
    eval_cls_parser.add_argument('-M', '--model', action='append', help='NAME=CHECKPOINT (repeatable)')
    eval_cls_parser.add_argument('--taus', type=float, nargs='+', default=list(TAU_SWEEP), help='Thresholds')

    # Oracle command
    oracle_parser = subparsers.add_parser('oracle', help='Ideal-mask separation upper bounds')
    _add_config_options(oracle_parser)

    # Gradcheck command
    gradcheck_parser = subparsers.add_parser('gradcheck', help='Run the finite-difference gradient checks')
    gradcheck_parser.add_argument('--seed', type=int, default=0, help='Seed for test points')

    args = parser.parse_args()

    if not args.command:
        parser.print_help()
        sys.exit(1)

    level = logging.ERROR if args.quiet else (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s: %(message)s")
    progress = not args.quiet and sys.stderr.isatty()

    try:
        if args.command == 'gradcheck':
            print("Running gradient checks (64-bit)...")
            results = run_gradcheck_suite(args.seed)
            failed = [r for r in results if not r.passed]
            for r in failed:
                print(f"FAILED {r.name}: relative error {r.error:.3g} >= {r.tolerance:g}")
            worst = max(results, key=lambda r: r.error)
            print(f"Ran {len(results)} checks, worst {worst.name} at {worst.error:.3g}")
            if failed:
                print(f"Error: {len(failed)} gradient checks failed", file=sys.stderr)
                sys.exit(1)
            print("PyAVSep completed successfully!")
            return

        config = resolve_config(args.config, _overrides(args))
        pyavsep = PyAVSep(config)

        if args.command == 'synth':
            defaults = CorpusConfig()
            corpus_config = CorpusConfig(config.preset, config.num_classes,
                                         _split_counts(args.solos, defaults.solos_per_class),
                                         _split_counts(args.duets, defaults.duets), config.seed)
            print(f"Generating {len(corpus_config.clip_plan())} clips in {config.corpus_dir}...")
            entries = pyavsep.synthesize(overwrite=args.overwrite, workers=args.workers,
                                         corpus_config=corpus_config, progress=progress)
            for split in SPLITS:
                print(f"  {split}: {sum(1 for e in entries if e.split == split)} clips")

        elif args.command == 'train':
            print("Loading corpus...")
            dataset = pyavsep.load_dataset()
            print(f"Loaded {len(dataset)} clips")
            if config.held_out_classes:
                print(f"Holding out classes {list(config.held_out_classes)} from training")
            print(f"Training {config.steps} steps ({config.mask_kind} masks, preset {config.preset})...")
            _, history = pyavsep.train(progress)
            print(f"Final losses: c1 {history[-1].c_loss_1:.4f}  c2 {history[-1].c_loss_2:.4f}  "
                  f"sep {history[-1].sep_loss:.4f}")
            print(f"Saved checkpoint to {config.checkpoint}")

        elif args.command == 'separate':
            print(f"Separating {args.mixture}...")
            result = pyavsep.separate_files(config.checkpoint, args.frame, args.mixture, args.output)
            if result.status == 'no_objects':
                print(f"No objects detected at tau={config.tau}")
            for source in result.sources:
                print(f"  frame {source.frame_index}: class {source.class_id}")
            print(f"Wrote results to {args.output}")

        elif args.command == 'eval-sep':
            models = _parse_models(args.model, config.checkpoint)
            print(f"Evaluating {', '.join(models)} on {config.eval_pairs} test mixtures...")
            report = pyavsep.evaluate_separation(models, progress)
            for key, values in report.summary().items():
                print(f"  {key}: SDR {values['SDR']:.2f}  SIR {values['SIR']:.2f}  SAR {values['SAR']:.2f}")
            for name, recall in report.detection_recall.items():
                print(f"  {name}: detection recall {recall:.3f}")
            print(f"Saved reports to {config.output_dir}")

        elif args.command == 'eval-cls':
            models = _parse_models(args.model, config.checkpoint)
            print(f"Classifying test clips with {', '.join(models)}...")
            table = pyavsep.evaluate_classification(models, args.taus)
            for name, row in table.items():
                print(f"  {name}: " + "  ".join(f"{tau:g}={acc:.3f}" for tau, acc in row.items()))
            print(f"Saved classification.csv to {config.output_dir}")

        elif args.command == 'oracle':
            print(f"Scoring ideal masks on {config.eval_pairs} test mixtures...")
            report = pyavsep.oracle(progress)
            for key, values in report.summary().items():
                print(f"  {key}: SDR {values['SDR']:.2f}  SIR {values['SIR']:.2f}  SAR {values['SAR']:.2f}")

        print("PyAVSep completed successfully!")

    except FileNotFoundError as e:
        print(f"Error: File not found - {e}", file=sys.stderr)
        sys.exit(1)
    except Exception as e:
        print(f"Error: {e}", file=sys.stderr)
        sys.exit(1)


if __name__ == '__main__':
    main()
