import argparse
import os
import sys
import traceback
from datetime import datetime

import dataset
from clustering import TechniqueLabels
from errors import DataError, EstimatorError, GradientCheckError, UsageError
from harness import (SPLITS, TrainedEstimator, archive_report, cluster_techniques, disentanglement_report,
                     evaluate, gradcheck_suite, k_selection_report, list_archives, read_report, render_text,
                     run_ablation, train_estimator, write_report)
from invariance import export_embeddings, load_checkpoint, save_checkpoint
from settings import MODES, PRESET_DURATIONS, VARIANTS, Settings, load_settings

# Set up proper Unicode handling for Windows console
if sys.platform.startswith('win'):
    import codecs
    sys.stdout = codecs.getwriter('utf-8')(sys.stdout.buffer, 'strict')
    sys.stderr = codecs.getwriter('utf-8')(sys.stderr.buffer, 'strict')


BANNER = '''
    Invariant State Estimator
        ~~~[ s_t ]~~~
'''


class UsageParser(argparse.ArgumentParser):
    """Reports bad command lines as UsageError (exit 1) instead of exiting"""

    def error(self, message):
        raise UsageError(f'{self.prog}: {message}')


class EstimatorApp:
    def __init__(self, settings: Settings, verbose: bool = True):
        self.settings = settings
        self.verbose = verbose

    def dispatch(self, args) -> int:
        handler = getattr(self, 'cmd_' + args.command.replace('-', '_'))
        if self.verbose:
            print(BANNER)
            print(f'Command: {args.command}  (seed {self.settings.seed}, mode {self.settings.mode}, '
                  f'variant {self.settings.variant})')
            print('=' * 50)
        handler(args)
        return 0

    # -- helpers ----------------------------------------------------------

    def _trials(self, args):
        if not args.data:
            raise UsageError(f'{args.command} needs --data <dataset directory>')
        trials = dataset.load(args.data)
        self._say(f'Loaded {len(trials)} trials from {args.data}')
        return trials

    def _checkpoint(self, args) -> TrainedEstimator:
        if not args.checkpoint:
            raise UsageError(f'{args.command} needs --checkpoint <model.npz>')
        model, pipeline, _ = load_checkpoint(args.checkpoint)
        if pipeline is None:
            raise DataError(f'{args.checkpoint}: checkpoint holds no feature pipeline')
        self._say(f'Loaded {model.kind.upper()} {model.mode} model from {args.checkpoint}')
        return TrainedEstimator(pipeline, model)

    def _emit(self, report, kind: str, out: str = None) -> str:
        path = write_report(report, out) if out else archive_report(report, kind, self.settings.archives_dir)
        self._say(f'\nReport saved to {path}')
        return path

    def _say(self, text: str):
        if self.verbose:
            print(text)

    # -- commands ---------------------------------------------------------

    def cmd_generate(self, args):
        if not args.out:
            raise UsageError('generate needs --out <dataset directory>')
        d = self.settings.data
        self._say(f'Generating {d.n_trials} trials: {d.n_states} states, {d.n_techniques} techniques, '
                  f'{d.n_users} users (preset {d.preset})...')
        trials = dataset.generate_from_settings(d, self.settings.seed, self.settings.cluster.workers)
        dataset.save(trials, args.out, config=self.settings.echo(), seed=self.settings.seed)
        frames = sum(t.length for t in trials)
        self._say(f'Saved to {args.out}')
        self._say('\nDataset Stats:')
        self._say(f'  Trials: {len(trials)}')
        self._say(f'  Frames: {frames} ({frames / d.rate:.1f} s at {d.rate:g} Hz)')
        self._say(f'  Streams: ' + ', '.join(f'{k}={v}' for k, v in trials[0].dims().items()))

    def cmd_cluster(self, args):
        trials = self._trials(args)
        settings = self.settings.with_values(fixed_k=args.k) if args.k is not None else self.settings
        self._say('Computing pairwise DTW distances and clustering techniques...')
        labels, selection = cluster_techniques(trials, settings)
        if selection is not None:
            self._say(f'Chosen k = {labels.k} by mean silhouette (elbow at k = {selection.elbow_k})')
        self._say(f'k = {labels.k}, inertia {labels.inertia:.6g}, silhouette {labels.silhouette}')
        if args.out:
            labels.save(args.out)
            self._say(f'\nTechnique labels saved to {args.out}')
        else:
            self._emit(labels.to_dict(), 'technique-labels')

    def cmd_select_k(self, args):
        trials = self._trials(args)
        report = k_selection_report(trials, self.settings).to_dict()
        self._say(render_text({key: report[key] for key in
                               ('ks', 'normalized_inertia', 'silhouette', 'chosen_k', 'elbow_k', 'ari')}))
        self._emit(report, 'k-selection', args.out)

    def cmd_train(self, args):
        trials = self._trials(args)
        labels = TechniqueLabels.load(args.labels) if args.labels else None
        s = self.settings
        self._say(f'Training {s.variant.upper()} ({s.mode}) on {len(trials)} trials for {s.train.epochs} epochs...')
        run = train_estimator(trials, s, technique_labels=labels, verbose=self.verbose)
        out = args.out or os.path.join(s.archives_dir,
                                       f'model_{s.variant}_{datetime.now().strftime("%Y%m%d_%H%M%S")}.npz')
        save_checkpoint(out, run.estimator.model, run.estimator.pipeline, s.echo())
        self._say(f'Final P1 loss {run.trace.p1[-1]:.6g}, P2 loss {run.trace.p2[-1]:.6g}')
        if run.technique_labels is not None:
            self._say(f'Technique clusters: k = {run.technique_labels.k}')
        self._say(f'\nCheckpoint saved to {out}')

    def cmd_evaluate(self, args):
        estimator = self._checkpoint(args)
        trials = self._trials(args)
        report = evaluate(estimator, trials, mode=args.mode, seed=self.settings.seed,
                          config=self.settings.echo())
        self._say(f'Frame-wise accuracy: {report.mean_accuracy:.6g}% over {int(report.confusion.sum())} frames')
        self._emit(report.to_dict(), 'evaluation', args.out)

    def cmd_ablate(self, args):
        trials = self._trials(args)
        report = run_ablation(trials, self.settings, split=args.split, folds=args.folds, verbose=self.verbose)
        self._say('\nAblation Summary:')
        for variant, result in report.reports.items():
            self._say(f'  {variant.upper():4s} {result.mean_accuracy:.6g} +/- {result.std_accuracy:.6g}')
        for name, delta in report.deltas.items():
            self._say(f'  {name}: {delta:+.6g}')
        self._emit(report.to_dict(), 'ablation', args.out)

    def cmd_gradcheck(self, args):
        self._say('Checking analytic gradients against central differences...\n')
        failed = []
        for name, result in gradcheck_suite(self.settings.seed):
            status = 'OK' if result.passed else 'FAILED'
            print(f'  {name:24s} worst rel. error {result.worst():.3e}  {status}')
            if not result.passed:
                failed.append(name)
        if failed:
            raise GradientCheckError(f'gradient check failed for {", ".join(failed)}', failed)
        self._say('\nAll gradient checks passed')

    def cmd_export_embeddings(self, args):
        estimator = self._checkpoint(args)
        trials = self._trials(args)
        features = [estimator.features(t) for t in trials]
        records = export_embeddings(estimator.model, [t.trial_id for t in trials], features,
                                    [t.states for t in trials])
        report = {'format': 'embeddings', 'version': 1, 'records': [r.to_dict() for r in records]}
        if len({r.state for r in records}) >= 2:
            summary = disentanglement_report(estimator, trials, features)
            report['disentanglement'] = summary.to_dict()
            self._say(f'Silhouette by state: e1 {summary.silhouette_e1:.6g}, e2 {summary.silhouette_e2:.6g}')
        self._say(f'{len(records)} state instances exported')
        self._emit(report, 'embeddings', args.out)

    def cmd_report(self, args):
        if not args.path:
            archived = list_archives(self.settings.archives_dir)
            if not archived:
                print(f'No reports archived in {self.settings.archives_dir}/')
            for path in archived:
                print(f'  {path}')
            return
        print(render_text(read_report(args.path)))


def build_parser() -> argparse.ArgumentParser:
    common = UsageParser(add_help=False)
    common.add_argument('--config', help='dotenv-format configuration file')
    common.add_argument('--seed', type=int)
    common.add_argument('--out', help='output path (default: archive under ARCHIVES_DIR)')
    common.add_argument('--mode', choices=MODES)
    common.add_argument('--variant', choices=VARIANTS)
    common.add_argument('--quiet', action='store_true', help='only print errors and tables')

    parser = UsageParser(prog='main.py', description='Nuisance-invariant state estimation for multi-stream trials')
    commands = parser.add_subparsers(dest='command', required=True)

    generate = commands.add_parser('generate', parents=[common], help='synthesize a dataset directory')
    generate.add_argument('--states', type=int)
    generate.add_argument('--techniques', type=int)
    generate.add_argument('--users', type=int)
    generate.add_argument('--trials', type=int)
    generate.add_argument('--noise', type=float)
    generate.add_argument('--preset', choices=sorted(PRESET_DURATIONS))

    for name, text in (('cluster', 'label trial techniques by DTW k-medoids'),
                       ('select-k', 'inertia and silhouette per number of clusters'),
                       ('train', 'train one variant and save a checkpoint'),
                       ('evaluate', 'frame-wise evaluation of a checkpoint'),
                       ('ablate', 'NA / NO / FULL on identical folds'),
                       ('export-embeddings', 'per-instance mean e1/e2 embeddings')):
        sub = commands.add_parser(name, parents=[common], help=text)
        sub.add_argument('--data', help='dataset directory')
        if name == 'cluster':
            sub.add_argument('--k', type=int, help='fixed number of clusters')
        if name == 'train':
            sub.add_argument('--labels', help='technique label file from the cluster command')
        if name in ('evaluate', 'export-embeddings'):
            sub.add_argument('--checkpoint', help='model checkpoint (.npz)')
        if name == 'ablate':
            sub.add_argument('--split', choices=SPLITS, default='louo')
            sub.add_argument('--folds', type=int, default=5, help='number of folds for --split kfold')

    commands.add_parser('gradcheck', parents=[common], help='finite-difference gradient checks')
    report = commands.add_parser('report', parents=[common], help='render a saved report')
    report.add_argument('path', nargs='?')
    return parser


_OVERRIDES = {
    'seed': 'SEED', 'mode': 'MODE', 'variant': 'VARIANT', 'states': 'N_STATES', 'techniques': 'N_TECHNIQUES',
    'users': 'N_USERS', 'trials': 'N_TRIALS', 'noise': 'NOISE_SIGMA', 'preset': 'PRESET',
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        overrides = {key: getattr(args, attr) for attr, key in _OVERRIDES.items() if getattr(args, attr, None) is not None}
        settings = load_settings(args.config, overrides)
        return EstimatorApp(settings, verbose=not args.quiet).dispatch(args)
    except EstimatorError as error:
        print(f'Error: {error}')
        return error.exit_code
    except Exception as error:
        print(f'Application error: {error}')
        traceback.print_exc()
        return 1


if __name__ == '__main__':
    sys.exit(main())
