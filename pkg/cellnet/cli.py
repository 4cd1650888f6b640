'''
cellnet command line.

    python -m cellnet.cli synth OUT_DIR [--classes 6 --per-class 100 --seed 0 ...]
    python -m cellnet.cli preprocess --manifest M --out DIR
    python -m cellnet.cli augment --manifest M --out DIR [--angle-step 9]
    python -m cellnet.cli train [--config C] [--manifest M] [--set key.path=value ...]
    python -m cellnet.cli finetune --snapshot S --manifest M [--compare-scratch]
    python -m cellnet.cli eval --models S1 S2 ... --manifest M --out DIR
    python -m cellnet.cli predict --models S1 ... --input DIR_OR_CSV --out FILE
    python -m cellnet.cli sweep --manifest M [--angle-steps 360 36 18 9] [--with-align]
    python -m cellnet.cli export-filters --model S --layer 1 --out DIR

Success prints one JSON document on stdout and exits 0. Failure prints one
JSON line {"error": <error class>, "detail": ..., "status": "error"} on
stderr and exits 1 (2 for malformed arguments).
'''
import argparse
import json
import sys

from pydantic import ValidationError

from cellnet.errors import CellNetError
from cellnet.models.records import ErrorResponse
from cellnet.routers import commands
from config.config import setup_logging

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error('usage_error', message)
        sys.exit(EXIT_USAGE)


def _emit_error(error_class: str, detail: str):
    sys.stderr.write(ErrorResponse(error=error_class, detail=detail).model_dump_json() + '\n')


def _add_config_args(p):
    p.add_argument('--config', dest='config_path', help='Run config JSON (default: CELLNET_DEFAULT_CONFIG)')
    p.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                   help='Override a config value, e.g. trainer.max_epochs=10 (repeatable)')


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='cellnet', description='HEp-2 cell CNN engine')
    parser.add_argument('--log-level', default=None, help='DEBUG, INFO, WARNING, ...')
    sub = parser.add_subparsers(dest='command', required=True, parser_class=_Parser)

    p = sub.add_parser('synth', help='Write a synthetic cell corpus')
    p.add_argument('out_dir')
    p.add_argument('--classes', type=int, default=6)
    p.add_argument('--per-class', type=int, default=100)
    p.add_argument('--size', type=int, default=78)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--orientation-range', type=float, default=360.0)
    p.add_argument('--domain-shift', type=float, default=0.0)
    p.add_argument('--channel-mode', choices=['grayscale', 'green'], default='grayscale')

    for name, text in (('preprocess', 'Normalize and resize a manifest'),
                       ('augment', 'Write rotation-augmented images of a manifest')):
        p = sub.add_parser(name, help=text)
        _add_config_args(p)
        p.add_argument('--manifest')
        p.add_argument('--out', dest='out_dir', required=True)
        if name == 'augment':
            p.add_argument('--angle-step', type=float)

    p = sub.add_parser('train', help='Train, snapshot, evaluate and report')
    _add_config_args(p)
    p.add_argument('--manifest')
    p.add_argument('--plots', action='store_true', help='Also write plotly HTML figures')

    p = sub.add_parser('finetune', help='Fine-tune a snapshot on a second corpus')
    _add_config_args(p)
    p.add_argument('--snapshot', required=True)
    p.add_argument('--manifest')
    p.add_argument('--compare-scratch', action='store_true', help='Also train a fresh network for the same epochs')
    p.add_argument('--plots', action='store_true')

    p = sub.add_parser('eval', help='Ensemble evaluation of a labeled manifest')
    _add_config_args(p)
    p.add_argument('--models', nargs='+', required=True)
    p.add_argument('--manifest')
    p.add_argument('--out', dest='out_dir', required=True)
    p.add_argument('--plots', action='store_true')

    p = sub.add_parser('predict', help='Per-image probabilities for unlabeled images')
    _add_config_args(p)
    p.add_argument('--models', nargs='+', required=True)
    p.add_argument('--input', required=True, help='Image directory or CSV with id,image[,mask]')
    p.add_argument('--out', required=True)

    p = sub.add_parser('sweep', help='Augmentation (and alignment) grid of train+eval runs')
    _add_config_args(p)
    p.add_argument('--manifest')
    p.add_argument('--angle-steps', nargs='+', type=float, default=[360.0, 36.0, 18.0, 9.0])
    p.add_argument('--with-align', action='store_true')

    p = sub.add_parser('export-filters', help='Write convolution filters as images and CSV')
    p.add_argument('--model', required=True)
    p.add_argument('--layer', type=int, default=1, help='1-based convolution index')
    p.add_argument('--out', dest='out_dir', required=True)
    return parser


HANDLERS = {
    'synth': (commands.SynthRequest, commands.synth),
    'preprocess': (commands.ProcessRequest, commands.preprocess),
    'augment': (commands.ProcessRequest, commands.augment),
    'train': (commands.TrainRequest, commands.train),
    'finetune': (commands.FinetuneRequest, commands.finetune),
    'eval': (commands.EvalRequest, commands.evaluate),
    'predict': (commands.PredictRequest, commands.predict),
    'sweep': (commands.SweepRequest, commands.sweep),
    'export-filters': (commands.ExportFiltersRequest, commands.export_filters),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    request_model, handler = HANDLERS[args.command]
    fields = {k: v for k, v in vars(args).items() if k not in ('command', 'log_level')}
    try:
        response = handler(request_model(**fields))
    except ValidationError as e:
        first = e.errors()[0]
        _emit_error('usage_error', f"{'.'.join(str(p) for p in first['loc'])}: {first['msg']}")
        return EXIT_USAGE
    except CellNetError as e:
        _emit_error(e.error_class, e.detail)
        return EXIT_FAILURE
    sys.stdout.write(json.dumps(response, indent=2, default=str) + '\n')
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
