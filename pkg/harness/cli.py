"""
Single entry point over the harness management commands.

    python -m harness.cli gen-corpus --seed 7 --out c.bin

Exit status: 0 on success, 1 when an experiment's checks fail or a library
error occurs, 2 on usage errors (including an unknown subcommand).
"""

import os
import sys
from typing import List, Optional, Sequence

SUBCOMMANDS = {
    'gen-corpus': 'gen_corpus',
    'train': 'train',
    'embed': 'embed',
    'index': 'index',
    'search': 'search',
    'generate': 'generate',
    'equivalence': 'equivalence',
    'contamination': 'contamination',
    'efficiency': 'efficiency',
    'ablate': 'ablate',
    'eval-retrieval': 'eval_retrieval',
}

USAGE = (
    "usage: hydra <subcommand> [--seed N] [--config PATH] [--out PATH] [options]\n"
    "subcommands: " + ', '.join(SUBCOMMANDS) + "\n"
    "run 'hydra <subcommand> --help' for the options of one subcommand\n"
)


def cli(argv: Sequence[str]) -> int:
    argv = list(argv)
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv and argv[0] not in ('-h', '--help'):
            sys.stderr.write(f"unknown subcommand: {argv[0]}\n")
        sys.stderr.write(USAGE)
        return 2

    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'hydra_lab.settings')
    import django
    from django.core.management import load_command_class

    django.setup()
    name = SUBCOMMANDS[argv[0]]
    command = load_command_class('harness', name)
    try:
        command.run_from_argv(['hydra', name] + argv[1:])
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 1
    return 0


def main(argv: Optional[List[str]] = None):
    sys.exit(cli(sys.argv[1:] if argv is None else argv))


if __name__ == '__main__':
    main()
