#!/usr/bin/env python3
from __future__ import annotations

import argparse
import subprocess
import sys
from pathlib import Path


def run(cmd: list[str]) -> None:
    print('[CMD]', ' '.join(cmd))
    result = subprocess.run(cmd)
    if result.returncode != 0:
        raise SystemExit(result.returncode)


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description='Bateria de mesa: grad-check, execução base, comparação e ablações')
    parser.add_argument('--config', default='configs/desk_default.yaml')
    parser.add_argument('--out', default='runs/desk')
    parser.add_argument('--seeds', default='0,1,2', help='Seeds separadas por vírgula')
    parser.add_argument('--alphas', default='0.1,0.5,100', help='Concentrações Dirichlet para compare')
    parser.add_argument('--skip-ablations', action='store_true')
    return parser.parse_args()


def main() -> None:
    args = parse_args()

    fedmim = [sys.executable, '-m', 'fedmim']
    out = Path(args.out)
    seeds = args.seeds.split(',')
    alphas = args.alphas.split(',')

    run([*fedmim, 'gradcheck', '--config', args.config, '--out', str(out / 'gradcheck')])
    run([*fedmim, 'run', '--config', args.config, '--out', str(out / 'base')])
    run([
        *fedmim, 'compare',
        '--config', args.config,
        '--out', str(out / 'compare'),
        '--alphas', *alphas,
        '--seeds', *seeds,
    ])

    if args.skip_ablations:
        return

    run([*fedmim, 'ablate-mask', '--config', args.config, '--out', str(out / 'mask'), '--seeds', *seeds])
    run([*fedmim, 'ablate-labels', '--config', args.config, '--out', str(out / 'labels'), '--seeds', *seeds])
    run([*fedmim, 'ablate-rounds', '--config', args.config, '--out', str(out / 'rounds'), '--seeds', seeds[0]])


if __name__ == '__main__':
    main()
