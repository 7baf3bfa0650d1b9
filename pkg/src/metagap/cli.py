"""``metagap`` command line: experiment tables, convergence sweeps and the verification suite.

Exit codes: 0 success, 1 invalid input, 2 verification failure, 3 divergence.
"""

import argparse
import json
from pathlib import Path
import sys

import numpy as np

from ._validation import DivergenceError, ValidationError
from .experiments import COMMANDS, build_spec, load_spec_file, render_csv, run

EXIT_OK, EXIT_INVALID, EXIT_VERIFY, EXIT_DIVERGED = 0, 1, 2, 3


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def write_artifacts(art, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in sorted(art.tables.items()):
        text = table if isinstance(table, str) else render_csv(*table)
        (out / name).write_text(text)
        written.append(out / name)
    for name, doc in sorted(art.documents.items()):
        (out / name).write_text(json.dumps(doc, indent=2, sort_keys=True,
                                           default=_jsonable) + "\n")
        written.append(out / name)
    return written


def parser():
    p = argparse.ArgumentParser(prog="metagap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--spec", help="TOML or JSON file overriding the embedded defaults")
        sp.add_argument("--seed", type=int, help="base seed; replaces the spec's seed list")
        sp.add_argument("--out", default=None, help="output directory (default: .)")
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    try:
        overrides = load_spec_file(args.spec) if args.spec else {}
        if not isinstance(overrides, dict):
            raise ValidationError("spec file must contain a table/object at the top level")
        spec = build_spec(args.command, overrides, args.seed, args.out)
        art = run(args.command, spec)
        for path in write_artifacts(art, spec.output_path):
            print(path)
    except DivergenceError as exc:
        print(f"metagap: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValidationError, np.linalg.LinAlgError, KeyError, TypeError) as exc:
        print(f"metagap: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not art.passed:
        print("metagap: verification failed", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
