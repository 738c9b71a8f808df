"""render-trace --trace FILE --out DIR [--dpi 150]"""

from __future__ import annotations

import argparse
import json
import sys

from .render import TraceValidationError, render


def main(argv=None):
    parser = argparse.ArgumentParser(prog="render-trace", description=__doc__)
    parser.add_argument("--trace", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--dpi", type=int, default=150)
    args = parser.parse_args(argv)
    try:
        written = render(args.trace, args.out, dpi=args.dpi)
    except TraceValidationError as exc:
        sys.stderr.write(json.dumps({"error": str(exc), "path": exc.path}) + "\n")
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(json.dumps({"error": str(exc)}) + "\n")
        return 2
    print(json.dumps({"images": len(written), "out": args.out}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
