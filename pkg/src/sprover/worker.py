"""Worker process entry point: ``python -m sprover.worker HOST:PORT``."""

from __future__ import annotations

import sys

from .taskqueue import worker_main


def main() -> None:
    if len(sys.argv) != 2:
        print("usage: python -m sprover.worker HOST:PORT", file=sys.stderr)
        raise SystemExit(2)
    worker_main(sys.argv[1])


if __name__ == "__main__":
    main()
