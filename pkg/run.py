#!/usr/bin/env python3
"""Development launcher: `python run.py <subcommand> <config> [--key value]...`."""

import sys

from abreu_lab.main import main

if __name__ == "__main__":
    sys.exit(main())
