#!/usr/bin/env python3
"""treekit terminal - run the command line from a source checkout without installing."""

import os
import sys

SCRIPT_DIR = os.path.abspath(os.path.dirname(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from treekit.cli import main


if __name__ == "__main__":
    sys.exit(main())
