"""
Main entry point for the correction planner.

Keeps the root minimal: everything is wired in cli.py.
"""

import sys

from cli import main

if __name__ == "__main__":
    sys.exit(main())
