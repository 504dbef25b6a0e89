#!/usr/bin/env python3
"""
Entry point for the SOLARIS simulator.
Delegates to the command-line driver:
  python main.py simulate --config solaris/configs/default_experiment.yaml
  python main.py sweep --levels 0,0.2,0.5,0.6,1.0 --quality
  python main.py ablate --config solaris/configs/smoke_experiment.json
"""
# Load environment variables FIRST, before any other imports that may use them
from dotenv import load_dotenv
load_dotenv()

import sys

from solaris.cli import main

if __name__ == "__main__":
    sys.exit(main())
