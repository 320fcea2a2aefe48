#!/usr/bin/env python3
"""
Depth-wise Reasoning Runner
A simple script to run the depwise command line from a source checkout
"""

import sys
from pathlib import Path

# Add the project root to the Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from cli.main import main

if __name__ == "__main__":
    sys.exit(main())
