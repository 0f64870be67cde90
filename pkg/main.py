#!/usr/bin/env python3
"""
bitalloc - mixed-precision post-training weight quantization
Main entry point for the application.
"""

import os
import sys

from dotenv import load_dotenv
from src.bitalloc.cli import main

# Load environment variables (BITALLOC_CONFIG, BITALLOC_NUM_JOBS)
load_dotenv()

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "setup.ini")

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:], default_config=DEFAULT_CONFIG))
