#!/usr/bin/env python3
"""
pipeforge - Main Entry Point

Runs the pipeforge command line without installing the package.

Usage: python main.py {build-metabase,fit,predict,report} [options]
"""

import sys
import os

# Add src directory to Python path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'src'))

from pipeforge.core.app import main


if __name__ == "__main__":
    sys.exit(main())
