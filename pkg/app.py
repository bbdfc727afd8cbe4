#!/usr/bin/env python3
"""
🌀 Propeller Lab - Main Application Entry Point

Build the genus-2p surface, run the harmonic map heat flow and verify that
the limit map avoids the propeller bands.
"""

import sys
from pathlib import Path

# Add the current directory to Python path
sys.path.insert(0, str(Path(__file__).parent))

from dotenv import load_dotenv

from propeller.cli import main as cli_main

# Load environment variables
load_dotenv()


def main():
    """Main entry point for the Propeller lab."""
    try:
        status = cli_main()
    except KeyboardInterrupt:
        print("\n🌙 Propeller lab stopped.")
        status = 1
    except Exception as e:
        print(f"\n❌ Unexpected error: {str(e)}")
        status = 1
    sys.exit(status)


if __name__ == "__main__":
    main()
