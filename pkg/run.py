#!/usr/bin/env python3
"""
🌀 Propeller Lab - Quick Run Script
Launch a coarse but complete lab run for development.
"""

import os
import sys
from pathlib import Path

# Add current directory to path
sys.path.insert(0, str(Path(__file__).parent))


def main():
    """Quick coarse run for development."""

    env_file = Path(".env")
    if not env_file.exists():
        print("⚠️  No .env file found, creating one from env_example.txt...")
        template_file = Path("env_example.txt")
        if template_file.exists():
            env_file.write_text(template_file.read_text())
            print("✅ Created .env file")
        else:
            print("❌ Template file not found, continuing with defaults.")

    try:
        from propeller.cli import main as cli_main
        print("🌀 Launching Propeller lab in development mode...")

        os.environ["PROPELLER_DEBUG"] = "true"
        argv = ["--config", "propeller.ini", "--resolution", "1", "--out", "propeller_dev",
                "--max-steps", "20000", "run"]
        sys.exit(cli_main(argv))

    except ImportError as e:
        print(f"❌ Import error: {e}")
        print("Please install dependencies: pip install -r requirements.txt")
        sys.exit(1)


if __name__ == "__main__":
    main()
