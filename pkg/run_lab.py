#!/usr/bin/env python3
"""
Startup script for the superdiffusion laboratory: checks the environment, then
runs every subcommand section of one or more experiment bundles.
"""

import argparse
import sys
from pathlib import Path
from dotenv import load_dotenv

# Add the project root to Python path
sys.path.insert(0, str(Path(__file__).resolve().parent))

# Load environment variables from .env file
load_dotenv()

SECTION_ORDER = ("sample_env", "simulate", "bounds", "scaling", "aw_check")


def check_dependencies():
    """Check if required dependencies are installed"""
    try:
        import numpy
        import scipy
        import pandas
        import pydantic
        import yaml
        print("✅ All required dependencies are installed")
        return True
    except ImportError as e:
        print(f"❌ Missing dependency: {e}")
        print("Please run: pip install -r requirements.txt")
        return False


def check_settings():
    """Check that the global settings file is in place"""
    from core.utils import get_project_root

    settings = get_project_root() / "config" / "settings.yml"
    if not settings.exists():
        print("⚠️  config/settings.yml not found; built-in defaults will be used")
        return True
    print("✅ Settings found")
    return True


def run_bundle(bundle_path: str, threads: int = None) -> int:
    """Run the sections of one bundle in pipeline order; stops at the first failure"""
    from core.cli import parse_and_dispatch
    from core.utils import load_yaml_config

    bundle = load_yaml_config(bundle_path)
    sections = [s for s in SECTION_ORDER if s in bundle]
    if not sections:
        print(f"⚠️  {bundle_path} has no subcommand sections")
        return 0

    print(f"🧪 {bundle_path}: {', '.join(sections)}")
    for section in sections:
        argv = ["--config", bundle_path]
        if threads:
            argv += ["--threads", str(threads)]
        argv.append(section.replace("_", "-"))
        code = parse_and_dispatch(argv)
        if code != 0:
            print(f"❌ {section} failed with exit code {code}")
            return code
        print(f"✅ {section} done")
    return 0


def run_smoke() -> int:
    """Exponent table consistency check, seconds to run"""
    from core.cli import parse_and_dispatch

    print("🔎 No bundle given; running the exponent table check")
    for d, geometry in ((1, "--iso"), (2, "--iso"), (2, "--aniso"), (3, "--iso")):
        code = parse_and_dispatch(["aw-check", "--d", str(d), geometry])
        if code != 0:
            return code
    return 0


def main():
    """Main startup function"""
    parser = argparse.ArgumentParser(description="Run superdiffusion experiment bundles")
    parser.add_argument("bundles", nargs="*", help="YAML bundles, e.g. config/experiments/dcgf_trend.yml")
    parser.add_argument("--threads", type=int, help="Worker processes")
    args = parser.parse_args()

    print("🌀 Superdiffusion Laboratory")
    print("=" * 50)

    if not check_dependencies():
        sys.exit(1)
    if not check_settings():
        sys.exit(1)

    print("=" * 50)

    try:
        if not args.bundles:
            sys.exit(run_smoke())
        for bundle in args.bundles:
            code = run_bundle(bundle, args.threads)
            if code != 0:
                sys.exit(code)
        print("🎉 All bundles completed")
    except KeyboardInterrupt:
        print("\n👋 Stopped by user")
        sys.exit(130)


if __name__ == "__main__":
    main()
