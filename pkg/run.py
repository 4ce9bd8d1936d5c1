"""Convenience entry point: `python run.py optimize --trait OPE ...` is the same as `profile-tuner ...`."""
import sys

from profile_tuner.cli import main

if __name__ == "__main__":
    sys.exit(main())
