import sys

from harness.cli import main as run_cli


def main() -> None:
    """Main entry point for the backdoorlab command line."""
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
