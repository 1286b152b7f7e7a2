import sys

from app.cli import run


def main() -> None:
    """Console entry point for ``esdrl``."""
    sys.exit(run())


if __name__ == "__main__":
    main()
