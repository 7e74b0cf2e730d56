"""Allow `python -m cactus` to behave exactly like the `cactus` script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
