"""Allow ``python3 -m intflow`` as an alias for the ``idf`` entry point."""

import sys

from intflow.cli import main

if __name__ == "__main__":
    sys.exit(main())
