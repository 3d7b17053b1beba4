"""SemTab column property annotation entrypoint."""

import sys

from semtab_cpa.cli import main

if __name__ == "__main__":
    sys.exit(main())
