"""Allow ``python -m envfield``."""

import sys

from .cli import main

sys.exit(main())
