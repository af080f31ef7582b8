import sys

from backforth.cli import main

sys.exit(main())
