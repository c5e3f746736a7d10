import sys

from fmkr.cli import main

sys.exit(main())
