import sys

from effzero.cli import main

sys.exit(main())
