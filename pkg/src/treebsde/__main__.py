import sys

from treebsde.cli import main

sys.exit(main())
