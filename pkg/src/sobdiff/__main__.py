import sys

from sobdiff.cli import main

sys.exit(main())
