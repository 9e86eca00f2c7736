import sys

from rapgate.cli import main

sys.exit(main())
