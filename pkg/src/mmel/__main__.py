import sys

from mmel.harness.cli import main

sys.exit(main())
