import sys

from pacsmr.cli import main

sys.exit(main())
