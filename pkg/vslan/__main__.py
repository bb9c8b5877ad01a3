import sys

from vslan.cli import main

sys.exit(main())
