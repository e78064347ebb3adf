import sys

from ksr.cli import main

sys.exit(main())
