import sys

from biamasr.cli import main

sys.exit(main())
