import sys

from relsub.cli import main

sys.exit(main())
