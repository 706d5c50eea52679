import sys

from pir.cli import main

sys.exit(main())
