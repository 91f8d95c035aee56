import sys

from mlenv.cli import main

sys.exit(main())
