import sys

from dmrbsde.cli import main

sys.exit(main())
