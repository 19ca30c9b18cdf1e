import sys

from memhist.cli import main

sys.exit(main())
