import sys

from clustersize.cli import main

sys.exit(main())
