import sys

from weakseg3d.cli import main

sys.exit(main())
