import sys

from repquant.cli import main

sys.exit(main())
