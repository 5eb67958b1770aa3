import sys

from apa.cli import main

sys.exit(main())
