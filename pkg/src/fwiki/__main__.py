import sys

from fwiki.cli import main

sys.exit(main())
