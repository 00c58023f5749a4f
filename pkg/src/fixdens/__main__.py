import sys

from fixdens.cli import main

sys.exit(main())
