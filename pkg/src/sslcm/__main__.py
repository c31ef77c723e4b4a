import sys

from sslcm.cli import main

sys.exit(main())
