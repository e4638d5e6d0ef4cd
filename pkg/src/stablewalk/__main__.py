import sys

from stablewalk.harness.cli import main

sys.exit(main())
