import sys

from radario.cli import main

sys.exit(main())
