import sys

from vtanim.cli import main

sys.exit(main())
