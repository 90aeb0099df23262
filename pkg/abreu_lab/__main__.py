import sys

from abreu_lab.main import main

sys.exit(main())
