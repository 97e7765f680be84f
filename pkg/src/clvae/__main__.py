import sys

from clvae.cli import main

sys.exit(main())
