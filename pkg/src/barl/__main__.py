from barl.cli import main
import sys

sys.exit(main())
