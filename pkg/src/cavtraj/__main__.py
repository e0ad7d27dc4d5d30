from cavtraj.cli import main
import sys

sys.exit(main())
