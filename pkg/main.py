import sys

from stmoe.cli import main

if __name__ == "__main__":
    sys.exit(main())
