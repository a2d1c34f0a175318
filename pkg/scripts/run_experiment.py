import sys

from dfa_recommender.cli import main

if __name__ == "__main__":
    sys.exit(main())
