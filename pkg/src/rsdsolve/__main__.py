import sys

from .bench_harness import main

sys.exit(main())
