import sys

from .cli import main_spoofbench

sys.exit(main_spoofbench())
