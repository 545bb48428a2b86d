import os
import sys

# make the shared oracles module importable regardless of invocation directory
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
