import sys
from pathlib import Path

# make the shared quadrature oracle importable however pytest is invoked
sys.path.insert(0, str(Path(__file__).parent))
