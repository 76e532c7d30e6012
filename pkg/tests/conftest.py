import sys
from pathlib import Path

# lets test modules share small helpers (e.g. the spatial word bank)
sys.path.insert(0, str(Path(__file__).parent))
