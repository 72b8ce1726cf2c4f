# keeps the tests directory importable so `import oracles` works from
# any invocation directory
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))
