import sys
from pathlib import Path

try:
    import hambox  # noqa: F401
except ImportError:
    # Allow running the suite from a checkout without installing.
    sys.path.insert(0, str(Path(__file__).parent / "src"))
