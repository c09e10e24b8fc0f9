import sys
from pathlib import Path

# services are imported as top-level packages (`from _SegNetMS.segnet import ...`)
ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))
