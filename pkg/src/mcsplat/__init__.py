"""CPU Gaussian splatting with SGLD position noise and relocation moves."""

import os

# the TBB layer shipped in some images is too old and warns on every import
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
