import os
from dotenv import load_dotenv

load_dotenv()

# Runtime configuration
LAGFLOW_THREADS = int(os.getenv("LAGFLOW_THREADS", str(os.cpu_count() or 1)))
OUTPUT_DIR = os.getenv("LAGFLOW_OUTPUT_DIR", "out")
LOG_LEVEL = os.getenv("LAGFLOW_LOG_LEVEL", "INFO").upper()
DEFAULT_SEED = int(os.getenv("LAGFLOW_SEED", "0"))


def worker_count(requested: int = 0) -> int:
    """Number of parallel workers, capped by LAGFLOW_THREADS"""
    cap = max(1, LAGFLOW_THREADS)
    if requested <= 0:
        return cap
    return min(requested, cap)
