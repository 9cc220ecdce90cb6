import sys
from pathlib import Path

# make sibling test modules importable (oracle helpers are shared)
sys.path.insert(0, str(Path(__file__).parent))


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: criterion-level checks, including the slow experiments")
