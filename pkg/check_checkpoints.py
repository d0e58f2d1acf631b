import sys

from rectdiff.config import load_config
from rectdiff.errors import RectDiffError
from rectdiff.experiments import checkpoint_status

if len(sys.argv) != 2:
    print("usage: python check_checkpoints.py <config>")
    sys.exit(2)

try:
    statuses = checkpoint_status(load_config(sys.argv[1]))
except RectDiffError as e:
    print(f"error[{e.category}]: {e}")
    sys.exit(2)

failed = False
for key, path, status in statuses:
    print(f"{key}: {status} ({path})")
    failed = failed or status != "ok"
sys.exit(1 if failed else 0)
