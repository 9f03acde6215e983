"""The cached 2e6-frame desk training run shared by the acceptance suite.

The run directory is keyed by the configuration hash and by a digest of the
modules that determine training, so a code change never reuses stale results.
Set ``A2CR_DESK_ROOT`` to move the cache (default: ``runs/acceptance`` in the
repository).  Running this file directly trains the run if it is missing.
"""

import hashlib
import logging
import os
import sys
from pathlib import Path

import a2cr
from a2cr.training import HyperParams, train

REPO = Path(__file__).resolve().parents[1]
TRAINING_MODULES = ("tensor", "networks", "env", "phase_corr", "state_explore", "collector", "training")
MID_TRAINING_FRAMES = 1_000_000


def desk_hparams() -> HyperParams:
    return HyperParams(seed=0, total_a2c_frames=2_000_000, a2c_workers=4, world_length=80)


def code_digest() -> str:
    h = hashlib.sha256()
    pkg = Path(a2cr.__file__).parent
    for name in TRAINING_MODULES:
        h.update((pkg / f"{name}.py").read_bytes())
    return h.hexdigest()[:12]


def desk_run_dir() -> Path:
    root = Path(os.environ.get("A2CR_DESK_ROOT", REPO / "runs" / "acceptance"))
    hp = desk_hparams()
    return root / f"desk-{hp.config_hash()}-{code_digest()}"


def is_complete(d: Path) -> bool:
    return (d / "checkpoints" / "final" / "manifest.json").is_file() and (d / "label_history.csv").is_file()


def ensure_desk_run() -> Path:
    d = desk_run_dir()
    if not is_complete(d):
        logging.getLogger("a2cr").info("training desk run into %s", d)
        train(desk_hparams(), d)
    return d


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s", stream=sys.stdout)
    print(ensure_desk_run())
