import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

TINY = {
    "data": {"backbone_train": 64, "detector_train": 16, "detector_val": 8, "detector_test": 8},
    "fakes": {"train": 16, "val": 8, "test": 8, "test_b": 8},
    "backbone_a": {"ae_epochs": 1, "den_epochs": 1, "cls_epochs": 1},
    "backbone_b": {"ae_epochs": 1, "den_epochs": 1, "cls_epochs": 1},
    "detector": {"epochs": 2},
    "ddim": {"K": 5},
    "eval": {"corruptions": ["jpeg:75"]},
}


class QuickstartRuns:
    """Default-config quickstart runs, computed once per (seed, tag) and shared across modules.

    Set INVDETECT_TEST_RUNS to a directory to keep the runs between pytest sessions.
    """

    def __init__(self, root: Path):
        self.root = root
        self._done = {}

    def get(self, seed: int, tag: str = "a") -> Path:
        key = (seed, tag)
        if key not in self._done:
            from invdetect import config as C
            from invdetect.workflow import quickstart
            out = self.root / f"seed{seed}-{tag}"
            if not (out / "summary.json").is_file():
                if out.exists():
                    import shutil
                    shutil.rmtree(out)
                quickstart(out, C.load_config(seed=seed))
            self._done[key] = out
        return self._done[key]


@pytest.fixture(scope="session")
def quickstart_runs(tmp_path_factory):
    keep = os.environ.get("INVDETECT_TEST_RUNS")
    root = Path(keep) if keep else tmp_path_factory.mktemp("quickstart")
    root.mkdir(parents=True, exist_ok=True)
    return QuickstartRuns(root)


@pytest.fixture(scope="session")
def trained_a(quickstart_runs):
    """Generator-A bundle and the detector-split manifest of the seed-0 default run."""
    from invdetect import backbone as bb
    from invdetect.manifest import read_manifest
    run = quickstart_runs.get(0)
    return bb.load_bundle(run / "backbones/generator-A.zip"), read_manifest(run / "manifests/detector.jsonl", run), run


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in acc.RESULTS:
            terminalreporter.write_line(line)
