import json
from pathlib import Path

import pytest

from cli import ClusterRobustCLI
from config import DL_DATA_PATH

SPEC = Path(__file__).resolve().parent.parent / "dataset" / "specs" / "dl_many_controls.transforms"
CONTROLS = "lpris,lpolice,unemp,income,poverty,afdc15,gunlaw,beer"

pytestmark = pytest.mark.skipif(
    not DL_DATA_PATH or not Path(DL_DATA_PATH).is_file(),
    reason="set CLUSTER_ROBUST_DL_DATA to the state-year crime panel CSV",
)


def test_many_controls_crime_regression(capsys):
    code = ClusterRobustCLI().run(
        [
            "fit",
            "--input", DL_DATA_PATH,
            "--y", "lviol",
            "--x", "efaviol",
            "--w", CONTROLS,
            "--cluster", "state",
            "--transforms", str(SPEC),
        ]
    )
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["G"] == 50
    assert report["k_eff"] / report["n"] > 0.1
    rows = {row["estimator"]: row for row in report["results"]}
    # the corrected estimator widens the interval with this many controls
    assert rows["CR"]["se"] > rows["LZ"]["se"]
    assert rows["LZ"]["beta"] == rows["CR"]["beta"]
