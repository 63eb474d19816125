import runpy
import sys
from pathlib import Path

import pytest

pytest.importorskip("evo")
SCRIPT = Path(__file__).resolve().parents[1] / "scripts" / "crosscheck_metrics.py"


def test_metrics_agree_with_evo(monkeypatch, capsys):
    monkeypatch.setattr(sys, "argv", [str(SCRIPT)])
    with pytest.raises(SystemExit) as e:
        runpy.run_path(str(SCRIPT), run_name="__main__")
    print(capsys.readouterr().out.splitlines()[-1])
    assert e.value.code == 0
