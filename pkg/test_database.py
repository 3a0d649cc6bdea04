import pytest

import database
from database import ResultsDatabase


@pytest.fixture
def archive(tmp_path):
    return ResultsDatabase(f"sqlite:///{tmp_path / 'archive.db'}")


def record(rep_index, status="ok", error=None, value=0.25):
    return {"rep_index": rep_index, "status": status, "error": error,
            "rows": [{"theta": 4.0, "N": 12, "method": "plugin", "error_rate": value}]}


def test_requires_url(monkeypatch):
    monkeypatch.setitem(database.DATABASE_CONFIG, "url", None)
    monkeypatch.delenv("DATABASE_URL", raising=False)
    with pytest.raises(ValueError):
        ResultsDatabase()


def test_runs_are_registered_once(archive):
    assert archive.save_run("abc", {"M": 10})
    assert archive.save_run("abc", {"M": 99})
    runs = archive.get_recent_runs()
    assert [run["config_hash"] for run in runs] == ["abc"]
    assert runs[0]["config"] == {"M": 10}


def test_repetitions_round_trip(archive):
    archive.save_run("abc", {})
    assert archive.save_repetition("abc", record(1))
    assert archive.save_repetition("abc", record(0))
    assert archive.save_repetition("abc", record(2, status="failed", error="ScoreError: singular"))
    stored = archive.get_repetitions("abc")
    assert sorted(stored) == [0, 1]
    assert stored[1]["rows"][0]["error_rate"] == 0.25
    assert sorted(archive.get_repetitions("abc", status=None)) == [0, 1, 2]
    assert archive.get_repetitions("other") == {}
    assert archive.get_recent_runs()[0]["repetitions"] == 3


def test_saving_replaces_a_repetition(archive):
    archive.save_repetition("abc", record(0, value=0.25))
    archive.save_repetition("abc", record(0, value=0.5))
    assert archive.get_repetitions("abc")[0]["rows"][0]["error_rate"] == 0.5


def test_cleanup_removes_runs_and_repetitions(archive):
    archive.save_run("abc", {})
    archive.save_repetition("abc", record(0))
    assert archive.cleanup_old_runs(days_to_keep=90) == 0
    assert archive.cleanup_old_runs(days_to_keep=-1) == 1
    assert archive.get_recent_runs() == []
    assert archive.get_repetitions("abc") == {}
