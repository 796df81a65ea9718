import json

import numpy as np
import pandas as pd
import pytest

from fedxray import constants
from fedxray.results import (
    CONFIG_FILE,
    DIAGNOSTICS_FILE,
    METRICS_FILE,
    TIMINGS_FILE,
    RunManifest,
    RunWriter,
    diagnostics_entry,
    export_scatter,
    load_diagnostics,
    metrics_row,
    to_jsonable,
    verify_manifest,
    write_scatter,
)
from fedxray.simulation import RoundReport
from fedxray.utils import sha256_file


def report(iteration=0, **overrides) -> RoundReport:
    fields = dict(
        iteration=iteration,
        test_error=0.25,
        attack_success_rate=None,
        preserved_ids=(2, 5),
        screening_seconds=0.5,
        sampled_ids=(2, 5, 9),
        malicious_ids=(9,),
        lr=0.001,
        diagnostics={"slous": np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9]])},
    )
    fields.update(overrides)
    return RoundReport(**fields)


def test_metrics_row_leaves_timing_out_unless_asked():
    row = metrics_row(report())
    assert list(row) == constants.METRICS_COLUMNS
    assert row["screening_seconds"] is None
    assert row["preserved_count"] == 2 and row["preserved_ids"] == "2 5"
    assert metrics_row(report(), record_timing=True)["screening_seconds"] == 0.5


def test_diagnostics_entries_are_plain_json():
    entry = diagnostics_entry(report(diagnostics={"flag": np.bool_(True), "passes": np.int64(3)}))
    assert json.loads(json.dumps(entry))["flag"] is True
    assert entry["sampled_ids"] == [2, 5, 9] and entry["passes"] == 3
    assert to_jsonable({1: (np.float64(0.5),)}) == {"1": [0.5]}


def test_writer_starts_with_header_only_files(tmp_path):
    writer = RunWriter(tmp_path / "run")
    assert (tmp_path / "run" / "metrics.csv").read_text().splitlines() == [",".join(constants.METRICS_COLUMNS)]
    assert load_diagnostics(tmp_path / "run") == []
    writer(report(0))
    writer(report(1, attack_success_rate=0.5))
    metrics = pd.read_csv(tmp_path / "run" / "metrics.csv")
    assert list(metrics["iteration"]) == [0, 1]
    assert metrics["attack_success_rate"].isna().tolist() == [True, False]
    assert [d["iteration"] for d in load_diagnostics(tmp_path / "run")] == [0, 1]


def test_writer_appends_instead_of_rewriting(tmp_path):
    writer = RunWriter(tmp_path)
    writer(report(0))
    before = {name: (tmp_path / name).read_bytes() for name in (METRICS_FILE, DIAGNOSTICS_FILE, TIMINGS_FILE)}
    writer(report(1))
    for name, old in before.items():
        new = (tmp_path / name).read_bytes()
        assert new.startswith(old) and len(new) > len(old), name
    lines = (tmp_path / DIAGNOSTICS_FILE).read_text().splitlines()
    assert [json.loads(line)["iteration"] for line in lines] == [0, 1]
    assert writer.rounds == 2


def test_manifest_round_trip_and_verification(tmp_path):
    (tmp_path / CONFIG_FILE).write_text("seed: 3\n")
    manifest = RunManifest("exp.yaml", sha256_file(tmp_path / CONFIG_FILE), 3, outputs={"config": CONFIG_FILE})
    manifest.write(tmp_path)
    assert RunManifest.load(tmp_path) == manifest
    assert verify_manifest(tmp_path)
    (tmp_path / CONFIG_FILE).write_text("seed: 4\n")
    assert not verify_manifest(tmp_path)


def test_scatter_falls_back_to_projecting_the_raw_slous():
    frame = export_scatter([diagnostics_entry(report())], 0)
    assert list(frame["id"]) == [2, 5, 9]
    assert list(frame["is_malicious"]) == [False, False, True]
    assert list(frame["preserved"]) == [True, True, False]
    # the two benign rows sit on one side of the first component
    assert np.sign(frame["pc1"][0]) == np.sign(frame["pc1"][1]) != np.sign(frame["pc1"][2])


def test_scatter_pads_a_single_component():
    entry = diagnostics_entry(report(diagnostics={"pca_updates": np.array([[1.0], [2.0], [3.0]])}))
    frame = export_scatter([entry], 0, "updates")
    assert list(frame["pc1"]) == [1.0, 2.0, 3.0] and list(frame["pc2"]) == [0.0, 0.0, 0.0]


def test_scatter_errors():
    entries = [diagnostics_entry(report(diagnostics={}))]
    with pytest.raises(ValueError, match="space"):
        export_scatter(entries, 0, "weights")
    with pytest.raises(ValueError, match="round 4"):
        export_scatter(entries, 4)
    with pytest.raises(ValueError, match="record_pca"):
        export_scatter(entries, 0, "updates")


def test_write_scatter_default_and_explicit_paths(tmp_path):
    writer = RunWriter(tmp_path)
    writer(report(0))
    assert write_scatter(tmp_path, 0) == tmp_path / "scatter_round0_slous.csv"
    out = write_scatter(tmp_path, 0, out=tmp_path / "custom.csv")
    assert len(pd.read_csv(out)) == 3
