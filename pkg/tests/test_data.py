import filecmp
import os

import numpy as np
import pandas as pd
import pytest

from multehr.data import (DataError, EhrTables, SynthConfig, extract_labels,
                          ingest_csv, los_class_of, split_patients,
                          synth_generate, write_tables_csv)


def _write_fixture(directory, visits_rows=None, patients=("p1", "p2")):
    os.makedirs(directory, exist_ok=True)
    if visits_rows is None:
        visits_rows = [
            ("v1", "p1", "2019-01-01T00:00:00", "2019-01-02T12:00:00", 0),
            ("v2", "p1", "2019-01-20T00:00:00", "2019-01-21T00:00:00", 0),
            ("v3", "p2", "2019-03-05T08:00:00", "2019-03-15T08:00:00", 1),
        ]
    pd.DataFrame({"patient_id": list(patients)}).to_csv(
        os.path.join(directory, "patients.csv"), index=False)
    pd.DataFrame(visits_rows, columns=["visit_id", "patient_id", "admit_time",
                                       "discharge_time", "died_in_hospital"]).to_csv(
        os.path.join(directory, "visits.csv"), index=False)
    pd.DataFrame([("v1", "D1"), ("v3", "D2")], columns=["visit_id", "code"]).to_csv(
        os.path.join(directory, "diagnoses.csv"), index=False)
    pd.DataFrame([("v1", "M1")], columns=["visit_id", "code"]).to_csv(
        os.path.join(directory, "prescriptions.csv"), index=False)
    pd.DataFrame([], columns=["visit_id", "code"]).to_csv(
        os.path.join(directory, "procedures.csv"), index=False)


def test_ingest_happy_path(tmp_path):
    _write_fixture(tmp_path)
    tables = ingest_csv(tmp_path)
    assert len(tables.visits) == 3
    assert tables.ingest_report["visits_rejected_bad_timestamp"] == 0
    assert tables.visits["died_in_hospital"].tolist() == [0, 0, 1]


def test_ingest_missing_file_and_column(tmp_path):
    _write_fixture(tmp_path)
    os.remove(tmp_path / "procedures.csv")
    with pytest.raises(DataError, match="procedures"):
        ingest_csv(tmp_path)
    _write_fixture(tmp_path)
    pd.DataFrame({"visit_id": []}).to_csv(tmp_path / "diagnoses.csv", index=False)
    with pytest.raises(DataError, match="diagnoses"):
        ingest_csv(tmp_path)


def test_ingest_dangling_patient_fk_fatal(tmp_path):
    _write_fixture(tmp_path, visits_rows=[
        ("v1", "p1", "2019-01-01T00:00:00", "2019-01-02T00:00:00", 0),
        ("v2", "ghost", "2019-01-05T00:00:00", "2019-01-06T00:00:00", 0),
    ])
    with pytest.raises(DataError, match="v2"):
        ingest_csv(tmp_path)


def test_ingest_duplicate_visit_id_fatal(tmp_path):
    _write_fixture(tmp_path, visits_rows=[
        ("v1", "p1", "2019-01-01T00:00:00", "2019-01-02T00:00:00", 0),
        ("v1", "p2", "2019-01-05T00:00:00", "2019-01-06T00:00:00", 0),
    ])
    with pytest.raises(DataError, match="duplicate visit_id"):
        ingest_csv(tmp_path)


def test_ingest_bad_timestamp_rejected_and_counted(tmp_path):
    _write_fixture(tmp_path, visits_rows=[
        ("v1", "p1", "2019-01-01T00:00:00", "2019-01-02T00:00:00", 0),
        ("v2", "p1", "not-a-time", "2019-01-06T00:00:00", 0),
        ("v3", "p2", "2019-02-01T00:00:00", "2019-02-03T00:00:00", 0),
    ])
    tables = ingest_csv(tmp_path)
    assert len(tables.visits) == 2
    assert tables.ingest_report["visits_rejected_bad_timestamp"] == 1


def test_los_binning():
    assert los_class_of(0.5) == 0
    assert los_class_of(1.0) == 1
    assert los_class_of(7.9) == 7
    assert los_class_of(8.0) == 8
    assert los_class_of(10.0) == 8
    assert los_class_of(14.0) == 8
    assert los_class_of(20.0) == 9


def test_los_binning_exhaustive_and_exclusive():
    durations = np.concatenate([np.linspace(0.001, 40, 5000), [1.0, 8.0, 14.0, 14.0001]])
    classes = np.array([los_class_of(d) for d in durations])
    assert set(classes) <= set(range(10))
    # monotone in duration
    order = np.argsort(durations)
    assert np.all(np.diff(classes[order]) >= 0)


def test_extract_labels_readmission_window(tmp_path):
    _write_fixture(tmp_path, visits_rows=[
        ("v1", "p1", "2019-01-01T00:00:00", "2019-01-03T00:00:00", 0),
        ("v2", "p1", "2019-01-11T00:00:00", "2019-01-12T00:00:00", 0),
        ("v3", "p2", "2019-01-01T00:00:00", "2019-01-02T00:00:00", 0),
        ("v4", "p2", "2019-03-01T00:00:00", "2019-03-02T00:00:00", 0),
    ])
    tables = ingest_csv(tmp_path)
    labels = extract_labels(tables, readm_window_days=15)
    # v1 discharged day 3, next admission day 11: 8 days later -> readmitted
    assert labels.readm.tolist() == [1, 0, 0, 0]
    assert labels.mort.tolist() == [0, 0, 0, 0]


def test_extract_labels_drug_sets(tmp_path):
    _write_fixture(tmp_path)
    tables = ingest_csv(tmp_path)
    labels = extract_labels(tables)
    assert labels.drug_vocab == ["M1"]
    assert labels.drug_sets[0] == {0}
    assert labels.drug_sets[1] == set()


def test_split_patients_even_partition():
    out = synth_generate(SynthConfig(n_patients=10, seed=0))
    folds = split_patients(out.tables, 5, seed=1)
    sizes = [sum(1 for f in folds.values() if f == k) for k in range(5)]
    assert sizes == [2] * 5
    assert split_patients(out.tables, 5, seed=1) == folds
    assert set(folds) == set(out.tables.patients["patient_id"])


def test_split_patients_rejects_too_few():
    out = synth_generate(SynthConfig(n_patients=3, seed=0))
    with pytest.raises(DataError):
        split_patients(out.tables, 5, seed=0)


def test_synth_deterministic_and_byte_identical(tmp_path):
    a = synth_generate(SynthConfig(n_patients=50, seed=9))
    b = synth_generate(SynthConfig(n_patients=50, seed=9))
    write_tables_csv(a.tables, tmp_path / "a")
    write_tables_csv(b.tables, tmp_path / "b")
    for name in ("patients", "visits", "diagnoses", "prescriptions", "procedures"):
        assert filecmp.cmp(tmp_path / "a" / f"{name}.csv",
                           tmp_path / "b" / f"{name}.csv", shallow=False), name


def test_synth_shortcut_correlation_zero_when_unplanted():
    out = synth_generate(SynthConfig(n_patients=1000, seed=2,
                                     shortcut_rho_train=0.0, shortcut_rho_test=0.0))
    labels = extract_labels(out.tables)
    visits = out.tables.visits.reset_index(drop=True)
    with_short = set(out.tables.diagnoses.loc[out.tables.diagnoses["code"] == "d0000",
                                              "visit_id"])
    s = visits["visit_id"].isin(with_short).to_numpy(dtype=float)
    r = np.corrcoef(s, labels.readm.astype(float))[0, 1]
    assert abs(r) < 0.05
    assert len(visits) >= 2000


def test_synth_shortcut_correlation_planted_by_partition():
    out = synth_generate(SynthConfig(n_patients=1000, seed=4,
                                     shortcut_rho_train=0.9, shortcut_rho_test=0.0))
    labels = extract_labels(out.tables)
    visits = out.tables.visits.reset_index(drop=True)
    part = dict(zip(out.patient_partition["patient_id"], out.patient_partition["partition"]))
    with_short = set(out.tables.diagnoses.loc[out.tables.diagnoses["code"] == "d0000",
                                              "visit_id"])
    s = visits["visit_id"].isin(with_short).to_numpy(dtype=float)
    y = labels.readm.astype(float)
    mask_train = visits["patient_id"].map(part).to_numpy() == "train"
    r_train = np.corrcoef(s[mask_train], y[mask_train])[0, 1]
    r_test = np.corrcoef(s[~mask_train], y[~mask_train])[0, 1]
    assert r_train > 0.75
    assert abs(r_test) < 0.1


def test_synth_visit_count_scale():
    out = synth_generate(SynthConfig(n_patients=100, seed=5))
    per_patient = len(out.tables.visits) / 100.0
    assert 1.2 <= per_patient <= 5.0


def test_synth_mort_rate_controllable():
    for target in (0.10, 0.20):
        out = synth_generate(SynthConfig(n_patients=2500, seed=6, mort_rate=target))
        labels = extract_labels(out.tables)
        assert len(labels.mort) >= 5000
        assert abs(labels.mort.mean() - target) <= 0.02


def test_extract_labels_deterministic(tmp_path):
    out = synth_generate(SynthConfig(n_patients=40, seed=8))
    l1 = extract_labels(out.tables)
    l2 = extract_labels(out.tables)
    np.testing.assert_array_equal(l1.readm, l2.readm)
    np.testing.assert_array_equal(l1.los_class, l2.los_class)
    assert all(a == b for a, b in zip(l1.drug_sets, l2.drug_sets))
