"""Tabular EHR ingestion, task label extraction, patient splits, and a
synthetic record generator with planted cross-task signal and an optional
shortcut confounder.

All tables are pandas DataFrames with mandatory headers; the synthetic
generator emits the same schema the CSV reader accepts, so both paths share
one validation/label code path.
"""

import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


class DataError(ValueError):
    """Fatal ingest/validation problem (missing file, broken key, bad schema)."""


REQUIRED_FILES = {
    "patients": ["patient_id"],
    "visits": ["visit_id", "patient_id", "admit_time", "discharge_time", "died_in_hospital"],
    "diagnoses": ["visit_id", "code"],
    "prescriptions": ["visit_id", "code"],
    "procedures": ["visit_id", "code"],
}
OPTIONAL_FILES = {"lab_events": ["visit_id", "code"]}

_BASE_DATE = pd.Timestamp("2019-01-01T00:00:00")


@dataclass
class EhrTables:
    patients: pd.DataFrame
    visits: pd.DataFrame
    diagnoses: pd.DataFrame
    prescriptions: pd.DataFrame
    procedures: pd.DataFrame
    lab_events: pd.DataFrame | None = None
    ingest_report: dict = field(default_factory=dict)

    def code_table(self, name):
        return {"diagnoses": self.diagnoses, "prescriptions": self.prescriptions,
                "procedures": self.procedures, "lab_events": self.lab_events}[name]


@dataclass
class TaskLabels:
    """Per-visit targets, aligned with the visits-table row order.

    Undefined entries (missing discharge time) carry -1 in readm/los_class
    and are excluded from those tasks downstream.
    """
    visit_ids: list
    mort: np.ndarray
    readm: np.ndarray
    los_class: np.ndarray
    drug_sets: list
    drug_vocab: list
    excluded: dict


def _read_table(directory, name, columns, required=True):
    path = os.path.join(directory, f"{name}.csv")
    if not os.path.exists(path):
        if required:
            raise DataError(f"missing required file: {path}")
        return None
    df = pd.read_csv(path, dtype=str)
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise DataError(f"{name}.csv is missing columns {missing}")
    return df


def _parse_times(visits, report):
    admit = pd.to_datetime(visits["admit_time"], errors="coerce", format="ISO8601")
    disch = pd.to_datetime(visits["discharge_time"], errors="coerce", format="ISO8601")
    bad_time = admit.isna() | disch.isna()
    bad_order = (~bad_time) & (disch < admit)
    keep = ~(bad_time | bad_order)
    report["visits_rejected_bad_timestamp"] = int(bad_time.sum())
    report["visits_rejected_negative_stay"] = int(bad_order.sum())
    out = visits.loc[keep].copy()
    out["admit_time"] = admit[keep]
    out["discharge_time"] = disch[keep]
    out["died_in_hospital"] = out["died_in_hospital"].astype(int)
    return out


def validate_tables(tables):
    """Enforce key/foreign-key invariants; raises DataError naming offenders."""
    pats = tables.patients
    visits = tables.visits
    if visits.empty:
        raise DataError("visits table is empty")
    dup_p = pats["patient_id"][pats["patient_id"].duplicated()]
    if len(dup_p):
        raise DataError(f"duplicate patient_id values: {sorted(set(dup_p))[:5]}")
    dup_v = visits["visit_id"][visits["visit_id"].duplicated()]
    if len(dup_v):
        raise DataError(f"duplicate visit_id values: {sorted(set(dup_v))[:5]}")
    known_p = set(pats["patient_id"])
    orphan = visits.loc[~visits["patient_id"].isin(known_p)]
    if len(orphan):
        raise DataError(
            f"visits referencing absent patients (rows {orphan.index[:5].tolist()}): "
            f"{orphan['visit_id'].tolist()[:5]}")
    known_v = set(visits["visit_id"])
    for name in ("diagnoses", "prescriptions", "procedures", "lab_events"):
        df = tables.code_table(name)
        if df is None:
            continue
        bad = df.loc[~df["visit_id"].isin(known_v)]
        if len(bad):
            raise DataError(
                f"{name} rows referencing absent visits (rows {bad.index[:5].tolist()}): "
                f"{bad['visit_id'].tolist()[:5]}")
    return tables


def ingest_csv(directory):
    """Read and validate a directory of EHR CSVs.

    Unparsable-timestamp rows are rejected (cascading to their code rows)
    and counted in `ingest_report`; structural problems are fatal.
    """
    report = {}
    raw = {name: _read_table(directory, name, cols) for name, cols in REQUIRED_FILES.items()}
    lab = _read_table(directory, "lab_events", OPTIONAL_FILES["lab_events"], required=False)

    visits = _parse_times(raw["visits"], report)
    surviving = set(visits["visit_id"])
    rejected = set(raw["visits"]["visit_id"]) - surviving

    def _cascade(df, name):
        if df is None:
            return None
        drop = df["visit_id"].isin(rejected)
        report[f"{name}_rejected_cascade"] = int(drop.sum())
        return df.loc[~drop].reset_index(drop=True)

    tables = EhrTables(
        patients=raw["patients"].reset_index(drop=True),
        visits=visits.reset_index(drop=True),
        diagnoses=_cascade(raw["diagnoses"], "diagnoses"),
        prescriptions=_cascade(raw["prescriptions"], "prescriptions"),
        procedures=_cascade(raw["procedures"], "procedures"),
        lab_events=_cascade(lab, "lab_events"),
        ingest_report=report,
    )
    validate_tables(tables)
    report["visits_ingested"] = len(tables.visits)
    report["patients_ingested"] = len(tables.patients)
    return tables


def los_class_of(duration_days):
    """10-bin stay discretization: <1d, each of days 1..7, 1-2 weeks, >2 weeks."""
    if duration_days < 1.0:
        return 0
    if duration_days < 8.0:
        return int(duration_days)
    if duration_days <= 14.0:
        return 8
    return 9


def extract_labels(tables, readm_window_days=15):
    """Derive MORT/READM/LOS/DRUG targets for every visit."""
    visits = tables.visits.reset_index(drop=True)
    n = len(visits)
    mort = visits["died_in_hospital"].to_numpy(dtype=np.int64)
    readm = np.full(n, -1, dtype=np.int64)
    los = np.full(n, -1, dtype=np.int64)
    excluded = {"no_discharge_time": 0}

    admit = visits["admit_time"]
    disch = visits["discharge_time"]
    ok = admit.notna() & disch.notna()
    excluded["no_discharge_time"] = int((~ok).sum())

    dur_days = (disch - admit).dt.total_seconds() / 86400.0
    for i in np.flatnonzero(ok.to_numpy()):
        los[i] = los_class_of(dur_days.iloc[i])

    window = pd.Timedelta(days=readm_window_days)
    for _, group in visits.groupby("patient_id", sort=False):
        idx = group.index.to_numpy()
        admits = group["admit_time"]
        for i in idx:
            if not ok.iloc[i]:
                continue
            later = admits[admits > admit.iloc[i]]
            readm[i] = int(any((t - disch.iloc[i]) <= window for t in later))

    vocab = sorted(tables.prescriptions["code"].unique().tolist())
    code_to_idx = {c: i for i, c in enumerate(vocab)}
    rx_by_visit = tables.prescriptions.groupby("visit_id")["code"].agg(set)
    drug_sets = [set(code_to_idx[c] for c in rx_by_visit.get(v, set()))
                 for v in visits["visit_id"]]

    return TaskLabels(visit_ids=visits["visit_id"].tolist(), mort=mort, readm=readm,
                      los_class=los, drug_sets=drug_sets, drug_vocab=vocab,
                      excluded=excluded)


def split_patients(tables, folds, seed):
    """Random patient-level fold assignment; returns {patient_id: fold}."""
    if folds < 2:
        raise DataError(f"need at least 2 folds, got {folds}")
    ids = tables.patients["patient_id"].tolist()
    if len(ids) < folds:
        raise DataError(f"fewer patients ({len(ids)}) than folds ({folds})")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    assignment = {}
    for rank, j in enumerate(order):
        assignment[ids[j]] = rank % folds
    return assignment


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    n_patients: int = 2000
    vocab_diagnosis: int = 200
    vocab_prescription: int = 100
    vocab_procedure: int = 50
    vocab_noise_diagnosis: int = 0     # extra junk codes with no latent signal
    mean_noise_diagnoses: float = 0.0  # junk codes attached per visit
    severity_dim: int = 4
    mean_diagnoses: float = 4.0
    mean_procedures: float = 1.5
    rx_follow_prob: float = 0.75
    mort_rate: float = 0.15
    readm_base_rate: float = 0.45
    nonreadm_revisit_prob: float = 0.15
    max_visits_per_patient: int = 8
    readm_window_days: int = 15
    shortcut_rho_train: float = 0.0
    shortcut_rho_test: float = 0.0
    test_fraction: float = 0.25
    severity_tilt: float = 2.0
    readm_signal: float = 2.0
    mort_signal: float = 2.0
    los_signal: float = 0.8
    seed: int = 0

    def validate(self):
        if not (-1.0 <= self.shortcut_rho_train <= 1.0 and -1.0 <= self.shortcut_rho_test <= 1.0):
            raise DataError("shortcut correlations must lie in [-1, 1]")
        if self.n_patients < 2:
            raise DataError("need at least 2 patients")
        return self


@dataclass
class SynthOutput:
    tables: EhrTables
    patient_partition: pd.DataFrame  # patient_id, partition in {train, test}
    manifest: dict


def _calibrate_intercept(logit_terms, target_rate):
    """Find b so that mean(sigmoid(logit_terms + b)) == target_rate."""
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        rate = float(np.mean(1.0 / (1.0 + np.exp(-np.clip(logit_terms + mid, -60, 60)))))
        if rate < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _gaussian_quadrature_terms(scale, signal):
    """Fixed logit grid for a N(0, scale^2) latent, weighted by its density."""
    z = np.linspace(-5.0, 5.0, 2001)
    w = np.exp(-0.5 * z * z)
    return signal * scale * z, w / w.sum()


def _calibrate_gaussian_intercept(scale, signal, target_rate):
    terms, w = _gaussian_quadrature_terms(scale, signal)
    lo, hi = -20.0, 20.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        rate = float(np.sum(w / (1.0 + np.exp(-np.clip(terms + mid, -60, 60)))))
        if rate < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def synth_generate(cfg: SynthConfig) -> SynthOutput:
    """Generate EHR tables from a latent-severity process.

    Per patient: a severity vector drives diagnosis/procedure code choice,
    stay duration, readmission chaining, and mortality, planting shared
    cross-task signal.  Prescriptions follow a fixed diagnosis->drug map
    (the recommendation signal).  Diagnosis code index 0 is reserved as a
    shortcut: it attaches conditionally on the realized readmission label
    with strength shortcut_rho_train / shortcut_rho_test by partition, and
    carries no severity signal of its own.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    q = cfg.severity_dim

    def _unit_rows(n):
        m = rng.normal(size=(n, q))
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    diag_load = _unit_rows(cfg.vocab_diagnosis)
    diag_load[0] = 0.0  # shortcut code carries no latent signal
    proc_load = _unit_rows(cfg.vocab_procedure)
    u_readm, u_mort, u_los = _unit_rows(3)
    # each diagnosis implies two preferred prescriptions
    rx_map = rng.integers(0, cfg.vocab_prescription, size=(cfg.vocab_diagnosis, 2))

    n_test = int(round(cfg.n_patients * cfg.test_fraction))
    partition = np.array(["train"] * cfg.n_patients, dtype=object)
    partition[rng.permutation(cfg.n_patients)[:n_test]] = "test"

    # visit severity = patient base + 0.35 noise, so the 1-D projections have
    # scale sqrt(1 + 0.35^2); calibrate chain probability to the target rate
    sev_scale = float(np.sqrt(1.0 + 0.35 ** 2))
    b_readm = _calibrate_gaussian_intercept(sev_scale, cfg.readm_signal, cfg.readm_base_rate)

    # pass 1: visit skeletons (severities, durations, chain gaps)
    patients = []
    skeleton = []  # (patient_i, visit_sev, duration_days, gap_after_days or None)
    for i in range(cfg.n_patients):
        base_sev = rng.normal(size=q)
        patients.append(f"p{i:05d}")
        n_visits = 0
        while True:
            sev = base_sev + 0.35 * rng.normal(size=q)
            dur = float(np.exp(1.0 + cfg.los_signal * (sev @ u_los) + 0.35 * rng.normal()))
            dur = min(max(dur, 0.08), 35.0)
            n_visits += 1
            p_readm = 1.0 / (1.0 + np.exp(-(cfg.readm_signal * (sev @ u_readm) + b_readm)))
            chained = n_visits < cfg.max_visits_per_patient and rng.random() < p_readm
            if chained:
                gap = float(rng.uniform(1.0, cfg.readm_window_days - 2.0))
            elif (n_visits < cfg.max_visits_per_patient
                  and rng.random() < cfg.nonreadm_revisit_prob):
                gap = float(rng.uniform(cfg.readm_window_days + 5.0, cfg.readm_window_days + 40.0))
            else:
                gap = None
            skeleton.append((i, sev, dur, gap))
            if gap is None:
                break

    # realized readmission label: next admission (if any) within the window
    readm_label = np.array([g is not None and g <= cfg.readm_window_days for (_, _, _, g) in skeleton])

    # mortality: only chain-final visits are eligible; calibrate to the target rate
    final = np.array([g is None for (_, _, _, g) in skeleton])
    sev_mat = np.stack([s for (_, s, _, _) in skeleton])
    mort_term = cfg.mort_signal * (sev_mat @ u_mort)
    eligible_frac = final.mean()
    target_on_final = min(cfg.mort_rate / max(eligible_frac, 1e-9), 0.95)
    b_mort = _calibrate_intercept(mort_term[final], target_on_final)
    p_mort = 1.0 / (1.0 + np.exp(-(mort_term + b_mort)))
    mort = (rng.random(len(skeleton)) < p_mort) & final

    # pass 2: emit rows
    visit_rows, diag_rows, rx_rows, proc_rows = [], [], [], []
    cursor = 0
    for i in range(cfg.n_patients):
        t = _BASE_DATE + pd.Timedelta(minutes=int(rng.integers(0, 60 * 24 * 60)))
        while True:
            _, sev, dur, gap = skeleton[cursor]
            vid = f"v{cursor:06d}"
            admit = t
            disch = t + pd.Timedelta(minutes=int(round(dur * 24 * 60)))
            visit_rows.append((vid, patients[i], admit.isoformat(), disch.isoformat(),
                               int(mort[cursor])))

            tilt = np.exp(cfg.severity_tilt * (diag_load @ sev))
            tilt[0] = 0.0
            probs = tilt / tilt.sum()
            n_d = 1 + rng.poisson(cfg.mean_diagnoses - 1)
            n_d = min(n_d, cfg.vocab_diagnosis - 1)
            codes = rng.choice(cfg.vocab_diagnosis, size=n_d, replace=False, p=probs)

            rho = cfg.shortcut_rho_train if partition[i] == "train" else cfg.shortcut_rho_test
            p_short = 0.5 + (rho / 2.0 if readm_label[cursor] else -rho / 2.0)
            if rng.random() < p_short:
                codes = np.append(codes, 0)

            if cfg.vocab_noise_diagnosis and cfg.mean_noise_diagnoses > 0:
                n_j = min(rng.poisson(cfg.mean_noise_diagnoses), cfg.vocab_noise_diagnosis)
                if n_j:
                    junk = rng.choice(cfg.vocab_noise_diagnosis, size=n_j, replace=False)
                    codes = np.append(codes, cfg.vocab_diagnosis + junk)
            for c in sorted(codes):
                diag_rows.append((vid, f"d{c:04d}"))

            rx = set()
            for c in codes:
                if c == 0:
                    continue
                for r in rx_map[c]:
                    if rng.random() < cfg.rx_follow_prob:
                        rx.add(int(r))
            for _ in range(rng.poisson(1.0)):
                rx.add(int(rng.integers(0, cfg.vocab_prescription)))
            for r in sorted(rx):
                rx_rows.append((vid, f"m{r:04d}"))

            ptilt = np.exp(1.5 * (proc_load @ sev))
            pprobs = ptilt / ptilt.sum()
            n_p = min(rng.poisson(cfg.mean_procedures), cfg.vocab_procedure)
            if n_p:
                pcodes = rng.choice(cfg.vocab_procedure, size=n_p, replace=False, p=pprobs)
                for c in sorted(pcodes):
                    proc_rows.append((vid, f"x{c:04d}"))

            cursor += 1
            if gap is None:
                break
            t = disch + pd.Timedelta(minutes=int(round(gap * 24 * 60)))

    tables = EhrTables(
        patients=pd.DataFrame({"patient_id": patients}),
        visits=pd.DataFrame(visit_rows, columns=["visit_id", "patient_id", "admit_time",
                                                 "discharge_time", "died_in_hospital"]),
        diagnoses=pd.DataFrame(diag_rows, columns=["visit_id", "code"]),
        prescriptions=pd.DataFrame(rx_rows, columns=["visit_id", "code"]),
        procedures=pd.DataFrame(proc_rows, columns=["visit_id", "code"]),
    )
    tables.visits["admit_time"] = pd.to_datetime(tables.visits["admit_time"])
    tables.visits["discharge_time"] = pd.to_datetime(tables.visits["discharge_time"])

    part_df = pd.DataFrame({"patient_id": patients, "partition": partition})
    manifest = {
        "seed": cfg.seed,
        "n_patients": cfg.n_patients,
        "n_visits": len(visit_rows),
        "shortcut_rho_train": cfg.shortcut_rho_train,
        "shortcut_rho_test": cfg.shortcut_rho_test,
        "test_fraction": cfg.test_fraction,
        "shortcut_code": "d0000",
        "readm_window_days": cfg.readm_window_days,
    }
    return SynthOutput(tables=tables, patient_partition=part_df, manifest=manifest)


def write_tables_csv(tables, directory):
    """Write the five CSV files (ISO-8601 timestamps), creating the directory."""
    os.makedirs(directory, exist_ok=True)
    visits = tables.visits.copy()
    visits["admit_time"] = visits["admit_time"].map(lambda t: t.isoformat())
    visits["discharge_time"] = visits["discharge_time"].map(lambda t: t.isoformat())
    tables.patients.to_csv(os.path.join(directory, "patients.csv"), index=False)
    visits.to_csv(os.path.join(directory, "visits.csv"), index=False)
    tables.diagnoses.to_csv(os.path.join(directory, "diagnoses.csv"), index=False)
    tables.prescriptions.to_csv(os.path.join(directory, "prescriptions.csv"), index=False)
    tables.procedures.to_csv(os.path.join(directory, "procedures.csv"), index=False)
    if tables.lab_events is not None:
        tables.lab_events.to_csv(os.path.join(directory, "lab_events.csv"), index=False)
