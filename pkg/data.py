"""Cohort schema, synthetic cohorts, preprocessing and patient-level splits.

Dynamic vector layout per visit (three-bucket mode):
    [med_0 .. med_{M-1}] + [High, Normal, Low] for every lab in vocabulary order
Target row per visit: rejection/loss/death x 6/12 months, see TARGET_LABELS.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from numerics import Rng
from utils import ConfigError, SchemaError

logger = logging.getLogger(__name__)

ENDPOINT_KINDS = ("rejection", "loss", "death")
HORIZONS = (183, 365)
TARGET_LABELS = tuple(f"{kind}_{months}m" for kind in ENDPOINT_KINDS for months in (6, 12))
TARGET_TITLES = tuple(f"{kind.capitalize()} {months} months" for kind in ENDPOINT_KINDS for months in (6, 12))
TASKS = ("endpoint", "next-visit")


# ----------------------
# Schema
# ----------------------
@dataclass
class Visit:
    day: int
    meds: tuple = ()
    labs: dict = field(default_factory=dict)


@dataclass
class EndpointEvent:
    kind: str
    day: int


@dataclass
class PatientRecord:
    patient_id: str
    static_features: dict
    visits: list
    endpoint_events: list = field(default_factory=list)
    last_follow_up: int = None

    def last_observed_day(self):
        days = [v.day for v in self.visits] + [e.day for e in self.endpoint_events]
        if self.last_follow_up is not None:
            days.append(self.last_follow_up)
        return max(days)

    def validate(self):
        if not self.patient_id:
            raise SchemaError("empty patient_id")
        if not self.visits:
            raise SchemaError(f"patient {self.patient_id}: no visits")
        days = [v.day for v in self.visits]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise SchemaError(f"patient {self.patient_id}: visit days must be strictly increasing")
        for e in self.endpoint_events:
            if e.kind not in ENDPOINT_KINDS:
                raise SchemaError(f"patient {self.patient_id}: unknown endpoint kind '{e.kind}'")
            if e.day < 0:
                raise SchemaError(f"patient {self.patient_id}: negative endpoint day {e.day}")
            if e.kind == "death" and days[-1] > e.day:
                raise SchemaError(f"patient {self.patient_id}: visit after death on day {e.day}")

    def to_dict(self):
        return {
            "patient_id": self.patient_id,
            "static_features": self.static_features,
            "visits": [{"day": v.day, "meds": list(v.meds), "labs": v.labs} for v in self.visits],
            "endpoint_events": [{"kind": e.kind, "day": e.day} for e in self.endpoint_events],
            "last_follow_up": self.last_follow_up,
        }

    @classmethod
    def from_dict(cls, d):
        try:
            visits = [
                Visit(int(v["day"]), tuple(v.get("meds", ())), {k: float(x) for k, x in v.get("labs", {}).items()})
                for v in d["visits"]
            ]
            events = [EndpointEvent(e["kind"], int(e["day"])) for e in d.get("endpoint_events", [])]
            follow = d.get("last_follow_up")
            return cls(str(d["patient_id"]), dict(d.get("static_features", {})), visits, events,
                       None if follow is None else int(follow))
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"malformed record: {e!r}") from None


@dataclass(frozen=True)
class StaticFeature:
    name: str
    levels: tuple = None

    @property
    def width(self):
        return len(self.levels) if self.levels else 1


@dataclass
class Vocabulary:
    meds: list
    labs: list
    static: list

    def __post_init__(self):
        for family, names in (("meds", self.meds), ("labs", self.labs), ("static", [s.name for s in self.static])):
            if len(set(names)) != len(names):
                raise SchemaError(f"duplicate names in vocabulary family '{family}'")
        self.med_index = {m: i for i, m in enumerate(self.meds)}
        self.lab_index = {m: i for i, m in enumerate(self.labs)}

    @property
    def dynamic_width(self):
        return len(self.meds) + 3 * len(self.labs)

    @property
    def static_width(self):
        return sum(s.width for s in self.static)

    def to_dict(self):
        return {
            "meds": list(self.meds),
            "labs": list(self.labs),
            "static": [{"name": s.name, "levels": list(s.levels) if s.levels else None} for s in self.static],
        }

    @classmethod
    def from_dict(cls, d):
        try:
            static = [StaticFeature(s["name"], tuple(s["levels"]) if s.get("levels") else None) for s in d["static"]]
            return cls(list(d["meds"]), list(d["labs"]), static)
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed vocabulary: {e!r}") from None


# ----------------------
# Cohort files
# ----------------------
def save_cohort(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n")


def load_cohort(path):
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            pid = "?"
            try:
                raw = json.loads(line)
                pid = raw.get("patient_id", "?") if isinstance(raw, dict) else "?"
                rec = PatientRecord.from_dict(raw)
                rec.validate()
            except (json.JSONDecodeError, SchemaError) as e:
                raise SchemaError(f"{path}:{line_no} (patient {pid}): {e}") from None
            records.append(rec)
    if not records:
        raise SchemaError(f"{path}: cohort file holds no patients")
    return records


def save_vocab(vocab, path):
    Path(path).write_text(json.dumps(vocab.to_dict(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")


def load_vocab(path):
    try:
        return Vocabulary.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: {e}") from None


# ----------------------
# Targets
# ----------------------
def build_targets(patient, horizons=HORIZONS):
    """Per-visit endpoint bits and the per-horizon censoring mask, both (T, 3 * len(horizons)).

    bit(kind, h) = 1 iff an endpoint of that kind falls in (day, day + h]. A
    visit is evaluable for horizon h when its window ends on or before the last
    observed day, or when any endpoint falls inside the window.
    """
    T = len(patient.visits)
    width = len(ENDPOINT_KINDS) * len(horizons)
    targets = np.zeros((T, width))
    mask = np.zeros((T, width))
    last = patient.last_observed_day()
    for t, visit in enumerate(patient.visits):
        for hi, h in enumerate(horizons):
            hit_any = False
            for ki, kind in enumerate(ENDPOINT_KINDS):
                hit = any(e.kind == kind and visit.day < e.day <= visit.day + h for e in patient.endpoint_events)
                targets[t, ki * len(horizons) + hi] = float(hit)
                hit_any = hit_any or hit
            evaluable = hit_any or visit.day + h <= last
            for ki in range(len(ENDPOINT_KINDS)):
                mask[t, ki * len(horizons) + hi] = float(evaluable)
    return targets, mask


def build_next_visit_targets(visits):
    """Targets for the next-visit task: row t is the encoded visit t+1; the last row is masked."""
    visits = np.asarray(visits, dtype=np.float64)
    targets = np.zeros_like(visits)
    mask = np.zeros_like(visits)
    targets[:-1] = visits[1:]
    mask[:-1] = 1.0
    return targets, mask


# ----------------------
# Lab statistics and encoders
# ----------------------
@dataclass
class LabStats:
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray
    median: np.ndarray

    @property
    def flagged(self):
        """Labs with zero spread (single value or never observed in training)."""
        return self.std == 0.0


def fit_lab_stats(patients, vocab):
    if not patients:
        raise ValueError("cannot fit lab statistics on an empty training set")
    values = [[] for _ in vocab.labs]
    for p in patients:
        for v in p.visits:
            for name, value in v.labs.items():
                idx = vocab.lab_index.get(name)
                if idx is not None:
                    values[idx].append(value)
    L = len(vocab.labs)
    mean, std, count, median = np.zeros(L), np.zeros(L), np.zeros(L), np.zeros(L)
    for i, vals in enumerate(values):
        if vals:
            arr = np.asarray(vals)
            mean[i], std[i], count[i], median[i] = arr.mean(), arr.std(), len(arr), np.median(arr)
    unobserved = [vocab.labs[i] for i in range(L) if count[i] == 0]
    if unobserved:
        logger.info("%d labs never observed in training: %s", len(unobserved), ", ".join(unobserved[:5]))
    return LabStats(mean, std, count, median)


def discretize_labs(labs, stats, vocab):
    out = np.zeros(3 * len(vocab.labs))
    for name, value in labs.items():
        i = vocab.lab_index.get(name)
        if i is None:
            continue
        if stats.std[i] == 0.0:
            bucket = 1
        elif value > stats.mean[i] + stats.std[i]:
            bucket = 0
        elif value < stats.mean[i] - stats.std[i]:
            bucket = 2
        else:
            bucket = 1
        out[3 * i + bucket] = 1.0
    return out


def _unknown(kind, name, policy):
    if policy == "reject":
        raise SchemaError(f"unknown {kind} '{name}'")
    logger.warning("ignoring unknown %s '%s'", kind, name)


def encode_visit(visit, vocab, stats, unknown="reject"):
    meds = np.zeros(len(vocab.meds))
    for m in visit.meds:
        i = vocab.med_index.get(m)
        if i is None:
            _unknown("medication", m, unknown)
            continue
        meds[i] = 1.0
    for name in visit.labs:
        if name not in vocab.lab_index:
            _unknown("lab", name, unknown)
    return np.concatenate([meds, discretize_labs(visit.labs, stats, vocab)])


def encode_visit_imputed(visit, vocab, stats, imputation="mean", unknown="reject"):
    """Degraded pipeline: raw lab values standardized, missing values imputed."""
    meds = np.zeros(len(vocab.meds))
    for m in visit.meds:
        i = vocab.med_index.get(m)
        if i is None:
            _unknown("medication", m, unknown)
            continue
        meds[i] = 1.0
    fill = stats.mean if imputation == "mean" else stats.median
    raw = fill.copy()
    for name, value in visit.labs.items():
        i = vocab.lab_index.get(name)
        if i is None:
            _unknown("lab", name, unknown)
            continue
        raw[i] = value
    scale = np.where(stats.std > 0, stats.std, 1.0)
    return np.concatenate([meds, (raw - stats.mean) / scale])


@dataclass
class StaticStats:
    mean: np.ndarray
    std: np.ndarray


def fit_static_stats(patients, vocab):
    numeric = [s.name for s in vocab.static if not s.levels]
    mean, std = np.zeros(len(numeric)), np.ones(len(numeric))
    for i, name in enumerate(numeric):
        vals = np.asarray([float(p.static_features[name]) for p in patients if p.static_features.get(name) is not None])
        if len(vals):
            mean[i] = vals.mean()
            std[i] = vals.std() if vals.std() > 0 else 1.0
    return StaticStats(mean, std)


def encode_static(static_features, vocab, stats):
    parts = []
    k = 0
    for feat in vocab.static:
        value = static_features.get(feat.name)
        if feat.levels:
            block = np.zeros(len(feat.levels))
            if value in feat.levels:
                block[feat.levels.index(value)] = 1.0
            else:
                logger.warning("unknown level %r for static feature '%s'", value, feat.name)
            parts.append(block)
        else:
            x = 0.0 if value is None else (float(value) - stats.mean[k]) / stats.std[k]
            parts.append(np.array([x]))
            k += 1
    return np.concatenate(parts) if parts else np.zeros(0)


# ----------------------
# Fitted preprocessing
# ----------------------
@dataclass
class EncodedPatient:
    patient_id: str
    static: np.ndarray
    visits: np.ndarray
    targets: np.ndarray
    mask: np.ndarray


class Preprocessor:
    """Encoders fitted on the training split only."""

    def __init__(self, vocab, lab_stats, static_stats, degraded=False, imputation="mean", task="endpoint",
                 unknown="reject"):
        if task not in TASKS:
            raise ConfigError(f"unknown task '{task}'")
        if degraded and task == "next-visit":
            raise ConfigError("the next-visit task needs three-bucket preprocessing")
        if imputation not in ("mean", "median"):
            raise ConfigError(f"unknown imputation '{imputation}'")
        self.vocab = vocab
        self.lab_stats = lab_stats
        self.static_stats = static_stats
        self.degraded = degraded
        self.imputation = imputation
        self.task = task
        self.unknown = unknown

    @classmethod
    def fit(cls, train_records, vocab, **kwargs):
        return cls(vocab, fit_lab_stats(train_records, vocab), fit_static_stats(train_records, vocab), **kwargs)

    @property
    def dynamic_width(self):
        return len(self.vocab.meds) + (len(self.vocab.labs) if self.degraded else 3 * len(self.vocab.labs))

    @property
    def output_labels(self):
        if self.task == "endpoint":
            return TARGET_LABELS
        labels = list(self.vocab.meds)
        for lab in self.vocab.labs:
            labels += [f"{lab}_high", f"{lab}_normal", f"{lab}_low"]
        return tuple(labels)

    def encode_visits(self, record):
        if self.degraded:
            rows = [encode_visit_imputed(v, self.vocab, self.lab_stats, self.imputation, self.unknown)
                    for v in record.visits]
        else:
            rows = [encode_visit(v, self.vocab, self.lab_stats, self.unknown) for v in record.visits]
        return np.stack(rows)

    def encode(self, record):
        visits = self.encode_visits(record)
        if self.task == "endpoint":
            targets, mask = build_targets(record)
        else:
            targets, mask = build_next_visit_targets(visits)
        static = encode_static(record.static_features, self.vocab, self.static_stats)
        return EncodedPatient(record.patient_id, static, visits, targets, mask)

    def encode_all(self, records):
        return [self.encode(r) for r in records]

    def to_arrays(self):
        s = self.lab_stats
        return {"prep.lab_mean": s.mean, "prep.lab_std": s.std, "prep.lab_count": s.count,
                "prep.lab_median": s.median, "prep.static_mean": self.static_stats.mean,
                "prep.static_std": self.static_stats.std}

    def to_meta(self):
        return {"vocab": self.vocab.to_dict(), "degraded": self.degraded, "imputation": self.imputation,
                "task": self.task}

    @classmethod
    def from_checkpoint(cls, meta, arrays):
        stats = LabStats(arrays["prep.lab_mean"], arrays["prep.lab_std"], arrays["prep.lab_count"],
                         arrays["prep.lab_median"])
        static = StaticStats(arrays["prep.static_mean"], arrays["prep.static_std"])
        return cls(Vocabulary.from_dict(meta["vocab"]), stats, static, meta["degraded"], meta["imputation"],
                   meta["task"])


# ----------------------
# Batching
# ----------------------
@dataclass
class Batch:
    ids: list
    static: np.ndarray
    visits: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray


def make_batch(patients):
    """Zero-pad a list of EncodedPatient to a common length; padding is masked out."""
    B = len(patients)
    T = max(p.visits.shape[0] for p in patients)
    D = patients[0].visits.shape[1]
    K = patients[0].targets.shape[1]
    visits = np.zeros((B, T, D))
    targets = np.zeros((B, T, K))
    mask = np.zeros((B, T, K))
    for b, p in enumerate(patients):
        n = p.visits.shape[0]
        visits[b, :n] = p.visits
        targets[b, :n] = p.targets
        mask[b, :n] = p.mask
    static = np.stack([p.static for p in patients])
    lengths = np.array([p.visits.shape[0] for p in patients])
    return Batch([p.patient_id for p in patients], static, visits, targets, mask, lengths)


# ----------------------
# Splits
# ----------------------
def split_patients(patients, fractions=(0.6, 0.2, 0.2), rng=None):
    """Disjoint train/validation/test sets at patient granularity.

    Validation and test get floor(fraction * n) patients; the remainder goes to training.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(patients)
    if n < 3:
        raise ValueError(f"need at least 3 patients to split, got {n}")
    ordered = sorted(patients, key=lambda p: p.patient_id)
    perm = (rng or Rng(0)).permutation(n)
    n_valid = int(np.floor(fractions[1] * n))
    n_test = int(np.floor(fractions[2] * n))
    n_train = n - n_valid - n_test
    train = [ordered[i] for i in perm[:n_train]]
    valid = [ordered[i] for i in perm[n_train:n_train + n_valid]]
    test = [ordered[i] for i in perm[n_train + n_valid:]]
    return train, valid, test


# ----------------------
# Synthetic cohorts
# ----------------------
RISK_GROUPS = ("low", "medium", "high")
RISK_PROBS = (0.4, 0.4, 0.2)
RISK_MULTIPLIER = {"low": 0.5, "medium": 1.0, "high": 2.0}
PRIMARY_KIND_PROBS = (0.55, 0.2, 0.25)
RESERVED_MEDS = 5


@dataclass
class GenConfig:
    patients: int = 2000
    min_visits: int = 10
    max_visits: int = 30
    min_gap_days: int = 25
    max_gap_days: int = 35
    follow_up_days: int = 365
    n_meds: int = 40
    n_labs: int = 20
    med_rate: float = 0.08
    lab_missing: float = 0.2
    endpoint_rate: float = 0.384
    extra_kind_prob: float = 0.45
    static_risk: bool = True
    warning_signal: float = 0.7
    warning_days: int = 120
    lab_extremes: bool = False
    motif: bool = False
    motif_gap: int = 10
    motif_rate: float = 0.6
    motif_strength: float = 0.9
    recent_trigger: bool = False
    trigger_rate: float = 0.04
    post_rejection_visits: bool = True

    def __post_init__(self):
        if self.patients < 1:
            raise ValueError("patients must be at least 1")
        if not 1 <= self.min_visits <= self.max_visits:
            raise ValueError("need 1 <= min_visits <= max_visits")
        if not 1 <= self.min_gap_days <= self.max_gap_days:
            raise ValueError("need 1 <= min_gap_days <= max_gap_days")
        if self.n_meds < RESERVED_MEDS or self.n_labs < RESERVED_MEDS:
            raise ValueError(f"need at least {RESERVED_MEDS} medications and labs")
        for name in ("med_rate", "lab_missing", "endpoint_rate", "extra_kind_prob", "warning_signal",
                     "motif_rate", "motif_strength", "trigger_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.motif and self.motif_gap + 17 > self.max_visits:
            raise ValueError(f"motif_gap={self.motif_gap} is infeasible with max_visits={self.max_visits} "
                             f"(needs max_visits >= motif_gap + 17)")

    @classmethod
    def preset(cls, name, **overrides):
        presets = {
            "default": {},
            # order-sensitive long-memory motif, little else to learn from
            "motif": dict(patients=1500, min_visits=28, max_visits=36, endpoint_rate=0.05, static_risk=False,
                          warning_signal=0.0, motif=True),
            # endpoints announced by the previous two visits only
            "recency": dict(patients=1500, endpoint_rate=0.0, static_risk=False, warning_signal=0.0,
                            recent_trigger=True),
            # symmetric lab deviations (no medication hint) with 20% missing measurements
            "extremes": dict(lab_extremes=True, lab_missing=0.2, warning_signal=0.8),
        }
        if name not in presets:
            raise ConfigError(f"unknown generator preset '{name}' (choose from {', '.join(presets)})")
        return cls(**{**presets[name], **overrides})


def make_vocab(cfg):
    static = [
        StaticFeature("gender", ("f", "m")),
        StaticFeature("blood_type", ("A", "B", "AB", "O")),
        StaticFeature("primary_disease", tuple(f"disease_{i}" for i in range(5))),
        StaticFeature("risk_group", RISK_GROUPS),
        StaticFeature("age"),
        StaticFeature("donor_age"),
    ]
    return Vocabulary([f"med_{i:03d}" for i in range(cfg.n_meds)], [f"lab_{i:03d}" for i in range(cfg.n_labs)], static)


def _visit_days(rng, cfg, T):
    gaps = rng.integers(cfg.min_gap_days, cfg.max_gap_days + 1, size=T - 1)
    return [0] + np.cumsum(gaps).astype(int).tolist()


def _generate_patient(i, cfg, vocab, rng):
    meds, labs = vocab.meds, vocab.labs
    static = {
        "gender": str(rng.choice(["f", "m"])),
        "blood_type": str(rng.choice(["A", "B", "AB", "O"], p=[0.4, 0.11, 0.04, 0.45])),
        "primary_disease": f"disease_{int(rng.integers(0, 5))}",
        "risk_group": str(rng.choice(RISK_GROUPS, p=RISK_PROBS)),
        "age": round(float(rng.normal(50.0, 12.0)), 1),
        "donor_age": round(float(rng.normal(45.0, 14.0)), 1),
    }
    T = int(rng.integers(cfg.min_visits, cfg.max_visits + 1))

    # motif markers: med_000 and a lab_000 spike, in either order, >= motif_gap visits apart
    motif = None
    if cfg.motif and rng.random() < cfg.motif_rate:
        a = int(rng.integers(0, 3))
        b = a + cfg.motif_gap + int(rng.integers(0, 3))
        T = max(T, b + 13)
        motif = (a, b, rng.random() < 0.5)
    days = _visit_days(rng, cfg, T)

    events = []
    mult = RISK_MULTIPLIER[static["risk_group"]] if cfg.static_risk else 1.0
    if rng.random() < min(1.0, cfg.endpoint_rate * mult):
        primary = ENDPOINT_KINDS[int(rng.choice(3, p=PRIMARY_KIND_PROBS))]
        kinds = [k for k in ENDPOINT_KINDS if k == primary or rng.random() < cfg.extra_kind_prob]
        for kind in kinds:
            if kind == "death":
                continue
            j = int(rng.integers(0, T))
            nxt = days[j + 1] if j + 1 < T else days[j] + cfg.max_gap_days
            events.append(EndpointEvent(kind, days[j] + int(rng.integers(1, max(2, nxt - days[j])))))
        if "death" in kinds:
            day = days[-1] + int(rng.integers(1, cfg.follow_up_days))
            day = max([day] + [e.day + 1 for e in events])
            events.append(EndpointEvent("death", day))

    if motif is not None:
        a, b, ordered = motif
        if ordered and rng.random() < cfg.motif_strength:
            events.append(EndpointEvent("rejection", days[b] + int(rng.integers(300, 366))))

    # trigger losses continue at the same rate on virtual visit dates through follow-up;
    # only the last two real visits carry signal
    triggers = set()
    if cfg.recent_trigger:
        ext = list(days)
        while ext[-1] < days[-1] + cfg.follow_up_days + 2 * cfg.max_gap_days:
            ext.append(ext[-1] + int(rng.integers(cfg.min_gap_days, cfg.max_gap_days + 1)))
        for j in range(len(ext) - 2):
            if rng.random() < cfg.trigger_rate:
                day = ext[j] + int(rng.integers(1, ext[j + 2] - ext[j]))
                if j < T:
                    triggers.add(j)
                elif day > days[-1] + cfg.follow_up_days:
                    continue
                events.append(EndpointEvent("loss", day))

    # warning pattern in the run-up to each background endpoint
    warned = {}
    for e in events:
        if e.kind == "rejection" and motif is not None:
            continue
        k = ENDPOINT_KINDS.index(e.kind)
        for j, d in enumerate(days):
            if e.day - cfg.warning_days <= d < e.day and rng.random() < cfg.warning_signal:
                warned.setdefault(j, set()).add(k)

    baseline = rng.normal(0.0, 0.5, size=len(labs))
    visits = []
    for j, d in enumerate(days):
        visit_meds = {meds[m] for m in range(RESERVED_MEDS, len(meds)) if rng.random() < cfg.med_rate}
        visit_labs = {}
        for li, lab in enumerate(labs):
            if rng.random() >= cfg.lab_missing:
                if cfg.motif and li == 0:
                    visit_labs[lab] = round(float(rng.normal(1.0, 0.05)), 4)
                else:
                    visit_labs[lab] = round(float(rng.normal(baseline[li], 1.0)), 4)
        for k in warned.get(j, ()):
            lab = labs[1 + k]
            if lab in visit_labs:
                shift = 2.5 if not cfg.lab_extremes or rng.random() < 0.5 else -2.5
                visit_labs[lab] = round(float(baseline[1 + k]) + shift + float(rng.normal(0.0, 0.3)), 4)
            if not cfg.lab_extremes and rng.random() < 0.5:
                visit_meds.add(meds[1 + k])
        if j in triggers:
            visit_labs[labs[4]] = round(float(baseline[4]) + 3.0, 4)
            visit_meds.add(meds[4])
        if motif is not None:
            a, b, ordered = motif
            med_at, lab_at = (a, b) if ordered else (b, a)
            if j == med_at:
                visit_meds.add(meds[0])
            if j == lab_at:
                visit_labs[labs[0]] = 5.0
        visits.append(Visit(int(d), tuple(sorted(visit_meds)), dict(sorted(visit_labs.items()))))

    if not cfg.post_rejection_visits:
        rejections = [e.day for e in events if e.kind == "rejection"]
        if rejections:
            first = min(rejections)
            visits = [v for v in visits if v.day <= first] or visits[:1]

    events.sort(key=lambda e: (e.day, e.kind))
    deaths = [e.day for e in events if e.kind == "death"]
    last_follow_up = deaths[0] if deaths else max([visits[-1].day + cfg.follow_up_days] + [e.day for e in events])
    return PatientRecord(f"P{i:06d}", static, visits, events, int(last_follow_up))


def generate_cohort(cfg, seed):
    """Deterministic synthetic cohort; every patient draws from its own Rng substream."""
    vocab = make_vocab(cfg)
    root = Rng(seed).substream("cohort")
    records = [_generate_patient(i, cfg, vocab, root.substream(f"patient/{i}")) for i in range(cfg.patients)]
    for rec in records:
        rec.validate()
    return records, vocab


def cohort_summary(records):
    """Pooled target density over evaluable entries and the share of patients with an endpoint."""
    ones = evaluable = visits = 0
    for rec in records:
        targets, mask = build_targets(rec)
        ones += float((targets * mask).sum())
        evaluable += float(mask.sum())
        visits += len(rec.visits)
    with_event = sum(1 for r in records if r.endpoint_events)
    return {
        "patients": len(records),
        "visits": visits,
        "target_density": ones / evaluable if evaluable else 0.0,
        "endpoint_patient_fraction": with_event / len(records) if records else 0.0,
        "evaluable_fraction": evaluable / (6 * visits) if visits else 0.0,
    }
