"""Experiment grids (RQ1 / RQ2 / single), seed derivation, run files and reports.

Run directory layout::

    <output_dir>/
      plan.json                      every planned run key
      metrics.csv                    one row per run
      stats.csv                      one row per comparison
      runs/<approach>/f<permille>/r<run_id>/
          history.csv  best.ckpt  predictions_test.csv  run.json  timing.json

Everything except ``timing.json`` is a pure function of the config.
"""

import csv
import hashlib
import io
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stats
from .core import DeterministicRng
from .data import RQ2_FRACTIONS, SyntheticSpec, fractional_sample, generate_synthetic, load_dataset
from .errors import ConfigError, DegenerateInputError, ReportError
from .metrics import contingency
from .model import ModelConfig, save_checkpoint
from .training import APPROACHES, BASELINE, IMAGE_STILT, TEXT_STILT, ProtocolSpec, TrainConfig, run_protocol

log = logging.getLogger(__name__)

EXPERIMENTS = ("rq1", "rq2", "single")
BAND = (0.5, 0.8)

METRICS_COLUMNS = [
    "approach", "fraction", "run_id", "subset_fingerprint", "n_train",
    "weighted_f1", "weighted_precision", "weighted_recall",
]
STATS_COLUMNS = ["comparison", "scope", "n", "n_used", "W", "p", "method", "note"]
HISTORY_COLUMNS = ["epoch", "stage", "train_loss", "val_loss", "val_weighted_f1", "lr"]


def derive_seed(master_seed, *labels):
    """63-bit seed from a keyed hash of ``(master_seed, *labels)``."""
    blob = json.dumps([int(master_seed), *[str(x) for x in labels]]).encode()
    digest = hashlib.blake2b(blob, digest_size=8, key=b"stilt-bench-seed").digest()
    return int.from_bytes(digest, "little") >> 1


def fraction_label(fraction):
    return f"{float(fraction):.6g}"


def subset_fingerprint(records):
    ids = sorted(r.id for r in records)
    return hashlib.sha256("\n".join(ids).encode()).hexdigest()[:16]


@dataclass
class ExperimentConfig:
    experiment: str = "single"
    approaches: tuple = APPROACHES
    restarts: int = None
    fractions: tuple = None
    datasets: dict = None
    synthetic: dict = None
    model_config: dict = field(default_factory=dict)
    meme_config: dict = field(default_factory=dict)
    intermediate_config: dict = field(default_factory=dict)
    master_seed: int = 0
    output_dir: str = "runs"
    parallel_runs: int = 1
    base_dir: str = "."

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        self.approaches = tuple(self.approaches)
        for a in self.approaches:
            if a not in APPROACHES:
                raise ConfigError(f"unknown approach {a!r}")
        if not self.approaches:
            raise ConfigError("at least one approach is required")
        if self.restarts is None:
            self.restarts = 5 if self.experiment == "rq2" else 10
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.fractions is None:
            self.fractions = RQ2_FRACTIONS if self.experiment == "rq2" else (1.0,)
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.fractions:
            raise ConfigError("fractions must be non-empty")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"fraction {f} outside (0, 1]")
        if self.experiment == "rq1" and self.fractions != (1.0,):
            raise ConfigError("rq1 uses the full meme training set (fractions = [1.0])")
        if (self.datasets is None) == (self.synthetic is None):
            raise ConfigError("give exactly one of 'datasets' or 'synthetic'")
        if self.parallel_runs < 1:
            raise ConfigError("parallel_runs must be >= 1")
        # fail fast on malformed stage configs
        self.train_configs()
        self.model()

    @classmethod
    def from_dict(cls, d, base_dir="."):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        d = dict(d)
        d.setdefault("base_dir", str(base_dir))
        return cls(**d)

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: cannot read config ({exc})") from None
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self):
        return {
            "experiment": self.experiment,
            "approaches": list(self.approaches),
            "restarts": self.restarts,
            "fractions": list(self.fractions),
            "datasets": self.datasets,
            "synthetic": self.synthetic,
            "model_config": self.model_config,
            "meme_config": self.meme_config,
            "intermediate_config": self.intermediate_config,
            "master_seed": self.master_seed,
        }

    def train_configs(self):
        return (
            TrainConfig.memes(**self.meme_config),
            TrainConfig.unimodal(**self.intermediate_config),
        )

    def model(self):
        return ModelConfig(**self.model_config)

    def resolve(self, p):
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def run_keys(self):
        return [
            (approach, fraction, run_id)
            for approach in self.approaches
            for fraction in self.fractions
            for run_id in range(self.restarts)
        ]


# -- dataset loading (cached per process) ---------------------------------------------

_DATA_CACHE = {}


def load_datasets(config):
    key = json.dumps([config.datasets, config.synthetic, config.base_dir], sort_keys=True)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    if config.synthetic is not None:
        raw = config.synthetic
        if isinstance(raw, str):
            try:
                raw = json.loads(config.resolve(raw).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"{raw}: cannot read synthetic spec ({exc})") from None
        spec = SyntheticSpec.from_dict(raw)
        generated = generate_synthetic(spec)
        p = spec.name_prefix
        out = {"memes": generated[p + "memes"], "images": generated[p + "images"],
               "texts": generated[p + "texts"]}
    else:
        out = {}
        for name in ("memes", "images", "texts"):
            path = config.datasets.get(name)
            out[name] = load_dataset(config.resolve(path)) if path else None
    _DATA_CACHE.clear()
    _DATA_CACHE[key] = out
    return out


def check_datasets(config, data):
    if data["memes"] is None:
        raise ConfigError("a meme dataset is required")
    for approach, name in ((IMAGE_STILT, "images"), (TEXT_STILT, "texts")):
        if approach in config.approaches and data[name] is None:
            raise ConfigError(f"approach {approach} needs the '{name}' dataset")


# -- one run ------------------------------------------------------------------------

def run_dir_for(out_dir, approach, fraction, run_id):
    return Path(out_dir) / "runs" / approach / f"f{round(fraction * 1000):04d}" / f"r{run_id:02d}"


def _fmt(x):
    return repr(float(x))


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([row[c] for c in columns])
    Path(path).write_text(buf.getvalue())


def execute_run(config, key, out_dir):
    """Train one (approach, fraction, run_id) and write its files. Returns run.json content."""
    approach, fraction, run_id = key
    started = time.perf_counter()
    data = load_datasets(config)
    meme_manifest, meme_splits = data["memes"]
    subset_seed = derive_seed(config.master_seed, "subset", fraction_label(fraction), run_id)
    if fraction < 1.0:
        subset = fractional_sample(meme_splits["train"], fraction, DeterministicRng(subset_seed))
    else:
        subset = list(meme_splits["train"])
    seed = derive_seed(config.master_seed, "run", approach, fraction_label(fraction), run_id)
    meme_cfg, inter_cfg = config.train_configs()
    intermediate = {IMAGE_STILT: data["images"], TEXT_STILT: data["texts"]}.get(approach)
    result = run_protocol(ProtocolSpec(
        kind=approach,
        memes=data["memes"],
        intermediate=intermediate,
        meme_config=meme_cfg,
        intermediate_config=inter_cfg,
        model_config=config.model(),
        seed=seed,
        meme_train=subset,
    ))

    rd = run_dir_for(out_dir, approach, fraction, run_id)
    rd.mkdir(parents=True, exist_ok=True)
    history = result.history
    _write_csv(rd / "history.csv", HISTORY_COLUMNS, [
        {**row, "train_loss": _fmt(row["train_loss"]), "val_loss": _fmt(row["val_loss"]),
         "val_weighted_f1": _fmt(row["val_weighted_f1"]), "lr": _fmt(row["lr"])}
        for row in history
    ])
    pred_rows = [
        {"id": rid, "label": int(y), "predicted": int(p),
         "logit_negative": _fmt(lg[0]), "logit_neutral": _fmt(lg[1]), "logit_positive": _fmt(lg[2])}
        for rid, y, p, lg in zip(result.test_ids, result.test_labels,
                                 result.test_predictions, result.test_logits)
    ]
    _write_csv(rd / "predictions_test.csv",
               ["id", "label", "predicted", "logit_negative", "logit_neutral", "logit_positive"],
               pred_rows)
    fingerprint = subset_fingerprint(subset)
    save_checkpoint(rd / "best.ckpt", result.params, extra={
        "approach": approach, "fraction": fraction, "run_id": run_id, "seed": seed,
    })
    rep = result.report
    record = {
        "approach": approach,
        "fraction": fraction,
        "run_id": run_id,
        "seed": seed,
        "subset_seed": subset_seed,
        "subset_fingerprint": fingerprint,
        "n_train": len(subset),
        "metrics": {
            "weighted_f1": rep.weighted_f1,
            "weighted_precision": rep.weighted_precision,
            "weighted_recall": rep.weighted_recall,
            "per_class_f1": list(rep.f1),
        },
        "stages": [
            {"stage": st.stage, "best_epoch": st.best_epoch, "best_value": st.best_value,
             "epochs_run": len(st.history), "history": st.history}
            for st in result.stages
        ],
    }
    (rd / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    (rd / "timing.json").write_text(json.dumps({"wall_time_s": time.perf_counter() - started}) + "\n")
    return record


def _worker(args):
    config_dict, base_dir, key, out_dir = args
    config = ExperimentConfig.from_dict(config_dict, base_dir=base_dir)
    return execute_run(config, key, out_dir)


# -- aggregation ---------------------------------------------------------------------

def _sort_key(row):
    return (APPROACHES.index(row["approach"]), float(row["fraction"]), int(row["run_id"]))


def metrics_rows(records):
    rows = []
    for rec in sorted(records, key=_sort_key):
        m = rec["metrics"]
        rows.append({
            "approach": rec["approach"],
            "fraction": fraction_label(rec["fraction"]),
            "run_id": rec["run_id"],
            "subset_fingerprint": rec["subset_fingerprint"],
            "n_train": rec["n_train"],
            "weighted_f1": _fmt(m["weighted_f1"]),
            "weighted_precision": _fmt(m["weighted_precision"]),
            "weighted_recall": _fmt(m["weighted_recall"]),
        })
    return rows


def _pairs(rows, other, fractions):
    by_key = {(r["approach"], float(r["fraction"]), int(r["run_id"])): r for r in rows}
    pairs = []
    for (approach, fraction, run_id), r in sorted(by_key.items(), key=lambda kv: kv[0][1:]):
        if approach != BASELINE or fraction not in fractions:
            continue
        partner = by_key.get((other, fraction, run_id))
        if partner is None:
            continue
        if partner["subset_fingerprint"] != r["subset_fingerprint"]:
            raise ReportError(
                f"unmatched pair at fraction {fraction}, run {run_id}: subset fingerprints differ"
            )
        pairs.append(stats.PairedSample(run_id, float(r["weighted_f1"]), float(partner["weighted_f1"])))
    return pairs


def comparisons(rows):
    """Baseline-vs-X signed-rank tests: pooled over all fractions, plus the 50-80% band."""
    approaches = {r["approach"] for r in rows}
    fractions = sorted({float(r["fraction"]) for r in rows})
    scopes = [("all", set(fractions))]
    band = {f for f in fractions if BAND[0] <= f <= BAND[1]}
    if band and band != set(fractions):
        scopes.append(("band_50_80", band))
    out = []
    if BASELINE not in approaches:
        return out
    for other in (IMAGE_STILT, TEXT_STILT):
        if other not in approaches:
            continue
        for scope, fset in scopes:
            pairs = _pairs(rows, other, fset)
            row = {"comparison": f"{BASELINE}_vs_{other}", "scope": scope, "n": len(pairs),
                   "n_used": 0, "W": "", "p": "", "method": "degenerate", "note": ""}
            try:
                res = stats.wilcoxon_signed_rank(pairs)
            except DegenerateInputError as exc:
                row["note"] = f"degenerate: {exc}"
                log.warning("%s (%s): %s", row["comparison"], scope, exc)
            else:
                row.update(n_used=res.n_used, W=_fmt(res.W), p=_fmt(res.p_two_sided),
                           method=res.method)
                if res.n_used < 6:
                    row["note"] = (f"warning: only {res.n_used} non-zero pairs; "
                                   "the two-sided p-value cannot reach 0.05")
            out.append(row)
    return out


def write_aggregates(out_dir, records):
    rows = metrics_rows(records)
    _write_csv(Path(out_dir) / "metrics.csv", METRICS_COLUMNS, rows)
    _write_csv(Path(out_dir) / "stats.csv", STATS_COLUMNS, comparisons(rows))
    return rows


def run_experiment(config, out_dir=None):
    """Run every planned key, then aggregate. Returns the run records in sorted order."""
    out_dir = Path(out_dir) if out_dir is not None else config.resolve(config.output_dir)
    data = load_datasets(config)
    check_datasets(config, data)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = config.run_keys()
    plan = {"config": config.to_dict(), "runs": [
        {"approach": a, "fraction": f, "run_id": r} for a, f, r in keys
    ]}
    (out_dir / "plan.json").write_text(json.dumps(plan, indent=1, sort_keys=True) + "\n")

    if config.parallel_runs > 1 and len(keys) > 1:
        jobs = [(config.to_dict(), config.base_dir, k, str(out_dir)) for k in keys]
        with ProcessPoolExecutor(max_workers=config.parallel_runs) as pool:
            records = list(pool.map(_worker, jobs))
    else:
        records = []
        for i, key in enumerate(keys):
            log.info("run %d/%d: %s fraction=%s run=%d", i + 1, len(keys), key[0], key[1], key[2])
            records.append(execute_run(config, key, out_dir))
    write_aggregates(out_dir, records)
    return sorted(records, key=_sort_key)


def cmd_run_rq1(config, out_dir=None):
    if config.experiment != "rq1":
        raise ConfigError("cmd_run_rq1 needs experiment = 'rq1'")
    return run_experiment(config, out_dir)


def cmd_run_rq2(config, out_dir=None):
    if config.experiment != "rq2":
        raise ConfigError("cmd_run_rq2 needs experiment = 'rq2'")
    return run_experiment(config, out_dir)


# -- report ----------------------------------------------------------------------------

def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def collect_runs(run_dir):
    run_dir = Path(run_dir)
    plan_path = run_dir / "plan.json"
    found = sorted(run_dir.glob("runs/*/*/*/run.json"))
    if not plan_path.exists() and not found:
        raise ReportError(f"no runs found in {run_dir}")
    missing = []
    if plan_path.exists():
        plan = json.loads(plan_path.read_text())
        keys = [(r["approach"], float(r["fraction"]), int(r["run_id"])) for r in plan["runs"]]
    else:
        keys = []
        for p in found:
            rec = json.loads(p.read_text())
            keys.append((rec["approach"], float(rec["fraction"]), int(rec["run_id"])))
    records = []
    for key in keys:
        rd = run_dir_for(run_dir, *key)
        need = [rd / n for n in ("run.json", "predictions_test.csv", "history.csv", "best.ckpt")]
        gone = [str(p.relative_to(run_dir)) for p in need if not p.exists()]
        if gone:
            missing.extend(gone)
            continue
        rec = json.loads((rd / "run.json").read_text())
        rec["_predictions"] = _read_csv(rd / "predictions_test.csv")
        records.append(rec)
    if missing:
        raise ReportError(f"incomplete run directory {run_dir}; missing: " + ", ".join(missing))
    if not records:
        raise ReportError(f"no runs found in {run_dir}")
    return records


def _summ(values):
    s = stats.summarize(values)
    return _fmt(s.mean), _fmt(s.std)


def table4_rows(records, stats_rows):
    fractions = sorted({float(r["fraction"]) for r in records})
    target = 1.0 if 1.0 in fractions else fractions[-1]
    p_lookup = {r["comparison"]: r["p"] for r in stats_rows if r["scope"] == "all"}
    rows = []
    for approach in APPROACHES:
        sel = [r for r in records if r["approach"] == approach and float(r["fraction"]) == target]
        if not sel:
            continue
        f1m, f1s = _summ([r["metrics"]["weighted_f1"] for r in sel])
        pm, ps = _summ([r["metrics"]["weighted_precision"] for r in sel])
        rm, rs = _summ([r["metrics"]["weighted_recall"] for r in sel])
        rows.append({
            "approach": approach, "fraction": fraction_label(target), "n": len(sel),
            "f1_mean": f1m, "f1_std": f1s, "precision_mean": pm, "precision_std": ps,
            "recall_mean": rm, "recall_std": rs,
            "p_vs_baseline": "" if approach == BASELINE else p_lookup.get(f"{BASELINE}_vs_{approach}", ""),
        })
    return rows


def fig4_rows(records):
    groups = {}
    for r in records:
        groups.setdefault((float(r["fraction"]), r["approach"]), []).append(r["metrics"]["weighted_f1"])
    rows = []
    for (fraction, approach) in sorted(groups, key=lambda k: (k[0], APPROACHES.index(k[1]))):
        mean, std = _summ(groups[(fraction, approach)])
        rows.append({"fraction": fraction_label(fraction), "approach": approach,
                     "n": len(groups[(fraction, approach)]), "mean": mean, "std": std})
    return rows


def _best(records, approach):
    sel = [r for r in records if r["approach"] == approach]
    if not sel:
        return None
    return max(sel, key=lambda r: (r["metrics"]["weighted_f1"], -r["run_id"], r["fraction"]))


def contingency_rows(records):
    a, b = _best(records, TEXT_STILT), _best(records, BASELINE)
    if a is None or b is None:
        return []
    pa = {row["id"]: row for row in a["_predictions"]}
    pb = {row["id"]: row for row in b["_predictions"]}
    if set(pa) != set(pb):
        raise ReportError("best runs were evaluated on different test sets")
    ids = sorted(pa)
    labels = np.array([int(pa[i]["label"]) for i in ids])
    table = contingency(labels,
                        np.array([int(pa[i]["predicted"]) for i in ids]),
                        np.array([int(pb[i]["predicted"]) for i in ids]))
    tag = lambda r: f"{r['approach']}/f{fraction_label(r['fraction'])}/r{r['run_id']}"  # noqa: E731
    return [{
        "model_a": tag(a), "model_b": tag(b),
        "both_correct": table.both_correct, "only_a_correct": table.only_a_correct,
        "only_b_correct": table.only_b_correct, "both_wrong": table.both_wrong,
        "total": table.total,
    }]


TABLE4_COLUMNS = ["approach", "fraction", "n", "f1_mean", "f1_std", "precision_mean",
                  "precision_std", "recall_mean", "recall_std", "p_vs_baseline"]
FIG4_COLUMNS = ["fraction", "approach", "n", "mean", "std"]
CONTINGENCY_COLUMNS = ["model_a", "model_b", "both_correct", "only_a_correct",
                       "only_b_correct", "both_wrong", "total"]


def cmd_report(run_dir):
    """Write table4.csv, fig4.csv, contingency.csv and stats.csv into ``run_dir``."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ReportError(f"no runs found: {run_dir} is not a directory")
    records = collect_runs(run_dir)
    rows = metrics_rows(records)
    stats_rows = comparisons(rows)
    _write_csv(run_dir / "stats.csv", STATS_COLUMNS, stats_rows)
    _write_csv(run_dir / "table4.csv", TABLE4_COLUMNS, table4_rows(records, stats_rows))
    _write_csv(run_dir / "fig4.csv", FIG4_COLUMNS, fig4_rows(records))
    _write_csv(run_dir / "contingency.csv", CONTINGENCY_COLUMNS, contingency_rows(records))
    return {name: run_dir / name for name in ("table4.csv", "fig4.csv", "contingency.csv", "stats.csv")}
