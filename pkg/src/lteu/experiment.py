"""Sweeps, paired replications, aggregation and result files."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from . import harness as hs
from .config import MECHANISMS, Scenario
from .errors import InfeasibleDemandError

log = logging.getLogger(__name__)

SCALAR_METRICS = ("mean_rate", "qos_fraction", "mean_user_utility", "offloaded_traffic",
                  "licensed_traffic", "unmatched_traffic", "requested_traffic")
MANIFEST_FORMAT = "lteu-manifest"


@dataclass
class ExperimentRecord:
    mechanism: str
    sweep_value: int
    replication: int
    seed: int
    mean_rate: float = 0.0
    qos_fraction: float = 0.0
    mean_user_utility: float = 0.0
    offloaded_traffic: int = 0
    licensed_traffic: int = 0
    unmatched_traffic: int = 0
    requested_traffic: int = 0
    offloaded_by_type: tuple = ()
    licensed_by_type: tuple = ()
    conserved: bool = True
    power_capped: bool = False
    proposals: int = 0
    failed: str | None = None


def run_replication(scenario, sweep_value, index, mechanisms):
    """Records for several mechanisms on one shared (paired) replication."""
    rep = hs.prepare(scenario, sweep_value, index)
    out = []
    for mech in mechanisms:
        try:
            outcome = hs.run_mechanism(rep, mech)
        except InfeasibleDemandError as exc:
            log.warning("replication %s/%s %s failed: %s", sweep_value, index, mech, exc)
            out.append(ExperimentRecord(mech, rep.sweep_value, index, rep.seed, failed=str(exc)))
            continue
        fields = hs.compute_metrics(outcome, rep.types, len(rep.grid), rep.rates)
        fields["offloaded_by_type"] = tuple(fields["offloaded_by_type"])
        fields["licensed_by_type"] = tuple(fields["licensed_by_type"])
        out.append(ExperimentRecord(mech, rep.sweep_value, index, rep.seed,
                                    conserved=hs.traffic_conserved(outcome),
                                    power_capped=outcome.power_capped,
                                    proposals=outcome.proposals, **fields))
    return out


def run_experiment(scenario, mechanisms=None, progress=None):
    """All sweep points and replications; records ordered by (value, replication, mechanism)."""
    scenario.validate()
    mechanisms = tuple(mechanisms or (scenario.experiment.mechanism,))
    for mech in mechanisms:
        if mech not in MECHANISMS:
            raise ValueError(f"unknown mechanism {mech!r}")
    records = []
    exp = scenario.experiment
    for value in exp.sweep_values:
        for index in range(exp.replications):
            records.extend(run_replication(scenario, value, index, mechanisms))
            if progress is not None:
                progress(value, index)
    return records


def _run(scenario, mechanism):
    return [r for r in run_experiment(scenario, (mechanism,)) if r.mechanism == mechanism]


def run_proposed(scenario):
    return _run(scenario, "proposed")


def run_complete_information(scenario):
    return _run(scenario, "complete-info")


def run_uniform_pricing(scenario):
    return _run(scenario, "uniform-price")


def run_random_allocation(scenario):
    return _run(scenario, "random")


def aggregate(records, mechanism=None):
    """``{sweep_value: {metric: (mean, stderr, n)}}`` over successful replications."""
    out = {}
    values = sorted({r.sweep_value for r in records})
    for value in values:
        rows = [r for r in records if r.sweep_value == value and r.failed is None
                and (mechanism is None or r.mechanism == mechanism)]
        stats = {}
        for metric in SCALAR_METRICS:
            x = np.array([getattr(r, metric) for r in rows], dtype=float)
            n = x.size
            mean = float(x.mean()) if n else math.nan
            se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
            stats[metric] = (mean, se, n)
        if rows:
            k = len(rows[0].offloaded_by_type)
            for j in range(k):
                for name in ("offloaded_by_type", "licensed_by_type"):
                    x = np.array([getattr(r, name)[j] for r in rows], dtype=float)
                    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0
                    stats[f"{name.split('_')[0]}_type{j + 1}"] = (float(x.mean()), se, x.size)
        out[value] = stats
    return out


def records_to_csv(records, scenario, mechanism):
    """CSV text with columns sweep_value, metric, mean, stderr, seed."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["sweep_value", "metric", "mean", "stderr", "seed"])
    for value, stats in aggregate(records, mechanism).items():
        for metric, (mean, se, _) in stats.items():
            writer.writerow([value, metric, repr(mean), repr(se), scenario.experiment.base_seed])
    return buf.getvalue()


def build_manifest(scenario, records, mechanisms, files=()):
    return {
        "format": MANIFEST_FORMAT,
        "version": 1,
        "package_version": __version__,
        "config_hash": scenario.content_hash(),
        "scenario": scenario.to_dict(),
        "mechanisms": list(mechanisms),
        "files": list(files),
        "records": [asdict(r) for r in records],
    }


def manifest_json(manifest):
    return json.dumps(manifest, indent=1, sort_keys=True)


def replay(manifest):
    """Regenerate the records of a manifest from its scenario echo."""
    scenario = Scenario.from_dict(manifest["scenario"])
    if scenario.content_hash() != manifest["config_hash"]:
        raise ValueError("manifest scenario does not match its hash")
    return run_experiment(scenario, manifest["mechanisms"])


def regenerate_record(manifest, record):
    """Recompute one record (by mechanism, sweep value and replication)."""
    scenario = Scenario.from_dict(manifest["scenario"])
    rec = record if isinstance(record, dict) else asdict(record)
    fresh = run_replication(scenario, rec["sweep_value"], rec["replication"], (rec["mechanism"],))
    return fresh[0]


def flattening_point(sweep_values, series, slope_threshold=0.25):
    """First sweep value from which every later slope is below ``slope_threshold``
    times the steepest slope seen; ``None`` if the series never flattens."""
    x = np.asarray(sweep_values, dtype=float)
    y = np.asarray(series, dtype=float)
    if x.size < 3:
        return None
    slopes = np.diff(y) / np.diff(x)
    peak = np.max(np.abs(slopes))
    if peak == 0:
        return None
    flat = np.abs(slopes) <= slope_threshold * peak
    for i in range(flat.size):
        if flat[i:].all():
            return int(x[i])
    return None
