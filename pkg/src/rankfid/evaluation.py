"""SRCC evaluation, the multi-session protocol and report tables."""

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import ValidationError, derive_seed, linear_rescale, split_database
from .model import raster_batch
from .pairgen import combine, sample_pairs
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


class UndefinedCorrelation(ValueError):
    pass


def average_ranks(values):
    """1-based ranks; tied values share the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values))
    start = 0
    for end in range(1, len(values) + 1):
        if end == len(values) or sorted_vals[end] != sorted_vals[start]:
            ranks[order[start:end]] = 0.5 * (start + end - 1) + 1.0
            start = end
    return ranks


def srcc(pred, gt):
    """Spearman rank-order correlation: Pearson correlation of average ranks."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise UndefinedCorrelation(f"length mismatch: {pred.shape} vs {gt.shape}")
    if len(pred) < 2:
        raise UndefinedCorrelation("need at least two samples")
    rp, rg = average_ranks(pred), average_ranks(gt)
    dp, dg = rp - rp.mean(), rg - rg.mean()
    vp, vg = float(dp @ dp), float(dg @ dg)
    if vp == 0 or vg == 0:
        raise UndefinedCorrelation("constant input: correlation undefined")
    # one square root keeps identical rankings at exactly +-1
    return float(np.clip((dp @ dg) / np.sqrt(vp * vg), -1.0, 1.0))


def predict_scores(net, store, image_ids, chunk=64):
    """Eval-mode quality scores f for ``image_ids``."""
    out = []
    with ad.no_grad():
        for start in range(0, len(image_ids), chunk):
            ids = image_ids[start:start + chunk]
            f, _ = net.forward(raster_batch([store[i] for i in ids], net.dtype), training=False)
            out.append(np.asarray(f.data, dtype=np.float64))
    return np.concatenate(out) if out else np.zeros(0)


def evaluate(net, manifest, test_ids, store):
    """SRCC between predicted f and the stored (higher-is-better) MOS on ``test_ids``."""
    if len(test_ids) < 2:
        raise UndefinedCorrelation("evaluation needs at least two test images")
    records = manifest.by_id()
    mos = [records[i].mos for i in test_ids]
    return srcc(predict_scores(net, store, list(test_ids)), mos)


def lower_median(values):
    vals = sorted(values)
    if not vals:
        return math.nan
    return vals[(len(vals) - 1) // 2]


@dataclass
class SessionReport:
    seed: int
    variant: str
    splits: dict  # database_id -> {"train": n, "test": n}
    srcc: dict  # database_id -> float (nan for failed cells)
    config_digest: str
    errors: dict = field(default_factory=dict)


@dataclass
class MedianReport:
    databases: list
    variants: dict = field(default_factory=dict)  # variant -> {database_id: median}
    digests: dict = field(default_factory=dict)  # variant -> config digest
    kinds: dict = field(default_factory=dict)  # variant -> loss kind
    sessions: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "databases": self.databases,
            "variants": self.variants,
            "digests": self.digests,
            "kinds": self.kinds,
            "sessions": [s.__dict__ for s in self.sessions],
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, doc):
        rep = cls(doc["databases"], doc["variants"], doc["digests"], doc.get("kinds", {}),
                  warnings=doc.get("warnings", []))
        rep.sessions = [SessionReport(**s) for s in doc.get("sessions", [])]
        return rep


def run_session(manifests, store, config, pairs_per_db, seed, train_fraction=0.8, variant=None):
    """One split -> sample -> train -> evaluate cycle over all databases."""
    splits, per_db = {}, {}
    for m in manifests:
        by_ref = m.scenario == "synthetic"
        train_ids, test_ids = split_database(m, train_fraction, by_reference=by_ref, seed=seed)
        splits[m.database_id] = (train_ids, test_ids)
        per_db[m.database_id] = sample_pairs(m, train_ids, pairs_per_db, seed=derive_seed(seed, "pairgen"))
    ts = combine(per_db)
    for m in manifests:
        used = {i for p in per_db[m.database_id] for i in (p.x_id, p.y_id)}
        if used & set(splits[m.database_id][1]):
            raise AssertionError(f"test images of {m.database_id} leaked into training pairs")
    cfg = TrainConfig.from_dict({**config.to_dict(), "seed": derive_seed(seed, "train")})
    targets = None
    if cfg.loss == "mos_regression":
        targets = {r.image_id: linear_rescale(r.mos, m.range) for m in manifests for r in m.records}
    state, _ = train(ts, store, cfg, image_targets=targets)
    scores, errors = {}, {}
    for m in manifests:
        try:
            scores[m.database_id] = evaluate(state.net, m, splits[m.database_id][1], store)
        except UndefinedCorrelation as exc:
            scores[m.database_id] = math.nan
            errors[m.database_id] = str(exc)
    return SessionReport(
        seed=seed,
        variant=variant or config.loss,
        splits={db: {"train": len(a), "test": len(b)} for db, (a, b) in splits.items()},
        srcc=scores,
        config_digest=config.digest(),
        errors=errors,
    )


def _session_job(args):
    manifests, store, cfg, pairs_per_db, seed, train_fraction, label = args
    try:
        return run_session(manifests, store, cfg, pairs_per_db, seed, train_fraction, variant=label), None
    except Exception as exc:  # a failed session is reported, not fatal
        return None, f"{label} seed {seed}: {exc}"


def run_sessions(manifests, store, base_config, n_sessions, seeds=None, pairs_per_db=4000,
                 train_fraction=0.8, variants=None, workers=1):
    """Repeat sessions and aggregate per-database lower medians.

    ``variants`` maps a label to a loss kind; by default only ``base_config.loss``.
    Failed sessions are recorded and the median taken over the completed ones.
    With ``workers > 1`` sessions run in separate processes; every session is
    seeded on its own, so the report does not depend on the worker count.
    """
    if n_sessions < 1:
        raise ValidationError("n_sessions must be >= 1")
    seeds = list(seeds) if seeds is not None else list(range(n_sessions))
    if len(seeds) != n_sessions or len(set(seeds)) != n_sessions:
        raise ValidationError("need n_sessions distinct seeds")
    variants = variants or {base_config.loss: base_config.loss}
    dbs = [m.database_id for m in manifests]
    report = MedianReport(databases=dbs)
    jobs = []
    for label, kind in variants.items():
        cfg = TrainConfig.from_dict({**base_config.to_dict(), "loss": kind})
        report.digests[label] = cfg.digest()
        report.kinds[label] = kind
        jobs += [(manifests, store, cfg, pairs_per_db, seed, train_fraction, label) for seed in sorted(seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_session_job, jobs))
    else:
        results = [_session_job(job) for job in jobs]
    for label in variants:
        done = []
        for job, (sess, err) in zip(jobs, results):
            if job[-1] != label:
                continue
            if err is not None:
                log.warning("session failed: %s", err)
                report.warnings.append(err)
                continue
            log.info("variant %s seed %s: %s", label, sess.seed, sess.srcc)
            done.append(sess)
            report.sessions.append(sess)
        if len(done) < n_sessions:
            report.warnings.append(f"{label}: median over {len(done)} of {n_sessions} sessions")
        report.variants[label] = {
            db: lower_median([s.srcc[db] for s in done if not math.isnan(s.srcc[db])]) for db in dbs
        }
    return report


def render_table(report):
    """(csv_text, plain_text) with one row per variant and three-decimal values."""
    if not report.variants:
        raise ValidationError("report has no variants")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", *report.databases, "config_digest"])
    for label, row in report.variants.items():
        writer.writerow([label, *(_fmt(row.get(db, math.nan)) for db in report.databases), report.digests.get(label, "")])
    width = max(len(v) for v in report.variants) + 2
    lines = ["Median SRCC on held-out test sets", ""]
    lines.append("".ljust(width) + "".join(db.rjust(14) for db in report.databases))
    for label, row in report.variants.items():
        lines.append(label.ljust(width) + "".join(_fmt(row.get(db, math.nan)).rjust(14) for db in report.databases))
    lines.append("")
    lines += [f"{label}: config {d}" for label, d in report.digests.items()]
    if "cross_entropy_soft" in report.kinds.values():
        lines.append("note: soft-label cross entropy is an extension, not one of the original ablations")
    return buf.getvalue(), "\n".join(lines) + "\n"


def _fmt(x):
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.3f}"


def write_report(report, out_path):
    """Write ``out_path`` (CSV) plus sibling ``.txt`` and ``.json`` renderings."""
    csv_text, text = render_table(report)
    out = Path(out_path)
    out.write_text(csv_text, encoding="utf-8")
    out.with_suffix(".txt").write_text(text, encoding="utf-8")
    out.with_suffix(".json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return out
