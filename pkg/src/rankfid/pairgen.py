"""Intra-database pair sampling with continuous Thurstone annotations."""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ValidationError, derive_seed
from .gaussian import normal_cdf

STD_FLOOR = 1e-6


class CapacityError(ValidationError):
    def __init__(self, requested, maximum):
        super().__init__(f"requested {requested} pairs but only {maximum} distinct pairs exist")
        self.maximum = maximum


@dataclass(frozen=True)
class PairSample:
    x_id: str
    y_id: str
    database_id: str
    p: float


@dataclass
class TrainingSet:
    pairs: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)  # database_id -> n_j, in insertion order

    def __len__(self):
        return len(self.pairs)

    def by_database(self):
        out = {db: [] for db in self.counts}
        for pair in self.pairs:
            out[pair.database_id].append(pair)
        return out


def thurstone_probability(mu_x, sigma_x, mu_y, sigma_y):
    """P(q(x) >= q(y)) for independent Gaussian qualities.

    When both stds fall below ``STD_FLOOR`` the hard label 1 / 0.5 / 0 is used.
    """
    if sigma_x < 0 or sigma_y < 0:
        raise ValidationError(f"standard deviations must be >= 0, got {sigma_x}, {sigma_y}")
    if sigma_x < STD_FLOOR and sigma_y < STD_FLOOR:
        return 1.0 if mu_x > mu_y else 0.0 if mu_x < mu_y else 0.5
    return normal_cdf(float(mu_x - mu_y) / math.sqrt(sigma_x * sigma_x + sigma_y * sigma_y))


def binary_label(mu_x, mu_y):
    return 1 if mu_x >= mu_y else 0


def sample_pairs(manifest, eligible_ids, n_j, seed=0):
    """Draw ``n_j`` distinct unordered pairs uniformly from ``eligible_ids``.

    Orientation within each pair is randomized; each pair carries its Thurstone
    probability computed from the manifest's (normalized) MOS and std.
    """
    ids = list(dict.fromkeys(eligible_ids))
    records = manifest.by_id()
    missing = [i for i in ids if i not in records]
    if missing:
        raise ValidationError(f"ids not in database {manifest.database_id!r}: {missing[:3]}")
    n = len(ids)
    capacity = n * (n - 1) // 2
    if n_j < 0:
        raise ValidationError("n_j must be >= 0")
    if n_j == 0:
        return []
    if n < 2:
        raise ValidationError("need at least two eligible images")
    if n_j > capacity:
        raise CapacityError(n_j, capacity)
    rng = np.random.default_rng(derive_seed(seed, "pairs", manifest.database_id))
    if capacity <= 4_000_000:
        iu, ju = np.triu_indices(n, 1)
        flat = rng.choice(capacity, size=n_j, replace=False)
        i, j = iu[flat], ju[flat]
    else:
        seen, picks = set(), []
        while len(picks) < n_j:
            a, b = sorted(rng.choice(n, size=2, replace=False).tolist())
            if (a, b) not in seen:
                seen.add((a, b))
                picks.append((a, b))
        i, j = (np.array(v) for v in zip(*picks))
    swap = rng.random(n_j) < 0.5
    out = []
    for a, b, s in zip(i.tolist(), j.tolist(), swap.tolist()):
        x, y = (ids[b], ids[a]) if s else (ids[a], ids[b])
        rx, ry = records[x], records[y]
        out.append(PairSample(x, y, manifest.database_id, thurstone_probability(rx.mos, rx.std, ry.mos, ry.std)))
    return out


def combine(per_database_pairs):
    """Concatenate per-database pair lists, given as ``{database_id: pairs}`` or a list of lists."""
    if isinstance(per_database_pairs, dict):
        items = list(per_database_pairs.items())
    else:
        items = []
        for pairs in per_database_pairs:
            if not pairs:
                raise ValidationError("cannot infer database_id of an empty pair list; pass a mapping")
            items.append((pairs[0].database_id, pairs))
    ts = TrainingSet()
    for db, pairs in items:
        if db in ts.counts:
            raise ValidationError(f"duplicate database_id {db!r}")
        for pair in pairs:
            if pair.database_id != db:
                raise ValidationError(f"pair ({pair.x_id}, {pair.y_id}) tagged {pair.database_id!r} in list for {db!r}")
        ts.counts[db] = len(pairs)
        ts.pairs.extend(pairs)
    return ts


def save_training_set(ts, path):
    rows = [{"database_id": p.database_id, "x_id": p.x_id, "y_id": p.y_id, "p": p.p} for p in ts.pairs]
    Path(path).write_text(json.dumps(rows, indent=0) + "\n", encoding="utf-8")


def load_training_set(path):
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    grouped = {}
    for k, r in enumerate(rows):
        try:
            pair = PairSample(str(r["x_id"]), str(r["y_id"]), str(r["database_id"]), float(r["p"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"pair #{k}: {exc}") from None
        if not 0.0 <= pair.p <= 1.0 or pair.x_id == pair.y_id:
            raise ValidationError(f"pair #{k}: invalid pair {pair}")
        grouped.setdefault(pair.database_id, []).append(pair)
    return combine(grouped)
