"""Subject-rated image databases: manifests, raster files, splits and a synthetic generator.

All quality values held in memory are oriented higher-is-better. Manifests
declared ``lower_is_better`` (DMOS-style) are negated on load and negated back
on save, so files round-trip unchanged.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RASTER_MAGIC = b"RFRAS1"
SCENARIOS = ("synthetic", "realistic")
POLARITIES = ("higher_is_better", "lower_is_better")
DISTORTIONS = ("gaussian_blur", "white_noise", "quantize", "contrast")

# Peak quality loss per kind at level 1 and the curve exponent; quality_drop = peak * level**gamma.
DROP_CURVES = {
    "gaussian_blur": (60.0, 0.8),
    "white_noise": (70.0, 0.9),
    "quantize": (55.0, 1.2),
    "contrast": (50.0, 1.0),
}


class ValidationError(ValueError):
    pass


class ManifestError(ValidationError):
    """Malformed manifest file; ``lineno`` points at the offending line when known."""

    def __init__(self, message, lineno=None):
        super().__init__(f"line {lineno}: {message}" if lineno is not None else message)
        self.lineno = lineno


def derive_seed(seed, *tokens):
    """Deterministic 63-bit seed from a master seed and string tokens."""
    h = hashlib.sha256(repr((int(seed),) + tuple(str(t) for t in tokens)).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


# ----------------------------------------------------------------------------
# rasters

@dataclass
class Raster:
    pixels: np.ndarray  # (height, width, channels), float32 in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValidationError(f"raster must be HxWx1 or HxWx3, got shape {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0 or not np.all(np.isfinite(px))):
            raise ValidationError("raster pixel values must lie in [0, 1]")
        self.pixels = px

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]


def write_raster(raster, path):
    header = RASTER_MAGIC + struct.pack("<III", raster.width, raster.height, raster.channels)
    Path(path).write_bytes(header + raster.pixels.astype("<f4").tobytes())


def read_raster(path):
    blob = Path(path).read_bytes()
    if blob[:6] != RASTER_MAGIC:
        raise ValidationError(f"{path}: not a raster file (bad magic)")
    if len(blob) < 18:
        raise ValidationError(f"{path}: truncated raster header")
    width, height, channels = struct.unpack("<III", blob[6:18])
    n = width * height * channels
    if len(blob) != 18 + 4 * n:
        raise ValidationError(f"{path}: payload size does not match {width}x{height}x{channels}")
    px = np.frombuffer(blob, dtype="<f4", offset=18).reshape(height, width, channels)
    return Raster(px.astype(np.float32))


# ----------------------------------------------------------------------------
# manifests

@dataclass
class ImageRecord:
    image_id: str
    database_id: str
    payload: object  # relative/absolute path string, or an inline Raster
    mos: float
    std: float
    reference_id: str = None
    scenario: str = "synthetic"


@dataclass
class DatabaseManifest:
    database_id: str
    name: str
    scenario: str
    polarity: str  # orientation of the source file; in-memory values are higher-is-better
    range: tuple
    records: list = field(default_factory=list)
    root: Path = None  # directory relative payload paths resolve against
    true_quality: dict = None  # generator ground truth, synthetic databases only

    def ids(self):
        return [r.image_id for r in self.records]

    def by_id(self):
        return {r.image_id: r for r in self.records}


def _normalize(value, polarity):
    return -value if polarity == "lower_is_better" else value


def _validate_record(rec, lo, hi):
    if not np.isfinite(rec.std) or rec.std < 0:
        raise ValidationError(f"record {rec.image_id!r}: std must be >= 0, got {rec.std}")
    if not (lo <= rec.mos <= hi):
        raise ValidationError(f"record {rec.image_id!r}: mos {rec.mos} outside range [{lo}, {hi}]")


def manifest_from_dict(doc, root=None):
    """Build a normalized manifest from the JSON document structure."""
    required = ("database_id", "name", "scenario", "polarity", "range", "records")
    for key in required:
        if key not in doc:
            raise ManifestError(f"missing field {key!r}")
    if doc["polarity"] not in POLARITIES:
        raise ManifestError(f"unknown polarity {doc['polarity']!r}")
    if doc["scenario"] not in SCENARIOS:
        raise ManifestError(f"unknown scenario {doc['scenario']!r}")
    raw_lo, raw_hi = (float(v) for v in doc["range"])
    if raw_hi <= raw_lo:
        raise ValidationError(f"degenerate range [{raw_lo}, {raw_hi}]")
    polarity = doc["polarity"]
    lo, hi = sorted((_normalize(raw_lo, polarity), _normalize(raw_hi, polarity)))
    records, seen = [], set()
    for i, r in enumerate(doc["records"]):
        try:
            rec = ImageRecord(
                image_id=str(r["image_id"]),
                database_id=doc["database_id"],
                payload=r["payload"],
                mos=float(r["mos"]),
                std=float(r["std"]),
                reference_id=None if r.get("reference_id") is None else str(r["reference_id"]),
                scenario=doc["scenario"],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"record #{i}: {exc}") from None
        if rec.image_id in seen:
            raise ValidationError(f"record {rec.image_id!r}: duplicate image_id")
        seen.add(rec.image_id)
        _validate_record(rec, raw_lo, raw_hi)
        rec.mos = _normalize(rec.mos, polarity)
        records.append(rec)
    return DatabaseManifest(doc["database_id"], doc["name"], doc["scenario"], polarity, (lo, hi), records, root)


def load_manifest(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(exc.msg, exc.lineno) from None
    if not isinstance(doc, dict):
        raise ManifestError("top-level value must be an object", 1)
    return manifest_from_dict(doc, root=path.parent)


def manifest_to_dict(manifest):
    pol = manifest.polarity
    lo, hi = sorted((_normalize(manifest.range[0], pol), _normalize(manifest.range[1], pol)))
    records = []
    for r in manifest.records:
        if not isinstance(r.payload, str):
            raise ValidationError(f"record {r.image_id!r}: inline payloads cannot be serialized")
        entry = {"image_id": r.image_id, "payload": r.payload, "mos": _normalize(r.mos, pol), "std": r.std}
        if r.reference_id is not None:
            entry["reference_id"] = r.reference_id
        records.append(entry)
    return {
        "database_id": manifest.database_id,
        "name": manifest.name,
        "scenario": manifest.scenario,
        "polarity": pol,
        "range": [lo, hi],
        "records": records,
    }


def save_manifest(manifest, path):
    Path(path).write_text(json.dumps(manifest_to_dict(manifest), indent=1) + "\n", encoding="utf-8")


class RasterStore:
    """Image id -> Raster lookup backed by memory and/or manifest payload paths."""

    def __init__(self, rasters=None):
        self._rasters = dict(rasters or {})
        self._paths = {}

    def add_manifest(self, manifest):
        for r in manifest.records:
            if isinstance(r.payload, Raster):
                self._rasters[r.image_id] = r.payload
            else:
                p = Path(r.payload)
                if not p.is_absolute() and manifest.root is not None:
                    p = Path(manifest.root) / p
                self._paths[r.image_id] = p
        return self

    def __contains__(self, image_id):
        return image_id in self._rasters or image_id in self._paths

    def __getitem__(self, image_id):
        if image_id not in self._rasters:
            if image_id not in self._paths:
                raise KeyError(f"no raster for image {image_id!r}")
            try:
                self._rasters[image_id] = read_raster(self._paths[image_id])
            except (OSError, ValidationError) as exc:
                raise KeyError(f"cannot read raster for image {image_id!r}: {exc}") from None
        return self._rasters[image_id]

    def __setitem__(self, image_id, raster):
        self._rasters[image_id] = raster

    def ids(self):
        return sorted(set(self._rasters) | set(self._paths))


# ----------------------------------------------------------------------------
# re-scaling and splitting

def linear_rescale(mos, from_range):
    lo, hi = from_range
    if hi <= lo:
        raise ValidationError(f"degenerate range [{lo}, {hi}]")
    return 100.0 * (mos - lo) / (hi - lo)


def split_database(manifest, train_fraction=0.8, by_reference=False, seed=0):
    """Partition image ids into (train_ids, test_ids).

    With ``by_reference`` whole reference groups go to one side; the fraction
    is applied to the group count, rounded, with at least one group per side.
    """
    if not 0 < train_fraction < 1:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(derive_seed(seed, "split", manifest.database_id))
    ids = manifest.ids()
    if by_reference:
        missing = [r.image_id for r in manifest.records if r.reference_id is None]
        if missing:
            raise ValidationError(f"by_reference split needs reference_id; missing on {missing[:3]}")
        groups = sorted({r.reference_id for r in manifest.records})
        if len(groups) < 2:
            raise ValidationError("by_reference split needs at least two reference groups")
        n_train = min(max(int(round(train_fraction * len(groups))), 1), len(groups) - 1)
        chosen = {groups[i] for i in rng.permutation(len(groups))[:n_train]}
        train = [r.image_id for r in manifest.records if r.reference_id in chosen]
        test = [r.image_id for r in manifest.records if r.reference_id not in chosen]
        return train, test
    if len(ids) < 2:
        raise ValidationError("split needs at least two records")
    n_train = min(max(int(round(train_fraction * len(ids))), 1), len(ids) - 1)
    order = rng.permutation(len(ids))
    picked = set(order[:n_train].tolist())
    train = [i for k, i in enumerate(ids) if k in picked]
    test = [i for k, i in enumerate(ids) if k not in picked]
    return train, test


# ----------------------------------------------------------------------------
# synthetic databases

@dataclass
class SynthSpec:
    n_base_images: int = 8
    distortion_kinds: tuple = ("gaussian_blur", "white_noise")
    levels_per_kind: int = 4
    n_observers: int = 30
    observer_std: float = 8.0
    scenario_mix: str = "ladder"
    seed: int = 0
    database_id: str = "synth"
    name: str = ""
    image_size: int = 32
    channels: int = 1
    annotation: str = "mos"  # "dmos" writes 100 - mos with lower_is_better polarity

    def __post_init__(self):
        self.distortion_kinds = tuple(self.distortion_kinds)
        for k in ("n_base_images", "levels_per_kind", "n_observers", "image_size"):
            if int(getattr(self, k)) < 1:
                raise ValidationError(f"{k} must be >= 1")
        if self.observer_std < 0:
            raise ValidationError("observer_std must be >= 0")
        if not self.distortion_kinds:
            raise ValidationError("distortion_kinds must be nonempty")
        unknown = set(self.distortion_kinds) - set(DISTORTIONS)
        if unknown:
            raise ValidationError(f"unknown distortion kinds {sorted(unknown)}")
        if self.scenario_mix not in ("ladder", "mixed-random"):
            raise ValidationError(f"scenario_mix must be 'ladder' or 'mixed-random', got {self.scenario_mix!r}")
        if self.channels not in (1, 3):
            raise ValidationError("channels must be 1 or 3")
        if self.annotation not in ("mos", "dmos"):
            raise ValidationError("annotation must be 'mos' or 'dmos'")


def _smooth(field_, passes):
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    for _ in range(passes):
        field_ = _convolve_sep(field_, k)
    return field_


def _convolve_sep(img, kernel):
    """Separable 1-D kernel along both spatial axes of an (H, W, C) array, reflect padding."""
    r = len(kernel) // 2
    if r == 0:
        return img.copy()
    out = np.pad(img, ((r, r), (0, 0), (0, 0)), mode="reflect")
    out = sum(kernel[i] * out[i:i + img.shape[0]] for i in range(len(kernel)))
    out = np.pad(out, ((0, 0), (r, r), (0, 0)), mode="reflect")
    return sum(kernel[i] * out[:, i:i + img.shape[1]] for i in range(len(kernel)))


def base_image(rng, size, channels, contrast=0.18):
    """Procedural content: gradient + sinusoids + two-scale smooth texture.

    Every base is standardized to mean 0.5 and std ``contrast`` (then clipped),
    so pristine images share global contrast and a similar spectral profile
    while their content differs.
    """
    yy, xx = np.mgrid[0:size, 0:size] / float(size)
    img = np.zeros((size, size, channels))
    for c in range(channels):
        ang = rng.uniform(0, 2 * np.pi)
        layer = 0.3 * (np.cos(ang) * xx + np.sin(ang) * yy)
        for _ in range(2):
            theta = rng.uniform(0, np.pi)
            freq = rng.uniform(1.5, 4.0)
            layer += 0.25 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                                   + rng.uniform(0, 2 * np.pi))
        for passes, weight in ((6, 0.5), (1, 0.35)):
            tex = _smooth(rng.normal(size=(size, size, 1)), passes)[:, :, 0]
            layer += weight * (tex - tex.mean()) / (tex.std() + 1e-12)
        img[:, :, c] = layer
    img = (img - img.mean()) / (img.std() + 1e-12) * contrast + 0.5
    return Raster(np.clip(img, 0.0, 1.0).astype(np.float32))


def quality_drop(kind, level):
    if kind not in DROP_CURVES:
        raise ValidationError(f"unknown distortion kind {kind!r}")
    peak, gamma = DROP_CURVES[kind]
    return peak * float(level) ** gamma


def _binomial_kernel(width):
    row = np.array([1.0])
    for _ in range(width - 1):
        row = np.convolve(row, [1.0, 1.0])
    return row / row.sum()


def apply_distortion(raster, kind, level, seed=0):
    """Distort ``raster`` at ``level`` in [0, 1]; returns (Raster, quality_drop).

    Level 0 is the identity for every kind. Noise draws come from ``seed``.
    """
    if kind not in DISTORTIONS:
        raise ValidationError(f"unknown distortion kind {kind!r}")
    level = float(level)
    if not 0.0 <= level <= 1.0:
        raise ValidationError(f"level must be in [0, 1], got {level}")
    px = raster.pixels.astype(np.float64)
    if level == 0.0:
        return Raster(raster.pixels.copy()), 0.0
    if kind == "gaussian_blur":
        width = 1 + 2 * int(np.ceil(4 * level))
        out = _convolve_sep(px, _binomial_kernel(width))
    elif kind == "white_noise":
        rng = np.random.default_rng(seed)
        out = px + rng.normal(0.0, 0.25 * level, size=px.shape)
    elif kind == "quantize":
        step = 0.04 + 0.46 * level
        out = np.round(px / step) * step
    else:  # contrast
        out = 0.5 + (px - 0.5) * (1.0 - 0.8 * level)
    return Raster(np.clip(out, 0.0, 1.0).astype(np.float32)), quality_drop(kind, level)


def simulate_opinions(true_quality, n_observers, observer_std, seed=0, scale=None):
    """Simulated subjective study: returns (mos, std) of ``n_observers`` Gaussian scores.

    ``std`` is the sample standard deviation of individual opinions (ddof=1).
    ``scale`` optionally clips each opinion to a bounded rating scale (lo, hi).
    """
    if n_observers < 2:
        raise ValidationError("n_observers must be >= 2 for a standard deviation")
    if observer_std < 0:
        raise ValidationError("observer_std must be >= 0")
    if observer_std == 0:
        return float(true_quality), 0.0
    rng = np.random.default_rng(seed)
    scores = rng.normal(true_quality, observer_std, size=n_observers)
    if scale is not None:
        scores = np.clip(scores, scale[0], scale[1])
    return float(scores.mean()), float(scores.std(ddof=1))


def synth_database(spec):
    """Generate a synthetic rated database; returns (manifest, {image_id: Raster}).

    ``ladder`` applies every kind at every level to every base image (reference
    groups = base images). ``mixed-random`` makes ``levels_per_kind`` images per
    base, each a random composition of 1-3 distinct kinds at random levels.
    """
    rng = np.random.default_rng(derive_seed(spec.seed, "synth", spec.database_id))
    bases = [base_image(rng, spec.image_size, spec.channels) for _ in range(spec.n_base_images)]
    scenario = "synthetic" if spec.scenario_mix == "ladder" else "realistic"
    dbid = spec.database_id
    records, rasters, meta = [], {}, {}

    def add(image_id, ref, raster, drops):
        tq = float(np.clip(100.0 - sum(drops), 0.0, 100.0))
        mos, std = simulate_opinions(tq, spec.n_observers, spec.observer_std,
                                     seed=derive_seed(spec.seed, "opinions", dbid, image_id), scale=(0.0, 100.0))
        payload = f"rasters/{image_id}.ras"
        records.append(ImageRecord(image_id, dbid, payload, mos, std, ref, scenario))
        rasters[image_id] = raster
        meta[image_id] = tq

    for b, base in enumerate(bases):
        ref = f"{dbid}_ref{b:03d}"
        if spec.scenario_mix == "ladder":
            for kind in spec.distortion_kinds:
                for lv in range(1, spec.levels_per_kind + 1):
                    image_id = f"{dbid}_b{b:03d}_{kind}_l{lv}"
                    out, drop = apply_distortion(base, kind, lv / spec.levels_per_kind,
                                                 seed=derive_seed(spec.seed, "noise", image_id))
                    add(image_id, ref, out, [drop])
        else:
            for k in range(spec.levels_per_kind):
                image_id = f"{dbid}_b{b:03d}_m{k}"
                n_kinds = int(rng.integers(1, min(3, len(spec.distortion_kinds)) + 1))
                kinds = [spec.distortion_kinds[i] for i in rng.permutation(len(spec.distortion_kinds))[:n_kinds]]
                out, drops = base, []
                for kind in kinds:
                    out, drop = apply_distortion(out, kind, float(rng.uniform(0.1, 1.0)),
                                                 seed=derive_seed(spec.seed, "noise", image_id, kind))
                    drops.append(drop)
                add(image_id, ref, out, drops)

    polarity = "higher_is_better"
    if spec.annotation == "dmos":
        # in-memory values stay higher-is-better (-dmos); the file stores dmos = 100 - mos
        polarity = "lower_is_better"
        for r in records:
            r.mos = r.mos - 100.0
        lo_hi = (-100.0, 0.0)
    else:
        lo_hi = (0.0, 100.0)
    manifest = DatabaseManifest(dbid, spec.name or dbid, scenario, polarity, lo_hi, records, true_quality=meta)
    return manifest, rasters


def write_database(manifest, rasters, out_dir):
    """Write ``manifest.json`` and ``rasters/*.ras`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "rasters").mkdir(parents=True, exist_ok=True)
    for rec in manifest.records:
        write_raster(rasters[rec.image_id], out / rec.payload)
    save_manifest(manifest, out / "manifest.json")
    manifest.root = out
    return out / "manifest.json"
