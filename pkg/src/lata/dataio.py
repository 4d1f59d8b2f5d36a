"""Bit-exact file formats and the run configuration schema.

Matrix files carry a single-line JSON header followed by raw little-endian
float32 payload bytes:

    {"magic": "LATA-MAT", "version": 1, "rows": R, "cols": C,
     "dtype": "f32", "layout": "row-major", "endianness": "little"}\\n
    <R * C * 4 payload bytes>

Values are float32 on disk and float64 in memory, so write(read(x)) is
bitwise exact for f32 inputs. Labels files are newline-delimited JSON records
{"index": i, "label": l, "split": "cal"|"test"} with unique dense indices
(label may be null for unlabeled test items). Failure-head weight bundles and
dataset manifests are small JSON documents naming matrix files relative to
their own location.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .conformal import SCORE_KINDS, FailureAwareParams, ScoreRule
from .core import LabeledExample, PrototypeBank, normalize_rows
from .errors import ConfigError, DataError
from .refine import RefineConfig

MATRIX_MAGIC = "LATA-MAT"
VILU_MAGIC = "LATA-VILU"
DATASET_MAGIC = "LATA-DATASET"
FORMAT_VERSION = 1

PROVIDER_NAMES = ("heuristic", "vilu", "oracle")


class FileAccessError(DataError):
    """Underlying I/O failure (missing file, permissions, ...)."""


class MatrixHeaderError(DataError):
    """Matrix header is malformed or declares an unsupported layout."""


class PayloadLengthError(DataError):
    """Matrix payload byte count disagrees with the header."""


class EmptyMatrixError(DataError):
    """Matrix header declares zero rows or columns."""


class NonFiniteDataError(DataError):
    """Refusing to serialize non-finite values."""


class LabelsFormatError(DataError):
    """Labels file is malformed or its indices are not unique and dense."""


class BundleFormatError(DataError):
    """Weight bundle manifest is malformed or its shapes do not chain."""


class DatasetFormatError(DataError):
    """Dataset manifest is malformed or its files are inconsistent."""


_HEADER_KEYS = {"magic", "version", "rows", "cols", "dtype", "layout", "endianness"}


def write_matrix(path, matrix) -> None:
    """Serialize a 2-D finite matrix as f32; see the module docstring."""
    mat = np.asarray(matrix)
    if mat.ndim != 2 or mat.shape[0] == 0 or mat.shape[1] == 0:
        raise EmptyMatrixError("matrix must be 2-D with positive shape")
    if not np.all(np.isfinite(mat)):
        raise NonFiniteDataError("matrix has non-finite entries")
    header = {
        "magic": MATRIX_MAGIC,
        "version": FORMAT_VERSION,
        "rows": int(mat.shape[0]),
        "cols": int(mat.shape[1]),
        "dtype": "f32",
        "layout": "row-major",
        "endianness": "little",
    }
    payload = np.ascontiguousarray(mat, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(json.dumps(header).encode("ascii") + b"\n")
            fh.write(payload)
    except OSError as exc:
        raise FileAccessError(f"cannot write matrix file {path}: {exc}") from exc


def read_matrix(path) -> np.ndarray:
    """Load a matrix file; returns float64 with the exact f32 values."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FileAccessError(f"cannot read matrix file {path}: {exc}") from exc
    newline = raw.find(b"\n")
    if newline < 0:
        raise MatrixHeaderError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:newline].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MatrixHeaderError(f"{path}: header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
        raise MatrixHeaderError(f"{path}: header keys must be exactly {sorted(_HEADER_KEYS)}")
    if header["magic"] != MATRIX_MAGIC:
        raise MatrixHeaderError(f"{path}: bad magic {header['magic']!r}")
    if header["version"] != FORMAT_VERSION:
        raise MatrixHeaderError(f"{path}: unsupported version {header['version']!r}")
    if header["dtype"] != "f32" or header["layout"] != "row-major" or header["endianness"] != "little":
        raise MatrixHeaderError(f"{path}: unsupported dtype/layout/endianness")
    rows, cols = header["rows"], header["cols"]
    if not (isinstance(rows, int) and isinstance(cols, int)):
        raise MatrixHeaderError(f"{path}: rows/cols must be integers")
    if rows <= 0 or cols <= 0:
        raise EmptyMatrixError(f"{path}: declares {rows}x{cols}")
    payload = raw[newline + 1:]
    expected = rows * cols * 4
    if len(payload) != expected:
        raise PayloadLengthError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    mat = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    return mat.astype(np.float64)


def write_labels(path, labels, splits) -> None:
    """Write newline-delimited {index, label, split} records in index order."""
    labels = list(labels)
    splits = list(splits)
    if len(labels) != len(splits):
        raise LabelsFormatError("labels and splits must be equally long")
    try:
        with open(path, "w", encoding="ascii") as fh:
            for i, (label, split) in enumerate(zip(labels, splits)):
                if split not in ("cal", "test"):
                    raise LabelsFormatError(f"record {i}: split must be 'cal' or 'test'")
                rec = {"index": i, "label": None if label is None else int(label), "split": split}
                fh.write(json.dumps(rec) + "\n")
    except OSError as exc:
        raise FileAccessError(f"cannot write labels file {path}: {exc}") from exc


def read_labels(path) -> list[dict]:
    """Parse a labels file; records come back in file order.

    Validates field presence, split values, and that indices are unique and
    dense over 0..N-1.
    """
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except OSError as exc:
        raise FileAccessError(f"cannot read labels file {path}: {exc}") from exc
    records = []
    for ln in lines:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise LabelsFormatError(f"{path}: bad record {ln!r}: {exc}") from exc
        if not isinstance(rec, dict) or set(rec) != {"index", "label", "split"}:
            raise LabelsFormatError(f"{path}: record keys must be index/label/split")
        if rec["split"] not in ("cal", "test"):
            raise LabelsFormatError(f"{path}: split must be 'cal' or 'test'")
        if not isinstance(rec["index"], int):
            raise LabelsFormatError(f"{path}: index must be an integer")
        if rec["label"] is not None and not isinstance(rec["label"], int):
            raise LabelsFormatError(f"{path}: label must be an integer or null")
        if rec["split"] == "cal" and rec["label"] is None:
            raise LabelsFormatError(f"{path}: calibration records need labels")
        records.append(rec)
    indices = [r["index"] for r in records]
    if sorted(indices) != list(range(len(records))):
        raise LabelsFormatError(f"{path}: indices must be unique and dense 0..N-1")
    return records


def load_vilu_bundle(path):
    """Load a failure-head weight bundle manifest and its matrix files."""
    from .signals import ViluWeights  # deferred to keep import graph acyclic

    base = os.path.dirname(os.path.abspath(path))
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FileAccessError(f"cannot read bundle {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{path}: manifest is not valid JSON: {exc}") from exc
    required = {"magic", "version", "attention_scale", "query_proj", "key_proj",
                "value_proj", "mlp"}
    if not isinstance(manifest, dict) or not required.issubset(manifest):
        raise BundleFormatError(f"{path}: manifest needs keys {sorted(required)}")
    if manifest["magic"] != VILU_MAGIC or manifest["version"] != FORMAT_VERSION:
        raise BundleFormatError(f"{path}: bad magic/version")

    def mat(rel):
        return read_matrix(os.path.join(base, rel))

    layers, activations = [], []
    mlp = manifest["mlp"]
    if not isinstance(mlp, list) or not mlp:
        raise BundleFormatError(f"{path}: mlp must be a non-empty layer list")
    for li, layer in enumerate(mlp):
        if not isinstance(layer, dict) or "weight" not in layer or "bias" not in layer:
            raise BundleFormatError(f"{path}: mlp layer {li} needs weight and bias")
        w = mat(layer["weight"])
        b = mat(layer["bias"])
        if b.shape[0] != 1:
            raise BundleFormatError(f"{path}: bias {li} must be a single-row matrix")
        act = layer.get("activation", "none")
        last = li == len(mlp) - 1
        if last and act != "none":
            raise BundleFormatError(f"{path}: the final layer must not declare an activation")
        if not last and act not in ("relu", "tanh"):
            raise BundleFormatError(f"{path}: hidden activation must be 'relu' or 'tanh'")
        layers.append((w, b[0]))
        activations.append(act)
    try:
        return ViluWeights(
            query_proj=mat(manifest["query_proj"]),
            key_proj=mat(manifest["key_proj"]),
            value_proj=mat(manifest["value_proj"]),
            mlp_layers=tuple(layers),
            activations=tuple(activations),
            attention_scale=float(manifest["attention_scale"]),
        )
    except ValueError as exc:
        raise BundleFormatError(f"{path}: {exc}") from exc


def write_vilu_bundle(path, weights) -> None:
    """Write a bundle manifest plus its matrix files next to it."""
    base = os.path.dirname(os.path.abspath(path))
    names = {"query_proj": "vilu_q.mat", "key_proj": "vilu_k.mat", "value_proj": "vilu_v.mat"}
    for attr, fname in names.items():
        write_matrix(os.path.join(base, fname), getattr(weights, attr))
    mlp = []
    for li, ((w, b), act) in enumerate(zip(weights.mlp_layers, weights.activations)):
        wname, bname = f"vilu_mlp{li}_w.mat", f"vilu_mlp{li}_b.mat"
        write_matrix(os.path.join(base, wname), w)
        write_matrix(os.path.join(base, bname), b[None, :])
        layer = {"weight": wname, "bias": bname}
        if li < len(weights.mlp_layers) - 1:
            layer["activation"] = act
        mlp.append(layer)
    manifest = {
        "magic": VILU_MAGIC,
        "version": FORMAT_VERSION,
        "attention_scale": float(weights.attention_scale),
        "query_proj": names["query_proj"],
        "key_proj": names["key_proj"],
        "value_proj": names["value_proj"],
        "mlp": mlp,
    }
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise FileAccessError(f"cannot write bundle {path}: {exc}") from exc


def write_dataset(out_dir, embeddings, labels, splits, prototypes, class_names) -> str:
    """Write embeddings/labels/prototypes plus a manifest; returns its path."""
    os.makedirs(out_dir, exist_ok=True)
    write_matrix(os.path.join(out_dir, "embeddings.mat"), embeddings)
    write_matrix(os.path.join(out_dir, "prototypes.mat"), prototypes)
    write_labels(os.path.join(out_dir, "labels.jsonl"), labels, splits)
    manifest = {
        "magic": DATASET_MAGIC,
        "version": FORMAT_VERSION,
        "embeddings": "embeddings.mat",
        "labels": "labels.jsonl",
        "prototypes": "prototypes.mat",
        "class_names": [str(n) for n in class_names],
    }
    manifest_path = os.path.join(out_dir, "dataset.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return manifest_path


def load_dataset(manifest_path) -> tuple[list[LabeledExample], list[LabeledExample], PrototypeBank]:
    """Load a dataset manifest into (cal, test, bank).

    Embeddings and prototypes are re-normalized on load; the in-memory order
    of each split follows the record order of the labels file.
    """
    base = os.path.dirname(os.path.abspath(manifest_path))
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FileAccessError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{manifest_path}: not valid JSON: {exc}") from exc
    required = {"magic", "version", "embeddings", "labels", "prototypes", "class_names"}
    if not isinstance(manifest, dict) or not required.issubset(manifest):
        raise DatasetFormatError(f"{manifest_path}: manifest needs keys {sorted(required)}")
    if manifest["magic"] != DATASET_MAGIC or manifest["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"{manifest_path}: bad magic/version")
    class_names = manifest["class_names"]
    if not isinstance(class_names, list) or not class_names:
        raise DatasetFormatError(f"{manifest_path}: class_names missing or empty")
    embeddings = read_matrix(os.path.join(base, manifest["embeddings"]))
    prototypes = read_matrix(os.path.join(base, manifest["prototypes"]))
    if prototypes.shape[0] != len(class_names):
        raise DatasetFormatError("prototype count does not match class_names")
    if prototypes.shape[1] != embeddings.shape[1]:
        raise DatasetFormatError("embedding and prototype dimensions differ")
    records = read_labels(os.path.join(base, manifest["labels"]))
    if len(records) != embeddings.shape[0]:
        raise DatasetFormatError("labels file does not cover every embedding row")
    n_classes = len(class_names)
    try:
        emb = normalize_rows(embeddings)
        bank = PrototypeBank(normalize_rows(prototypes), tuple(class_names))
    except ValueError as exc:
        raise DatasetFormatError(str(exc)) from exc
    cal, test = [], []
    for rec in records:
        label = rec["label"]
        if label is not None and not 0 <= label < n_classes:
            raise DatasetFormatError(f"label {label} out of range for C={n_classes}")
        ex = LabeledExample(emb[rec["index"]], label)
        (cal if rec["split"] == "cal" else test).append(ex)
    if not cal:
        raise DatasetFormatError("dataset has no calibration records")
    return cal, test, bank


@dataclass
class RunConfig:
    """Full experiment configuration; JSON round-trips via to/from_dict.

    The `data` field selects the source: {"kind": "files", "manifest": path}
    loads a dataset manifest (trials resample the K-shot calibration split
    from the cal pool), while {"kind": "synthetic", ...} embeds a generator
    spec (trials redraw the whole pool, calibration/test partitioned by
    uniform shuffle). A bare string is shorthand for the files form.
    """

    alpha: float = 0.10
    score: str = "lac"
    k_reg: int = 1
    gamma_raps: float = 1e-3
    randomize: bool = False
    u_value: float = 1.0
    lam: float = 0.5
    eta: float = 0.25
    gamma: float = 0.35
    t_iter: int = 8
    k: int = 15
    beta: float = 0.0
    pseudo_count: float = 1.0
    kappa: int | None = 128
    gate_threshold: float | None = None
    tau: float = 1.0
    window: int = 256
    shots: int = 16
    trials: int = 100
    base_seed: int = 0
    workers: int = 1
    provider: str = "heuristic"
    data: dict | None = None
    vilu_bundle: str | None = None
    out: str | None = None

    # JSON field names follow the public flag spelling.
    _JSON_ALIASES = {"lambda": "lam", "seed": "base_seed", "W": "window", "K": "shots"}

    def validate(self) -> None:
        checks = [
            (0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)"),
            (self.score in SCORE_KINDS, f"score must be one of {SCORE_KINDS}"),
            (self.k_reg >= 0, "k_reg must be nonnegative"),
            (self.gamma_raps >= 0, "gamma_raps must be nonnegative"),
            (0.0 <= self.u_value <= 1.0, "u_value must lie in [0, 1]"),
            (self.lam >= 0, "lambda must be nonnegative"),
            (self.eta >= 0, "eta must be nonnegative"),
            (self.gamma >= 0, "gamma must be nonnegative"),
            (self.t_iter >= 0, "t_iter must be nonnegative"),
            (self.k >= 1, "k must be at least 1"),
            (0.0 <= self.beta <= 1.0, "beta must lie in [0, 1]"),
            (self.pseudo_count >= 0, "pseudo_count must be nonnegative"),
            (self.kappa is None or self.kappa >= 1, "kappa must be at least 1"),
            (self.gate_threshold is None or 0.0 <= self.gate_threshold <= 1.0,
             "gate_threshold must lie in [0, 1]"),
            (self.tau > 0, "tau must be positive"),
            (self.window >= 2, "window must be at least 2"),
            (self.shots >= 1, "shots must be at least 1"),
            (self.trials >= 1, "trials must be at least 1"),
            (self.workers >= 1, "workers must be at least 1"),
            (self.provider in PROVIDER_NAMES, f"provider must be one of {PROVIDER_NAMES}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.provider == "vilu" and not self.vilu_bundle:
            raise ConfigError("provider 'vilu' needs a vilu_bundle path")
        if self.data is not None:
            if not isinstance(self.data, dict) or self.data.get("kind") not in ("files", "synthetic"):
                raise ConfigError("data must declare kind 'files' or 'synthetic'")
            if self.data["kind"] == "files" and not self.data.get("manifest"):
                raise ConfigError("files data source needs a manifest path")
        if self.beta > 0 and self.pseudo_count == 0:
            raise ConfigError("beta > 0 needs pseudo_count > 0 to keep the prior positive")

    def score_rule(self) -> ScoreRule:
        return ScoreRule(kind=self.score, k_reg=self.k_reg, gamma_raps=self.gamma_raps,
                         randomize=self.randomize, u_value=self.u_value)

    def failure_params(self) -> FailureAwareParams:
        return FailureAwareParams(lam=self.lam, eta=self.eta)

    def refine_config(self) -> RefineConfig:
        return RefineConfig(gamma=self.gamma, t_iter=self.t_iter, beta=self.beta,
                            kappa=self.kappa, gate_threshold=self.gate_threshold)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for alias, attr in self._JSON_ALIASES.items():
            out[alias] = out.pop(attr)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("configuration must be a JSON object")
        d = dict(d)
        for alias, attr in cls._JSON_ALIASES.items():
            if alias in d:
                if attr in d:
                    raise ConfigError(f"both {alias!r} and {attr!r} given")
                d[attr] = d.pop(alias)
        if isinstance(d.get("data"), str):
            d["data"] = {"kind": "files", "manifest": d["data"]}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        try:
            cfg = cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        _check_field_types(cfg)
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(raw)


def _check_field_types(cfg: RunConfig) -> None:
    for f in dataclasses.fields(RunConfig):
        val = getattr(cfg, f.name)
        if f.name in ("data",):
            continue
        if f.name in ("kappa", "gate_threshold", "vilu_bundle", "out") and val is None:
            continue
        if f.name in ("alpha", "gamma_raps", "u_value", "lam", "eta", "gamma", "beta",
                      "pseudo_count", "tau", "gate_threshold"):
            if not isinstance(val, (int, float)) or isinstance(val, bool) or math.isnan(float(val)):
                raise ConfigError(f"{f.name} must be a number")
        elif f.name in ("k_reg", "t_iter", "k", "kappa", "window", "shots", "trials",
                        "base_seed", "workers"):
            if not isinstance(val, int) or isinstance(val, bool):
                raise ConfigError(f"{f.name} must be an integer")
        elif f.name == "randomize":
            if not isinstance(val, bool):
                raise ConfigError("randomize must be a boolean")
        elif f.name in ("score", "provider"):
            if not isinstance(val, str):
                raise ConfigError(f"{f.name} must be a string")
        elif f.name in ("vilu_bundle", "out"):
            if not isinstance(val, str):
                raise ConfigError(f"{f.name} must be a string path")
