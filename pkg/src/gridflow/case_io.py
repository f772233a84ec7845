"""MATPOWER-style case parsing plus dataset and checkpoint file formats.

All quantities are converted to per-unit on the case base during parsing.
Dataset files are CSV with a single `#`-prefixed JSON header line; model
checkpoints are a self-describing binary container (JSON manifest followed
by little-endian float64 arrays in manifest order).
"""

from __future__ import annotations

import io
import json
import re
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DisconnectedCase, HeaderMismatch, MalformedBlock, NoRefBus,
    NonFiniteValue, ShapeMismatch, UnsupportedCost, VersionMismatch,
)

REF, PV, PQ = 3, 2, 1

_CKPT_MAGIC = b"GFCKPT\n"
_CKPT_VERSION = 1


@dataclass(frozen=True)
class Bus:
    id: int
    btype: int          # 3 ref, 2 pv, 1 pq
    pd: float           # active load, p.u.
    qd: float           # reactive load, p.u.
    vmin: float
    vmax: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float            # series resistance, p.u.
    x: float            # series reactance, p.u.
    y_mag: float        # admittance magnitude 1/|r + jx|, p.u.
    rate_a: float       # flow limit, p.u.
    status: int         # 1 in service, 0 out
    tap: float = 1.0    # off-nominal turns ratio (1.0 = none)


@dataclass(frozen=True)
class Gen:
    bus: int
    pmin: float
    pmax: float
    qmin: float
    qmax: float
    cost_a: float       # quadratic coefficient on per-unit injection
    cost_b: float       # linear coefficient on per-unit injection


@dataclass(frozen=True)
class GridCase:
    name: str
    base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    gens: tuple[Gen, ...]
    ref_bus: int

    @property
    def n_buses(self):
        return len(self.buses)

    def bus_index(self):
        """Mapping bus id -> positional index."""
        return {b.id: i for i, b in enumerate(self.buses)}

    def live_branches(self):
        """In-service branches, preserving file order."""
        return tuple(br for br in self.branches if br.status == 1)


def _strip_comments(text):
    return re.sub(r"%[^\n]*", "", text)


def _find_scalar(text, name):
    m = re.search(rf"mpc\.{name}\s*=\s*([0-9eE+\-.]+)\s*;", text)
    if m is None:
        raise MalformedBlock(f"missing scalar mpc.{name}")
    return float(m.group(1))


def _find_matrix(text, name):
    m = re.search(rf"mpc\.{name}\s*=\s*\[(.*?)\]\s*;", text, re.DOTALL)
    if m is None:
        raise MalformedBlock(f"missing matrix block mpc.{name}")
    rows = []
    for chunk in re.split(r"[;\n]", m.group(1)):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            rows.append([float(v) for v in chunk.split()])
        except ValueError as exc:
            raise MalformedBlock(f"unparseable row in mpc.{name}: {chunk!r}") from exc
    if not rows:
        raise MalformedBlock(f"empty matrix block mpc.{name}")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MalformedBlock(f"ragged matrix block mpc.{name}")
    return np.array(rows, dtype=np.float64)


def _connected(n, edges):
    """BFS connectivity over `n` nodes given (i, j) index pairs."""
    adj = [[] for _ in range(n)]
    for i, j in edges:
        adj[i].append(j)
        adj[j].append(i)
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return bool(seen.all())


def parse_matpower_case(text, name=None):
    """Parse MATPOWER `.m` case text into a validated per-unit GridCase.

    Supports the numeric-matrix subset: baseMVA, bus, branch, gen, gencost.
    Out-of-service branches are kept with status 0; polynomial costs of
    degree <= 2 map to (quadratic, linear) coefficients on per-unit
    injection, constant terms dropped.
    """
    if name is None:
        m = re.search(r"function\s+mpc\s*=\s*(\w+)", text)
        name = m.group(1) if m else "case"
    text = _strip_comments(text)
    base = _find_scalar(text, "baseMVA")
    bus_m = _find_matrix(text, "bus")
    gen_m = _find_matrix(text, "gen")
    branch_m = _find_matrix(text, "branch")
    cost_m = _find_matrix(text, "gencost")

    if bus_m.shape[1] < 13:
        raise MalformedBlock("bus matrix needs at least 13 columns")
    buses = tuple(
        Bus(id=int(r[0]), btype=int(r[1]), pd=float(r[2] / base),
            qd=float(r[3] / base), vmax=float(r[11]), vmin=float(r[12]))
        for r in bus_m
    )
    ids = {b.id for b in buses}
    if len(ids) != len(buses):
        raise MalformedBlock("duplicate bus ids")
    refs = [b.id for b in buses if b.btype == REF]
    if len(refs) != 1:
        raise NoRefBus(f"expected exactly one reference bus, found {len(refs)}")

    if branch_m.shape[1] < 11:
        raise MalformedBlock("branch matrix needs at least 11 columns")
    branches = []
    for r in branch_m:
        f, t = int(r[0]), int(r[1])
        if f not in ids or t not in ids:
            raise MalformedBlock(f"branch ({f},{t}) references undeclared bus")
        rr, x = float(r[2]), float(r[3])
        if x <= 0:
            raise MalformedBlock(f"branch ({f},{t}) has non-positive reactance")
        status = int(r[10])
        rate = float(r[5] / base)
        if status == 1 and rate <= 0:
            raise MalformedBlock(f"in-service branch ({f},{t}) lacks a flow limit")
        tap = float(r[8]) if r[8] != 0.0 else 1.0
        branches.append(Branch(from_bus=f, to_bus=t, r=rr, x=x,
                               y_mag=1.0 / float(np.hypot(rr, x)),
                               rate_a=rate, status=status, tap=tap))
    branches = tuple(branches)

    if gen_m.shape[0] != cost_m.shape[0]:
        raise MalformedBlock("gen and gencost row counts differ")
    gens = []
    for grow, crow in zip(gen_m, cost_m):
        gbus = int(grow[0])
        if gbus not in ids:
            raise MalformedBlock(f"generator references undeclared bus {gbus}")
        model, npoly = int(crow[0]), int(crow[3])
        if model != 2:
            raise UnsupportedCost(f"gen at bus {gbus}: only polynomial costs supported")
        if npoly > 3:
            raise UnsupportedCost(f"gen at bus {gbus}: polynomial degree > 2")
        coeffs = list(crow[4:4 + npoly])          # highest order first
        coeffs = [0.0] * (3 - len(coeffs)) + coeffs
        c2, c1 = coeffs[0], coeffs[1]
        pmin, pmax = float(grow[9] / base), float(grow[8] / base)
        if pmin > pmax:
            raise MalformedBlock(f"gen at bus {gbus}: pmin > pmax")
        gens.append(Gen(bus=gbus, pmin=pmin, pmax=pmax,
                        qmin=float(grow[4] / base), qmax=float(grow[3] / base),
                        cost_a=float(c2 * base), cost_b=float(c1)))
    gens = tuple(gens)

    idx = {b.id: i for i, b in enumerate(buses)}
    live_edges = [(idx[br.from_bus], idx[br.to_bus])
                  for br in branches if br.status == 1]
    if not _connected(len(buses), live_edges):
        raise DisconnectedCase("live topology is not connected")

    case = GridCase(name=name, base_mva=base, buses=buses,
                    branches=branches, gens=gens, ref_bus=refs[0])
    for arr in (bus_m, gen_m, branch_m, cost_m):
        if not np.isfinite(arr).all():
            raise NonFiniteValue("case file contains non-finite values")
    return case


def format_matpower_case(case):
    """Serialize a GridCase back to MATPOWER text (inverse of the parser)."""
    base = case.base_mva
    out = io.StringIO()
    out.write(f"function mpc = {case.name}\n")
    out.write("mpc.version = '2';\n")
    out.write(f"mpc.baseMVA = {base!r};\n\n")
    out.write("mpc.bus = [\n")
    for b in case.buses:
        out.write(f"\t{b.id}\t{b.btype}\t{b.pd * base!r}\t{b.qd * base!r}"
                  f"\t0\t0\t1\t1\t0\t0\t1\t{b.vmax!r}\t{b.vmin!r};\n")
    out.write("];\n\nmpc.gen = [\n")
    for g in case.gens:
        out.write(f"\t{g.bus}\t0\t0\t{g.qmax * base!r}\t{g.qmin * base!r}\t1\t{base!r}"
                  f"\t1\t{g.pmax * base!r}\t{g.pmin * base!r}\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0\t0;\n")
    out.write("];\n\nmpc.branch = [\n")
    for br in case.branches:
        tap = 0.0 if br.tap == 1.0 else br.tap
        out.write(f"\t{br.from_bus}\t{br.to_bus}\t{br.r!r}\t{br.x!r}\t0"
                  f"\t{br.rate_a * base!r}\t0\t0\t{tap!r}\t0\t{br.status}\t-360\t360;\n")
    out.write("];\n\nmpc.gencost = [\n")
    for g in case.gens:
        out.write(f"\t2\t0\t0\t3\t{g.cost_a / base!r}\t{g.cost_b!r}\t0;\n")
    out.write("];\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Dataset files
# ---------------------------------------------------------------------------

LABEL_WIDTH_KEYS = ("pi", "p", "v", "binding")


def label_widths(header):
    """Per-label-channel widths implied by the header."""
    n, e = header["n_buses"], header["n_lines"]
    widths = {"pi": n, "p": n, "v": n, "binding": e}
    return [widths[name] for name in header["label_names"]]


@dataclass
class DatasetFile:
    """In-memory dataset: per-sample nodal features and label rows."""
    header: dict
    features: np.ndarray        # (n_samples, n_buses, n_features)
    labels: np.ndarray          # (n_samples, total_label_width)

    @property
    def n_samples(self):
        return self.features.shape[0]

    def label_slices(self):
        """Mapping label name -> column slice into `labels`."""
        out = {}
        start = 0
        for name, w in zip(self.header["label_names"], label_widths(self.header)):
            out[name] = slice(start, start + w)
            start += w
        return out

    def validate(self):
        n = self.header["n_buses"]
        d = len(self.header["feature_names"])
        if self.features.ndim != 3 or self.features.shape[1:] != (n, d):
            raise HeaderMismatch("feature block shape disagrees with header")
        if self.labels.shape[0] != self.features.shape[0]:
            raise HeaderMismatch("feature and label sample counts differ")
        if self.labels.shape[1] != sum(label_widths(self.header)):
            raise HeaderMismatch("label width disagrees with header")
        if self.n_samples and not (np.isfinite(self.features).all()
                                   and np.isfinite(self.labels).all()):
            raise NonFiniteValue("dataset contains non-finite values")
        return self


def write_dataset(path, dataset):
    """Write a DatasetFile as CSV with a one-line JSON header comment."""
    dataset.validate()
    n_samples = dataset.n_samples
    flat = dataset.features.reshape(
        n_samples, dataset.features.shape[1] * dataset.features.shape[2])
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(dataset.header, sort_keys=True) + "\n")
        for i in range(n_samples):
            row = [repr(float(v)) for v in flat[i]]
            row += [repr(float(v)) for v in dataset.labels[i]]
            fh.write(",".join(row) + "\n")


def read_dataset(path):
    """Read a dataset CSV; inverse of write_dataset (bit-exact for finite values)."""
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise HeaderMismatch("missing JSON header line")
        header = json.loads(first[1:])
        n = header["n_buses"]
        d = len(header["feature_names"])
        feat_width = n * d
        total = feat_width + sum(label_widths(header))
        feats, labels = [], []
        for ln, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            vals = line.split(",")
            if len(vals) != total:
                raise HeaderMismatch(f"line {ln}: expected {total} values, got {len(vals)}")
            row = np.array([float(v) for v in vals], dtype=np.float64)
            if not np.isfinite(row).all():
                raise NonFiniteValue(f"line {ln}: non-finite value")
            feats.append(row[:feat_width].reshape(n, d))
            labels.append(row[feat_width:])
    if feats:
        features = np.array(feats)
        labels = np.array(labels)
    else:
        features = np.zeros((0, n, d))
        labels = np.zeros((0, sum(label_widths(header))))
    return DatasetFile(header=header, features=features, labels=labels).validate()


# ---------------------------------------------------------------------------
# Model checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, manifest, arrays):
    """Write manifest + named float64 arrays; order and shapes frozen in manifest."""
    manifest = dict(manifest)
    manifest["format_version"] = _CKPT_VERSION
    manifest["arrays"] = [{"name": name, "shape": list(arr.shape)}
                          for name, arr in arrays]
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read a checkpoint container -> (manifest, {name: array})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CKPT_MAGIC))
        if magic != _CKPT_MAGIC:
            raise VersionMismatch("not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode())
        if manifest.get("format_version") != _CKPT_VERSION:
            raise VersionMismatch(
                f"unsupported checkpoint version {manifest.get('format_version')}")
        arrays = {}
        for spec in manifest["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * count)
            if len(buf) != 8 * count:
                raise ShapeMismatch(f"truncated array {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise ShapeMismatch("trailing bytes after declared arrays")
    return manifest, arrays


def save_model(path, model):
    """Save a trained model (graph or fully-connected) to a checkpoint file."""
    manifest, arrays = model.checkpoint_payload()
    save_checkpoint(path, manifest, arrays)


def load_model(path, n_nodes=None):
    """Load a model checkpoint; optionally enforce the expected bus count."""
    from . import nn  # deferred: nn depends on nothing here at import time

    manifest, arrays = load_checkpoint(path)
    if n_nodes is not None and manifest.get("n_nodes") != n_nodes:
        raise ShapeMismatch(
            f"checkpoint is for {manifest.get('n_nodes')} buses, expected {n_nodes}")
    return nn.model_from_checkpoint(manifest, arrays)
