"""On-disk formats.

* spots table: TSV ``sample_id, layer_index, spot_id, x, y, radius, known``
* expression: TSV, ``spot_id`` then one column per gene
* features: binary ``ST3D-FMAT`` + u16 version + u8 level + u32 rows +
  u32 cols, then row-major little-endian float32
* transforms: JSON list, one object per layer
* manifest: JSON describing the files of every sample

TSV numbers are written with 9 significant digits.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..affine import AffineTransform2D
from ..errors import ConsistencyError, DataError, FormatError
from ..records import LEVELS, ExpressionMatrix, FeatureMatrix, Layer, SampleStack, Spot

FMAT_MAGIC = b"ST3D-FMAT"
FMAT_VERSION = 1
_FMAT_HEADER = struct.Struct("<9sHBII")
MANIFEST_VERSION = 1
SPOT_COLUMNS = ("sample_id", "layer_index", "spot_id", "x", "y", "radius", "known")


def fmt(v: float) -> str:
    return f"{v:.9g}"


# ---------------------------------------------------------------------------
# spots table


def write_spots_table(stacks, path) -> None:
    if isinstance(stacks, SampleStack):
        stacks = [stacks]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(SPOT_COLUMNS)
        for st in stacks:
            for s in st.spots:
                w.writerow((st.sample_id, s.layer_index, s.spot_id, fmt(s.x), fmt(s.y),
                            fmt(s.radius), int(s.known)))


def read_spots_table(path) -> "OrderedDict[str, list]":
    """Spots grouped by sample id, in file order."""
    out = OrderedDict()
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty spots table")
        cols = {name: i for i, name in enumerate(header)}
        missing = [c for c in SPOT_COLUMNS if c not in cols and c != "radius"]
        if missing:
            raise FormatError(f"{path}: spots table lacks columns {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                x, y = float(row[cols["x"]]), float(row[cols["y"]])
                radius = float(row[cols["radius"]]) if "radius" in cols and row[cols["radius"]] != "" else 112.0
                spot = Spot(
                    spot_id=row[cols["spot_id"]],
                    layer_index=int(row[cols["layer_index"]]),
                    x=x, y=y, radius=radius,
                    known=row[cols["known"]].strip().lower() in ("1", "true", "yes"),
                )
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in (x, y, radius)):
                raise DataError(f"{path}:{lineno}: non-finite coordinate or radius")
            out.setdefault(row[cols["sample_id"]], []).append(spot)
    return out


# ---------------------------------------------------------------------------
# expression


def write_expression(expr: ExpressionMatrix, path, spot_ids=None) -> None:
    ids = spot_ids if spot_ids is not None else expr.spot_ids
    if ids is None or len(ids) != expr.rows:
        raise ConsistencyError("writing expression requires one spot id per row")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(("spot_id",) + tuple(expr.gene_names))
        for sid, row in zip(ids, expr.values):
            w.writerow((sid,) + tuple(fmt(v) for v in row))


def read_expression(path) -> ExpressionMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        header = next(reader, None)
        if not header or header[0] != "spot_id":
            raise FormatError(f"{path}: expression header must start with 'spot_id'")
        genes = header[1:]
        if len(set(genes)) != len(genes):
            dup = sorted({g for g in genes if genes.count(g) > 1})
            raise DataError(f"{path}: duplicate gene names {dup}")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            for j, v in enumerate(vals):
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value at row {lineno} (spot {row[0]}), column {genes[j]!r}")
            ids.append(row[0])
            rows.append(vals)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(genes))
    return ExpressionMatrix(values, tuple(genes), tuple(ids))


# ---------------------------------------------------------------------------
# features


def write_features(fm: FeatureMatrix, path) -> None:
    v = np.ascontiguousarray(fm.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_FMAT_HEADER.pack(FMAT_MAGIC, FMAT_VERSION, LEVELS.index(fm.level), *v.shape))
        fh.write(v.tobytes())


def read_features(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if len(data) < _FMAT_HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, version, level, rows, cols = _FMAT_HEADER.unpack_from(data, 0)
    if magic != FMAT_MAGIC:
        raise FormatError(f"{path}: bad feature magic {magic!r}")
    if version != FMAT_VERSION:
        raise FormatError(f"{path}: unsupported feature version {version}")
    if level >= len(LEVELS):
        raise FormatError(f"{path}: unknown level code {level}")
    expected = _FMAT_HEADER.size + rows * cols * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(data)}")
    v = np.frombuffer(data, dtype="<f4", offset=_FMAT_HEADER.size).reshape(rows, cols).astype(np.float64)
    if not np.all(np.isfinite(v)):
        r, c = np.argwhere(~np.isfinite(v))[0]
        raise DataError(f"{path}: non-finite feature at row {r}, column {c}")
    return FeatureMatrix(v, LEVELS[level])


# ---------------------------------------------------------------------------
# transforms


def write_transforms(layers, path) -> None:
    doc = []
    for layer in layers:
        t = layer.transform
        entry = {"layer_index": layer.layer_index, "is_reference": layer.is_reference}
        entry.update(zip(("a", "b", "c", "d", "tx", "ty"), t.coefficients()))
        if t.is_invertible:
            entry["inverse"] = list(t.inverse().coefficients())
        doc.append(entry)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_transforms(path) -> dict:
    """``{layer_index: (AffineTransform2D, is_reference)}``."""
    try:
        doc = json.loads(Path(path).read_text())
        return {
            int(e["layer_index"]): (
                AffineTransform2D(*(float(e[k]) for k in ("a", "b", "c", "d", "tx", "ty"))),
                bool(e["is_reference"]),
            )
            for e in doc
        }
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed transforms file ({exc})") from None


# ---------------------------------------------------------------------------
# manifest


def save_dataset(stacks, outdir, manifest_name: str = "manifest.json") -> Path:
    """Write every stack plus a manifest under ``outdir``; returns the manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    entries = []
    for st in stacks:
        sid = st.sample_id
        files = {
            "sample_id": sid,
            "spots": f"{sid}.spots.tsv",
            "expression": f"{sid}.expression.tsv",
            "features": {},
            "transforms": f"{sid}.transforms.json",
        }
        write_spots_table(st, outdir / files["spots"])
        write_expression(st.expression, outdir / files["expression"], st.spot_ids)
        for level in LEVELS:
            fm = st.feature_level(level)
            if fm is not None:
                name = f"{sid}.{level}.fmat"
                write_features(fm, outdir / name)
                files["features"][level] = name
        write_transforms(st.layers, outdir / files["transforms"])
        entries.append(files)
    manifest = {"format_version": MANIFEST_VERSION, "expression_kind": "normalized", "samples": entries}
    path = outdir / manifest_name
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("format_version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest format_version {doc.get('format_version')!r}")
    if not isinstance(doc.get("samples"), list):
        raise FormatError(f"{path}: manifest needs a 'samples' list")
    return doc


def load_stack(entry: dict, root) -> SampleStack:
    root = Path(root)

    def p(name):
        f = root / name
        if not f.is_file():
            raise DataError(f"file referenced by manifest not found: {f}")
        return f

    sid = entry["sample_id"]
    spots = read_spots_table(p(entry["spots"])).get(sid)
    if not spots:
        raise ConsistencyError(f"{entry['spots']}: no spots for sample {sid!r}")
    expr = read_expression(p(entry["expression"]))
    ids = [s.spot_id for s in sorted(spots, key=lambda s: s.layer_index)]
    if expr.rows != len(spots):
        raise ConsistencyError(
            f"{entry['expression']}: {expr.rows} rows but {entry['spots']} lists {len(spots)} spots for {sid!r}"
        )
    if list(expr.spot_ids) != ids:
        pos = {s: i for i, s in enumerate(expr.spot_ids)}
        try:
            expr = expr.take_rows([pos[s] for s in ids])
        except KeyError as exc:
            raise ConsistencyError(f"{entry['expression']}: missing spot {exc.args[0]!r}") from None
    feats = {}
    for level, name in entry.get("features", {}).items():
        fm = read_features(p(name))
        if fm.rows != len(spots):
            raise ConsistencyError(f"{name}: {fm.rows} rows but sample {sid!r} has {len(spots)} spots")
        feats[level] = fm
    if "spot" not in feats:
        raise ConsistencyError(f"sample {sid!r}: manifest lists no spot-level features")
    transforms = read_transforms(p(entry["transforms"]))
    by_layer = OrderedDict()
    for s in spots:
        by_layer.setdefault(s.layer_index, []).append(s)
    layers = []
    for idx in sorted(by_layer):
        if idx not in transforms:
            raise ConsistencyError(f"{entry['transforms']}: no transform for layer {idx}")
        t, is_ref = transforms[idx]
        layers.append(Layer(idx, tuple(by_layer[idx]), t, is_ref))
    return SampleStack(sid, tuple(layers), expr, feats["spot"], feats.get("region"), feats.get("global"))


def load_dataset(manifest_path) -> list:
    """Load every stack in a manifest, normalising raw counts when flagged."""
    from .preprocess import normalize, select_top_genes

    manifest_path = Path(manifest_path)
    doc = read_manifest(manifest_path)
    stacks = [load_stack(e, manifest_path.parent) for e in doc["samples"]]
    if doc.get("expression_kind", "normalized") == "counts":
        genes = stacks[0].expression.gene_names
        if any(s.expression.gene_names != genes for s in stacks):
            raise ConsistencyError(f"{manifest_path}: samples disagree on gene columns")
        pooled = ExpressionMatrix(np.vstack([s.expression.values for s in stacks]), genes)
        n_top = min(int(doc.get("top_genes", 250)), len(genes))
        keep = [genes.index(g) for g in select_top_genes(pooled, n_top).gene_names]
        out = []
        for s in stacks:
            normed, _ = normalize(s.expression.take_genes(keep), float(doc.get("normalize_scale", 1e4)))
            out.append(_replace_expression(s, normed))
        stacks = out
    return stacks


def _replace_expression(stack, expr):
    from dataclasses import replace
    return replace(stack, expression=expr)
