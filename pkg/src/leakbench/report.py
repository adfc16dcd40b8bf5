"""Aggregate RunRecords into mean ± std CSV tables and a JSON mirror.

Per-seed values are averaged over leave-one-site-out folds first, then
summarised across seeds as ``mean ± std`` (sample std, 4 decimals, half-even).
Output is a pure function of the records: no timestamps, sorted keys, LF
line endings, UTF-8.
"""

import csv
import io
import json
import os

import numpy as np

from leakbench.metrics import aggregate_seeds, fmt4

METHOD_ORDER = ("random-init", "ssl-only", "canonicalf")
HELDOUT_MEAN = "heldout-mean"


def _method_key(m):
    base = m.split("+", 1)[0]
    rank = METHOD_ORDER.index(base) if base in METHOD_ORDER else len(METHOD_ORDER)
    return (rank, m)


def _split_columns(records):
    """Evaluation columns in a stable order: source first, then targets / held-out sites."""
    loso = any(r.heldout is not None for r in records)
    cols = set()
    for r in records:
        if loso:
            cols.add("source-val")
            cols.add(f"heldout:{r.heldout}")
        else:
            cols.update(r.aucs)
    ordered = sorted(cols, key=lambda c: (c != "source-val", c))
    if loso:
        ordered.append(HELDOUT_MEAN)
    return ordered


def _auc_values(r):
    """Split -> AUC for one record, with LOSO targets renamed to the held-out site."""
    if r.heldout is None:
        return dict(r.aucs)
    out = {"source-val": r.aucs["source-val"]}
    target = [v for k, v in r.aucs.items() if k.startswith("target:")]
    out[f"heldout:{r.heldout}"] = target[0]
    out[HELDOUT_MEAN] = target[0]
    return out


def _per_seed(records, value_fn):
    """column -> seed -> mean over the records (folds) of that seed."""
    acc = {}
    for r in records:
        for col, v in value_fn(r).items():
            acc.setdefault(col, {}).setdefault(r.seed, []).append(v)
    return {col: {seed: float(np.mean(vs)) for seed, vs in sorted(by_seed.items())} for col, by_seed in acc.items()}


def _cell(values_by_seed, ascii_only):
    """(formatted, mean, std, per-seed dict); "NA" when fewer than two seeds exist."""
    if values_by_seed is None or len(values_by_seed) < 2:
        return "NA", None, None
    st = aggregate_seeds(list(values_by_seed.values()))
    return st.format(ascii_only), st.mean, st.std


def _seed_map(d):
    return {str(k): v for k, v in sorted(d.items())} if d else {}


def auc_table(records, ascii_only=False):
    """Rows (one per method) and a JSON-ready mirror for the transfer AUC summary."""
    cols = _split_columns(records)
    methods = sorted({r.method for r in records}, key=_method_key)
    header = ["method"] + cols + [f"{c}_{k}" for c in cols for k in ("mean", "std")]
    rows, mirror = [], []
    for m in methods:
        per = _per_seed([r for r in records if r.method == m], _auc_values)
        cells, raw, entry = [], [], {"method": m, "splits": {}}
        for c in cols:
            text, mean, std = _cell(per.get(c), ascii_only)
            cells.append(text)
            raw.extend([fmt4(mean), fmt4(std)])
            entry["splits"][c] = {"per_seed": _seed_map(per.get(c)), "mean": mean, "std": std, "cell": text}
        rows.append([m] + cells + raw)
        mirror.append(entry)
    return header, rows, mirror


def _probe_kind(p):
    return "binary" if len(p.sites) == 2 else f"{len(p.sites)}-site"


def leakage_table(records, ascii_only=False):
    """Rows keyed by (stage, probe kind) with chance, probe-on-f and probe-on-z columns."""
    acc = {}
    chance = {}
    for r in records:
        for p in r.probes:
            key = (p.stage, _probe_kind(p))
            chance[key] = p.chance
            acc.setdefault(key, {}).setdefault(p.representation, {}).setdefault(r.seed, []).append(p.accuracy)
    keys = sorted(acc, key=lambda k: (_method_key(k[0]), k[1] != "binary", k[1]))
    reps = ("f", "z")
    header = ["stage", "probe", "chance"] + [f"probe_{x}" for x in reps]
    header += [f"probe_{x}_{k}" for x in reps for k in ("mean", "std")]
    rows, mirror = [], []
    for key in keys:
        cells, raw = [], []
        entry = {"stage": key[0], "probe": key[1], "chance": chance[key], "representations": {}}
        for x in reps:
            by_seed = acc[key].get(x)
            per = {s: float(np.mean(v)) for s, v in sorted(by_seed.items())} if by_seed else None
            text, mean, std = _cell(per, ascii_only)
            cells.append(text)
            raw.extend([fmt4(mean), fmt4(std)])
            entry["representations"][x] = {"per_seed": _seed_map(per), "mean": mean, "std": std, "cell": text}
        rows.append([key[0], key[1], fmt4(chance[key])] + cells + raw)
        mirror.append(entry)
    return header, rows, mirror


def sweep_table(rows):
    """Sweep rows (from :func:`leakbench.protocol.run_wsite_sweep`) as a CSV-ready table."""
    header = ["w_site", "target_val_auc", "probe_f", "chance", "criterion"]
    body = [[fmt4(r.w_site), fmt4(r.target_val_auc), fmt4(r.probe_f), fmt4(r.chance), fmt4(r.criterion)] for r in rows]
    return header, body


def render_csv(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def emit_reports(records, out_dir, ascii_only=False):
    """Write ``summary_auc.csv``, ``summary_leakage.csv`` and ``summary.json``; return their paths."""
    if not records:
        raise ValueError("emit_reports: no run records")
    hashes = sorted({r.config_hash for r in records})
    os.makedirs(out_dir, exist_ok=True)
    ah, arows, amirror = auc_table(records, ascii_only)
    lh, lrows, lmirror = leakage_table(records, ascii_only)
    paths = {
        "auc": os.path.join(out_dir, "summary_auc.csv"),
        "leakage": os.path.join(out_dir, "summary_leakage.csv"),
        "json": os.path.join(out_dir, "summary.json"),
    }
    _write_text(paths["auc"], render_csv(ah, arows))
    _write_text(paths["leakage"], render_csv(lh, lrows))
    mirror = {
        "config_hashes": hashes,
        "seeds": sorted({r.seed for r in records}),
        "std": "sample (n-1)",
        "rounding": "4 decimals, half-even, of repr(value)",
        "auc": amirror,
        "leakage": lmirror,
    }
    _write_text(paths["json"], json.dumps(mirror, indent=2, sort_keys=True, ensure_ascii=ascii_only) + "\n")
    return paths


def load_summary(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
