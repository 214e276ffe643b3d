"""Text result tables (augmentation rows, scope and fraction column groups), delimited exports and figures."""

from __future__ import annotations

import csv
from pathlib import Path

from ..metrics import METRICS, format_mean_std
from ..patchlab import SCOPES
from .experiment import AUGMENTATIONS, CLASSIFIERS, FRACTIONS

BEST_MARK = "*"
METRIC_HEADERS = {"accuracy": "Acc", "f1": "F1", "auroc": "AUROC", "auprc": "AUPRC"}
SCOPE_LABELS = {"all_lesions": "All lesions", "masses_only": "Masses"}
AUG_LABELS = {
    "none": "Centre A only",
    "bcdr_wgangp": "+ B WGAN-GP",
    "bcdr_dcgan": "+ B DCGAN",
    "optimam_dcgan": "+ C DCGAN",
    "both_a": "+ Both (a)",
    "both_b": "+ Both (b)",
    "real_external": "+ B real (upper bound)",
}


def _key(cell) -> tuple:
    s = cell["spec"]
    return s["classifier"], s["scope"], float(s["data_fraction"]), s["augmentation"]


def _ordered(values, canonical):
    return [v for v in canonical if v in values] + sorted(v for v in values if v not in canonical)


def best_rows(values: list) -> set:
    """Indices holding the column maximum (all of them on ties)."""
    present = [v for v in values if v is not None]
    if not present:
        return set()
    top = max(present)
    return {i for i, v in enumerate(values) if v is not None and v == top}


def render_tables(cells: list) -> str:
    """One table per classifier: augmentation rows, (scope, fraction, metric) columns.

    Cells read ``mean(std)``; the best mean in each column carries a trailing ``*``.
    """
    by = {_key(c): c for c in cells}
    out = []
    for clf in _ordered({k[0] for k in by}, CLASSIFIERS):
        keys = [k for k in by if k[0] == clf]
        scopes = _ordered({k[1] for k in keys}, SCOPES)
        fracs = _ordered({k[2] for k in keys}, FRACTIONS)
        augs = _ordered({k[3] for k in keys}, AUGMENTATIONS)
        cols = [(s, f, m) for s in scopes for f in fracs for m in METRICS]
        grid = []
        for aug in augs:
            row = []
            for s, f, m in cols:
                c = by.get((clf, s, f, aug))
                row.append(None if c is None else (c["aggregate"]["mean"][m], c["aggregate"]["std"][m]))
            grid.append(row)
        text = [[("" if v is None else format_mean_std(*v)) for v in row] for row in grid]
        for j in range(len(cols)):
            for i in best_rows([None if row[j] is None else round(row[j][0], 3) for row in grid]):
                text[i][j] += BEST_MARK
        label_w = max(len(AUG_LABELS.get(a, a)) for a in augs + ["Augmentation"])
        cw = max(13, max((len(t) for row in text for t in row), default=0))
        group_w = len(METRICS) * (cw + 1) - 1
        groups = [f"{SCOPE_LABELS.get(s, s)}, {round(f * 100)}%".center(group_w) for s in scopes for f in fracs]
        metrics_hdr = " ".join(METRIC_HEADERS[m].rjust(cw) for _ in range(len(scopes) * len(fracs))
                               for m in METRICS)
        lines = [f"Classifier: {clf}  (test set: centre A; mean(std) over seeds; {BEST_MARK} = best in column)",
                 " " * label_w + " | " + " | ".join(groups),
                 "Augmentation".ljust(label_w) + " | " + metrics_hdr]
        lines.append("-" * len(lines[-1]))
        for aug, row in zip(augs, text):
            cells_txt = []
            for g in range(len(scopes) * len(fracs)):
                chunk = row[g * len(METRICS):(g + 1) * len(METRICS)]
                cells_txt.append(" ".join(t.rjust(cw) for t in chunk))
            lines.append(AUG_LABELS.get(aug, aug).ljust(label_w) + " | " + " | ".join(cells_txt))
        if "real_external" in augs:
            lines.append("note: the real-patch arm moves real centre-B data across the boundary; it is an upper bound only.")
        out.append("\n".join(lines))
    return "\n\n".join(out) + "\n"


def delimited_rows(cells: list) -> list:
    header = ["classifier", "scope", "data_fraction", "augmentation", "seeds"]
    for m in METRICS:
        header += [f"{m}_mean", f"{m}_std", f"{m}_formatted", f"{m}_best"]
    by_col: dict = {}
    for c in cells:
        clf, scope, frac, _ = _key(c)
        by_col.setdefault((clf, scope, frac), []).append(c)
    best = {}
    for group in by_col.values():
        for m in METRICS:
            idx = best_rows([round(c["aggregate"]["mean"][m], 3) for c in group])
            for i, c in enumerate(group):
                best[(c["cell"], m)] = i in idx
    rows = [header]
    for c in cells:
        s, a = c["spec"], c["aggregate"]
        row = [s["classifier"], s["scope"], s["data_fraction"], s["augmentation"],
               " ".join(map(str, s["seeds"]))]
        for m in METRICS:
            row += [f"{a['mean'][m]:.6f}", f"{a['std'][m]:.6f}", format_mean_std(a["mean"][m], a["std"][m]),
                    int(best[(c["cell"], m)])]
        rows.append(row)
    return rows


def write_delimited(cells: list, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, delimiter=delimiter, lineterminator="\n").writerows(delimited_rows(cells))


def write_figures(cells: list, workspace, fig_dir) -> list:
    from .. import plotting
    from ..gan import sample_synthetic

    fig_dir = Path(fig_dir)
    paths = []
    for clf in _ordered({c["spec"]["classifier"] for c in cells}, CLASSIFIERS):
        paths.append(plotting.plot_metric_bars(cells, "f1", fig_dir / f"f1_{clf}.png", clf))
    paths.append(plotting.plot_val_histories(cells, fig_dir / "val_auprc.png"))
    for (role, variant, scope), gan in sorted(workspace._gans.items()):
        name = f"{role}-{variant}-{scope}"
        if gan.history:
            paths.append(plotting.plot_loss_curves(gan.history, fig_dir / f"gan_loss_{name}.png", name))
        paths.append(plotting.plot_sample_grid(sample_synthetic(gan, 32, seed=0), fig_dir / f"gan_samples_{name}.png",
                                               title=name))
    return paths
