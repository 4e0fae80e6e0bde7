"""PNG figures for experiment tables."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

ENERGY = {
    "dnc_static_energy": "DNC static",
    "conventional_energy": "conventional",
    "oracle_energy": "grid oracle",
    "ergodic_energy": "DNC ergodic",
    "ergodic_conventional_energy": "conventional ergodic",
    "static_avg_energy": "static, averaged over draws",
    "design_energy": "design objective",
    "eact_analytic": "actual, analytic",
    "eact_sim": "actual, simulated",
}
QUEUE = {
    "q1_analytic": ("Q1 analytic", "-", None),
    "q1_sim": ("Q1 simulated", "none", "o"),
    "qr2_analytic": ("Qr2 analytic", "--", None),
    "qr2_sim": ("Qr2 simulated", "none", "s"),
}
LABELS = {"lambda1": r"$\lambda_1$ (packets/slot)", "lambda2": r"$\lambda_2$ (packets/slot)", "eps": r"$\epsilon$"}


def _series(rows, case, x, col):
    pts = [(r[x], r[col]) for r in rows if r["case"] == case and r["status"] == "ok" and col in r]
    return [p[0] for p in pts], [p[1] for p in pts]


def plot_experiment(result, out_dir) -> list[Path]:
    """Write one energy and (if present) one queue figure per case."""
    out = Path(out_dir)
    spec = result.spec
    x = spec.sweep
    paths = []
    for case in spec.cases:
        for kind, cols in (("energy", ENERGY), ("queue", QUEUE)):
            present = [c for c in cols if c in result.columns]
            if not present:
                continue
            fig, ax = plt.subplots(figsize=(6.0, 4.0))
            for c in present:
                xs, ys = _series(result.rows, case, x, c)
                if kind == "energy":
                    style = dict(marker="o" if c.endswith("_sim") or c == "oracle_energy" else None)
                    ls = "none" if style["marker"] else "-"
                    ax.plot(xs, ys, linestyle=ls, label=cols[c], **style)
                else:
                    label, ls, marker = cols[c]
                    ax.plot(xs, ys, linestyle=ls, marker=marker, label=label)
            ax.set_xlabel(LABELS.get(x, x))
            ax.set_ylabel("energy per slot" if kind == "energy" else "mean queue length (packets)")
            ax.set_title(f"{spec.name}: {case}")
            ax.grid(True, alpha=0.3)
            ax.legend(frameon=False, fontsize=8)
            fig.tight_layout()
            path = out / f"{spec.name}_{case}_{kind}.png"
            fig.savefig(path, dpi=120, metadata={"Software": None})
            plt.close(fig)
            paths.append(path)
    return paths
