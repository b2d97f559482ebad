"""JSON + markdown renderings of evaluation results."""
from __future__ import annotations

from .evaluation import EvalReport, SeedAggregate

__all__ = ["fmt_oa", "eval_markdown", "ablation_markdown", "sweep_markdown", "ipc_markdown"]

_CHECK = "✓"


def fmt_oa(mean: float, std: float | None) -> str:
    return f"{mean:.2f}" if std is None else f"{mean:.2f} ± {std:.2f}"


def eval_markdown(reports: list) -> str:
    lines = ["| Training set | IPC | Ratio (%) | OA (%) |", "|---|---|---|---|"]
    for r in reports:
        ipc = "-" if r.ipc is None else str(r.ipc)
        ratio = "100" if r.ratio is None and r.ipc is None else ("-" if r.ratio is None else f"{100 * r.ratio:.2f}")
        lines.append(f"| {r.name} | {ipc} | {ratio} | {fmt_oa(r.oa_mean, r.oa_std)} |")
    return "\n".join(lines) + "\n"


def ablation_markdown(result) -> str:
    """Ablation table: one check column per component, OA over seeds."""
    lines = [
        "| L_D | L_cls | Vis. Prot. | Cap. Agg. | OA (%) | per-seed |",
        "|:---:|:---:|:---:|:---:|---|---|",
    ]
    for row in result.rows:
        agg: SeedAggregate = result.aggregates[row.name]
        marks = [_CHECK, _CHECK if row.uses_cls else "", _CHECK if row.uses_prototypes else "", _CHECK if row.uses_aggregation else ""]
        seeds = ", ".join(f"{v:.1f}" for v in agg.per_seed)
        lines.append(f"| {' | '.join(marks)} | {fmt_oa(agg.mean, agg.std)} | {seeds} |")
    return "\n".join(lines) + "\n"


def sweep_markdown(result) -> str:
    lines = [f"| {result.param} | OA mean ± std (%) | median | per-seed |", "|---|---|---|---|"]
    best = result.argmax()
    for v in result.values:
        agg = result.aggregates[v]
        mark = " *" if v == best else ""
        seeds = ", ".join(f"{x:.1f}" for x in agg.per_seed)
        lines.append(f"| {v}{mark} | {fmt_oa(agg.mean, agg.std)} | {agg.median:.2f} | {seeds} |")
    return "\n".join(lines) + "\n"


def ipc_markdown(result, n_classes: int, n_train: int, full: EvalReport | None = None, noise: dict | None = None) -> str:
    """Method x IPC grid with the compression ratio row.

    ``noise`` maps IPC to the uniform-noise report at that IPC.
    """
    vals = result.values
    head = "| Method | " + " | ".join(f"IPC={v}" for v in vals) + " |"
    lines = [head, "|---|" + "---|" * len(vals)]
    lines.append("| Ratio (%) | " + " | ".join(f"{100 * v * n_classes / n_train:.2f}" for v in vals) + " |")
    if noise is not None:
        cells = [fmt_oa(noise[v].oa_mean, noise[v].oa_std) if v in noise else "-" for v in vals]
        lines.append("| Noise images | " + " | ".join(cells) + " |")
    lines.append("| DPD | " + " | ".join(fmt_oa(result.aggregates[v].mean, result.aggregates[v].std) for v in vals) + " |")
    if full is not None:
        lines.append("| Full-data Training | " + " | ".join([fmt_oa(full.oa_mean, full.oa_std)] * len(vals)) + " |")
    return "\n".join(lines) + "\n"
