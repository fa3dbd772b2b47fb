"""
Harness outputs: benchmark CSVs, the markdown mean +- std report and SVG sweep plots.
"""
import csv
import logging
import math
import xml.etree.ElementTree as ET
from collections import Counter, defaultdict
from pathlib import Path

from utils.metrics import summarize

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(levelname)s | %(name)s | %(message)s",
)
logger = logging.getLogger(__name__)

ROW_COLUMNS = (
    "family", "method", "R", "S", "trial", "seed",
    "psnr", "ssim", "zf_psnr", "zf_ssim", "kspace_residual",
    "nfe", "seconds", "status", "error",
)
TIMING_COLUMNS = ("seconds",)
SWEEP_COLUMNS = ("family", "method", "S", "metric", "mean", "std", "n")

SVG_NS = "http://www.w3.org/2000/svg"
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def row_sort_key(row: dict):
    return (row["family"], row["method"], float(row["R"]), int(row["S"]), int(row["trial"]))


def _format_value(value):
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else value


def write_rows_csv(rows, path, timing: bool = True) -> Path:
    """
    RFC-4180 CSV (CRLF line ends, minimal quoting) of benchmark rows in sorted order.
    timing=False drops the wall-clock columns, leaving a file that is byte-identical across reruns.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [c for c in ROW_COLUMNS if timing or c not in TIMING_COLUMNS]
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(columns)
        for row in sorted(rows, key=row_sort_key):
            writer.writerow([_format_value(row.get(c)) for c in columns])
    logger.info(f"Wrote {len(rows)} rows to {path}")
    return path


def read_rows_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def format_cell(values, decimals: int) -> str:
    """Mean +- sample std at fixed precision, e.g. "31.00 ± 1.41"."""
    mean, std = summarize(values)
    return f"{mean:.{decimals}f} ± {std:.{decimals}f}"


def _ok(rows):
    return [row for row in rows if (row.get("status") or "ok") == "ok"]


KEY_TYPES = {"R": float, "S": int, "trial": int}


def _grouped(rows, keys, metric):
    groups = defaultdict(list)
    for row in rows:
        key = tuple(KEY_TYPES.get(k, str)(row[k]) for k in keys)
        groups[key].append(float(row[metric]))
    return groups


def _markdown_table(header, body) -> list:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(cells) + " |" for cells in body]
    return lines


def export_report(rows, path=None) -> str:
    """
    Markdown report: per-metric tables (rows = family/method/S, columns = acceleration),
    a zero-filled reference row per family and S, and a family-by-method SSIM table.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("Cannot export a report from empty results")
    good = _ok(rows)
    failed = len(rows) - len(good)
    if not good:
        raise ValueError(f"All {failed} benchmark rows failed; nothing to report")

    accelerations = sorted({float(r["R"]) for r in good})
    families = sorted({r["family"] for r in good})
    methods = sorted({r["method"] for r in good})
    nfes = sorted({int(r["S"]) for r in good})

    lines = ["# Reconstruction benchmark", ""]
    excluded = Counter(row.get("status") or "ok" for row in rows)
    del excluded["ok"]
    lines.append(f"{len(good)} runs reported" + (
        ", " + " and ".join(f"{n} {status}" for status, n in sorted(excluded.items())) + " runs excluded." if failed else "."
    ))

    for metric, zf_metric, title, decimals in (("psnr", "zf_psnr", "PSNR (dB)", 2), ("ssim", "zf_ssim", "SSIM", 3)):
        cells = _grouped(good, ("family", "method", "S", "R"), metric)
        zf_cells = _grouped(good, ("family", "S", "R"), zf_metric)
        header = ["family", "method", "NFE"] + [f"{R:g}×" for R in accelerations]
        body = []
        for family in families:
            for S in nfes:
                zf = [format_cell(zf_cells[(family, S, R)], decimals) if (family, S, R) in zf_cells else "-"
                      for R in accelerations]
                body.append([family, "zero-filled", str(S)] + zf)
                for method in methods:
                    values = [cells.get((family, method, S, R)) for R in accelerations]
                    if not any(values):
                        continue
                    body.append([family, method, str(S)] + [format_cell(v, decimals) if v else "-" for v in values])
        lines += ["", f"## {title}", ""] + _markdown_table(header, body)

    ssim_by_family = _grouped(good, ("method", "family", "R"), "ssim")
    header = ["method"] + [f"{family} {R:g}×" for family in families for R in accelerations]
    body = []
    for method in methods:
        body.append([method] + [
            format_cell(ssim_by_family[(method, family, R)], 3) if (method, family, R) in ssim_by_family else "-"
            for family in families for R in accelerations
        ])
    lines += ["", "## SSIM by phantom family", ""] + _markdown_table(header, body)

    text = "\n".join(lines) + "\n"
    if path is not None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        logger.info(f"Wrote report to {path}")
    return text


def sweep_table(rows) -> list:
    """Per (family, method, S) mean and std of psnr and ssim over trials."""
    table = []
    for metric in ("psnr", "ssim"):
        for (family, method, S), values in sorted(_grouped(_ok(rows), ("family", "method", "S"), metric).items()):
            summary = summarize(values)
            table.append({
                "family": family, "method": method, "S": int(S), "metric": metric,
                "mean": summary.mean, "std": summary.std, "n": summary.n,
            })
    return table


def write_sweep_csv(table, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\r\n")
        writer.writerow(SWEEP_COLUMNS)
        for entry in table:
            writer.writerow([_format_value(entry[c]) for c in SWEEP_COLUMNS])
    logger.info(f"Wrote sweep table ({len(table)} entries) to {path}")
    return path


def write_sweep_svg(table, metric: str, path, family: str = None, width: int = 640, height: int = 400) -> Path:
    """Line plot of mean metric vs NFE with a +-1 std band: one polyline and one polygon per method."""
    entries = [e for e in table if e["metric"] == metric and (family is None or e["family"] == family)]
    if not entries:
        raise ValueError(f"No sweep entries for metric '{metric}'")

    finite = [e for e in entries if math.isfinite(e["mean"])]
    xs = [e["S"] for e in finite]
    lows = [e["mean"] - e["std"] for e in finite]
    highs = [e["mean"] + e["std"] for e in finite]
    x_min, x_max = min(xs), max(xs)
    y_min, y_max = min(lows), max(highs)
    if x_max == x_min:
        x_max = x_min + 1
    if y_max == y_min:
        y_max = y_min + 1.0

    margin = 50
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def px(x, y):
        sx = margin + (x - x_min) / (x_max - x_min) * plot_w
        sy = height - margin - (y - y_min) / (y_max - y_min) * plot_h
        return f"{sx:.2f},{sy:.2f}"

    ET.register_namespace("", SVG_NS)
    svg = ET.Element(f"{{{SVG_NS}}}svg", width=str(width), height=str(height), viewBox=f"0 0 {width} {height}")
    ET.SubElement(svg, f"{{{SVG_NS}}}title").text = f"{metric} vs NFE"
    ET.SubElement(svg, f"{{{SVG_NS}}}line", x1=str(margin), y1=str(height - margin),
                  x2=str(width - margin), y2=str(height - margin), stroke="black")
    ET.SubElement(svg, f"{{{SVG_NS}}}line", x1=str(margin), y1=str(margin),
                  x2=str(margin), y2=str(height - margin), stroke="black")
    ET.SubElement(svg, f"{{{SVG_NS}}}text", x=str(width // 2), y=str(height - 10)).text = "NFE"
    ET.SubElement(svg, f"{{{SVG_NS}}}text", x="5", y=str(margin - 10)).text = (
        f"{metric} [{y_min:.3g}, {y_max:.3g}]"
    )

    methods = sorted({e["method"] for e in finite})
    for i, method in enumerate(methods):
        colour = PALETTE[i % len(PALETTE)]
        points = sorted((e for e in finite if e["method"] == method), key=lambda e: e["S"])
        upper = [px(e["S"], e["mean"] + e["std"]) for e in points]
        lower = [px(e["S"], e["mean"] - e["std"]) for e in reversed(points)]
        ET.SubElement(svg, f"{{{SVG_NS}}}polygon", points=" ".join(upper + lower),
                      fill=colour, attrib={"fill-opacity": "0.2", "stroke": "none"})
        ET.SubElement(svg, f"{{{SVG_NS}}}polyline", points=" ".join(px(e["S"], e["mean"]) for e in points),
                      fill="none", stroke=colour, attrib={"stroke-width": "2", "data-method": method})
        ET.SubElement(svg, f"{{{SVG_NS}}}text", x=str(width - margin + 5), y=str(margin + 15 * i),
                      fill=colour).text = method

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)
    logger.info(f"Wrote {metric} sweep plot ({len(methods)} methods) to {path}")
    return path
