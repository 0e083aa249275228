"""Round logs (NDJSON) and result tables (CSV)."""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

from .metrics import EvalResult

SCHEMA_VERSION = 1
RESULTS_HEADER = f"# pfedsam results v{SCHEMA_VERSION}"
ABLATION_HEADER = f"# pfedsam ablation v{SCHEMA_VERSION}"
RESULT_COLUMNS = ("preset", "client", "model_kind", "dice", "iou", "n_samples", "payload_up_bytes")


def round_line(report, preset: str) -> str:
    return json.dumps({"preset": preset, **report.to_dict()}, sort_keys=True)


def write_round_log(path, reports, preset: str):
    with open(path, "w", newline="\n") as fh:
        for rep in reports:
            fh.write(round_line(rep, preset) + "\n")


def read_round_log(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def result_rows(experiment) -> list[dict]:
    """Long-format rows: one per client, then ``average`` and ``unseen``."""
    payload = experiment.payload_up_by_client()
    rows = [
        {
            "preset": experiment.preset,
            "client": r.client_id,
            "model_kind": r.model_kind,
            "dice": r.dice,
            "iou": r.iou,
            "n_samples": r.n_samples,
            "payload_up_bytes": payload.get(r.client_id, 0),
        }
        for r in experiment.results
    ]
    rows.append(
        {
            "preset": experiment.preset,
            "client": "average",
            "model_kind": "personalized",
            "dice": experiment.mean_dice,
            "iou": experiment.mean_iou,
            "n_samples": sum(r.n_samples for r in experiment.results),
            "payload_up_bytes": experiment.payload_up_total,
        }
    )
    if experiment.unseen is not None:
        u = experiment.unseen
        rows.append(
            {
                "preset": experiment.preset,
                "client": "unseen",
                "model_kind": "global",
                "dice": u.dice,
                "iou": u.iou,
                "n_samples": u.n_samples,
                "payload_up_bytes": 0,
            }
        )
    return rows


def _fmt(value):
    return repr(value) if isinstance(value, float) else str(value)


def format_results_csv(rows) -> str:
    buf = io.StringIO()
    buf.write(RESULTS_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in RESULT_COLUMNS])
    return buf.getvalue()


def write_results_csv(path, rows):
    Path(path).write_text(format_results_csv(rows))


def parse_results_csv(text: str) -> list[tuple[str, EvalResult, int]]:
    """Rows back as ``(preset, EvalResult, payload_up_bytes)``."""
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    out = []
    for row in csv.DictReader(lines):
        result = EvalResult(row["client"], row["model_kind"], float(row["dice"]), float(row["iou"]), int(row["n_samples"]))
        out.append((row["preset"], result, int(row["payload_up_bytes"])))
    return out


def ablation_columns(client_ids) -> list[str]:
    cols = ["preset"]
    for cid in [*client_ids, "average", "unseen"]:
        cols += [f"{cid}_dice", f"{cid}_iou"]
    return cols + ["payload_up_bytes"]


def format_ablation_csv(experiments) -> str:
    """Wide ablation CSV: one row per preset, dice/iou columns per client, average and unseen."""
    client_ids = [r.client_id for r in experiments[0].results]
    cols = ablation_columns(client_ids)
    buf = io.StringIO()
    buf.write(ABLATION_HEADER + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for exp in experiments:
        values = [exp.preset]
        for r in exp.results:
            values += [r.dice, r.iou]
        values += [exp.mean_dice, exp.mean_iou]
        values += [exp.unseen.dice, exp.unseen.iou] if exp.unseen is not None else ["", ""]
        values.append(exp.payload_up_total)
        writer.writerow([_fmt(v) for v in values])
    return buf.getvalue()


def parse_ablation_csv(text: str) -> dict[str, list[EvalResult]]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    ids = [h[: -len("_dice")] for h in header if h.endswith("_dice")]
    out = {}
    for row in reader:
        rec = dict(zip(header, row))
        results = []
        for cid in ids:
            if rec[f"{cid}_dice"] == "":
                continue
            kind = "global" if cid == "unseen" else "personalized"
            results.append(EvalResult(cid, kind, float(rec[f"{cid}_dice"]), float(rec[f"{cid}_iou"]), 0))
        out[rec["preset"]] = results
    return out
