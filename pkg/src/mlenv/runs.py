"""Run directories and the files written into them."""

from __future__ import annotations

import csv
import io
import json
import logging
import secrets
import threading
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

from mlenv.methods import MetricRecord

CONFIG_FILE = "config.json"
METRICS_FILE = "metrics.csv"
LOG_FILE = "log.txt"
TEST_METRICS_FILE = "test_metrics.json"
PLOT_FILE = "curves.png"


def make_run_dir(save_path, command: str) -> Path:
    """Create ``<save_path>/<UTC timestamp>-<command>-<random suffix>/``."""
    parent = Path(save_path)
    parent.mkdir(parents=True, exist_ok=True)
    while True:
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
        run_dir = parent / f"{stamp}-{command}-{secrets.token_hex(3)}"
        try:
            run_dir.mkdir()
            return run_dir
        except FileExistsError:
            continue


def metric_columns(history: Iterable[MetricRecord], extra: Iterable[str] = ()) -> list[str]:
    cols = set(extra)
    for record in history:
        cols.update(record.unprefixed())
    return sorted(cols)


def format_metrics_csv(history: Sequence[MetricRecord], columns: Sequence[str]) -> str:
    """Header ``epoch,split,<columns>`` then one row per record; floats in repr form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", *columns])
    for record in history:
        values = record.unprefixed()
        w.writerow([record.epoch, record.split, *(repr(float(values[c])) if c in values else "" for c in columns)])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def write_test_metrics(run_dir: Path, record: MetricRecord) -> Path:
    path = Path(run_dir) / TEST_METRICS_FILE
    path.write_text(json.dumps({"epoch": record.epoch, "values": record.values}, indent=2, sort_keys=True) + "\n")
    return path


def read_test_metrics(run_dir) -> MetricRecord:
    d = json.loads((Path(run_dir) / TEST_METRICS_FILE).read_text())
    return MetricRecord("test", d["epoch"], d["values"])


def write_run_artifacts(run_dir, cfg, history: Sequence[MetricRecord], columns: Sequence[str] = ()) -> None:
    """config.json and metrics.csv; the checkpoint and log are written by their owners."""
    run_dir = Path(run_dir)
    (run_dir / CONFIG_FILE).write_text(cfg.to_json(), encoding="utf-8")
    (run_dir / METRICS_FILE).write_text(format_metrics_csv(history, metric_columns(history, columns)))


def plot_history(history: Sequence[MetricRecord], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = metric_columns(history)
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3), squeeze=False)
    for ax, name in zip(axes[0], names):
        for split in sorted({r.split for r in history}):
            pts = [(r.epoch, r.unprefixed()[name]) for r in history if r.split == split and name in r.unprefixed()]
            if pts:
                ax.plot(*zip(*pts), marker="o", label=split)
        ax.set_xlabel("epoch")
        ax.set_title(name)
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


@contextmanager
def run_log(run_dir):
    """Route this thread's ``mlenv`` log records into ``run_dir/log.txt``."""
    handler = logging.FileHandler(Path(run_dir) / LOG_FILE, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    ident = threading.get_ident()
    handler.addFilter(lambda rec: rec.thread == ident)
    root = logging.getLogger("mlenv")
    # left at INFO afterwards: restoring it would race with concurrent trials
    if root.getEffectiveLevel() > logging.INFO:
        root.setLevel(logging.INFO)
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        handler.close()
