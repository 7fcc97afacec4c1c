"""Five-row ablation ladder: each row trained on shared splits and seeds."""
import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data
from .evaluation import evaluate_model
from .network import build_network
from .training import ABLATION_ROWS, train_sr

log = logging.getLogger(__name__)


def split_hash(quads):
    return data.hash_arrays([a for q in quads for a in (q.lr, q.hr, np.int64(q.identity))])


@dataclass
class AblationRow:
    row: str
    seed_scores: dict = field(default_factory=dict)  # seed -> (psnr, ssim)
    failed: dict = field(default_factory=dict)  # seed -> reason

    @property
    def status(self):
        return "failed" if self.failed else "ok"

    def _mean(self, k):
        vals = [s[k] for s in self.seed_scores.values() if math.isfinite(s[k])]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_psnr(self):
        return self._mean(0)

    @property
    def mean_ssim(self):
        return self._mean(1)


@dataclass
class AblationTable:
    rows: list
    split_hashes: dict
    config_hash: str = ""

    def row(self, name):
        return next(r for r in self.rows if r.row == name)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "seed", "psnr_db", "ssim", "status", "config_hash"])
        for r in self.rows:
            for seed in sorted(set(r.seed_scores) | set(r.failed)):
                if seed in r.failed:
                    w.writerow([r.row, seed, "", "", "failed: " + r.failed[seed], self.config_hash])
                else:
                    p, s = r.seed_scores[seed]
                    w.writerow([r.row, seed, repr(p), repr(s), "ok", self.config_hash])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    def summary(self):
        return [{"row": r.row, "mean_psnr": r.mean_psnr, "mean_ssim": r.mean_ssim,
                 "status": r.status, "seeds": sorted(r.seed_scores)} for r in self.rows]

    def to_json(self, path=None):
        text = json.dumps({"config_hash": self.config_hash, "split_hashes": self.split_hashes,
                           "rows": self.summary()}, indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def run_ablation(train_quads, val_quads, test_quads, seeds, net_config, schedule,
                 priors=None, alpha=0.001, rows=None, config_hash="", progress=None):
    """Train and score every requested ladder row for every seed.

    A row that raises (divergence, missing priors, ...) is marked failed for
    that seed and the remaining rows still run.
    """
    rows = list(rows or ABLATION_ROWS)
    splits = {"train": train_quads, "val": val_quads, "test": test_quads}
    hashes = {k: split_hash(v) for k, v in splits.items()}
    table = AblationTable([AblationRow(r) for r in rows], hashes, config_hash)
    for entry in table.rows:
        cascaded, loss_cfg = ABLATION_ROWS[entry.row]
        for seed in seeds:
            # every row must see exactly the same data
            if {k: split_hash(v) for k, v in splits.items()} != hashes:
                raise RuntimeError("ablation splits changed between rows")
            try:
                cfg = replace(net_config, cascaded=cascaded)
                net = build_network(cfg, seed)
                net, _, _ = train_sr(net, train_quads, val_quads, schedule, loss_cfg,
                                     priors if loss_cfg.identity else None, alpha, seed=seed)
                rep = evaluate_model(net, test_quads)
                entry.seed_scores[seed] = (rep.mean_psnr, rep.mean_ssim)
            except Exception as exc:  # noqa: BLE001 - a failed row must not sink the table
                log.warning("ablation row %s seed %s failed: %s", entry.row, seed, exc)
                entry.failed[seed] = f"{type(exc).__name__}: {exc}"
            if progress:
                progress(entry.row, seed, entry.seed_scores.get(seed), entry.failed.get(seed))
    return table

