"""Byte accounting, result files and scheme comparison."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

from .grad_core import (GradientVector, SparseUpdate, as_array, dense_nbytes, encode_update,
                        sparse_nbytes, sparsify)
from .fl_engine import LINKS, RoundResult, load_datasets, run_experiment
from .config import format_config

CSV_HEADER = ("round", "loss", "accuracy") + LINKS
OUTPUT_ENV = "PAIMFL_OUTPUT_DIR"


class OutputError(OSError):
    category = "output"


def account_bytes(payload) -> int:
    """Serialized length: 8 + 8k for a SparseUpdate, 4 + 4d for a dense vector, len() for bytes."""
    if isinstance(payload, (bytes, bytearray, memoryview)):
        return len(payload)
    if isinstance(payload, SparseUpdate):
        return sparse_nbytes(payload.k)
    return dense_nbytes(as_array(payload).size)


@dataclass
class BytesLedger:
    per_round: list = field(default_factory=list)

    def record_round(self, res: RoundResult):
        self.per_round.append({k: getattr(res, k) for k in LINKS})

    def record(self, round: int, link: str, nbytes: int):
        if link not in LINKS:
            raise KeyError(link)
        while len(self.per_round) <= round:
            self.per_round.append(dict.fromkeys(LINKS, 0))
        self.per_round[round][link] += int(nbytes)

    @property
    def cumulative(self) -> dict:
        return {k: sum(r[k] for r in self.per_round) for k in LINKS}

    @property
    def total(self) -> int:
        return sum(self.cumulative.values())


def output_dir(path=None) -> Path:
    """``$PAIMFL_OUTPUT_DIR`` wins over ``path``; falls back to ``./results``."""
    return Path(os.environ.get(OUTPUT_ENV) or path or "results")


def results_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow([r.round, repr(float(r.train_loss)), repr(float(r.test_accuracy))]
                   + [getattr(r, k) for k in LINKS])
    return buf.getvalue()


def emit_results(results, ledger, path, config=None, name="run") -> Path:
    """Write ``<name>.csv`` and ``<name>.manifest`` under the output directory."""
    out = output_dir(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.csv").write_text(results_csv(results), encoding="utf-8")
        if config is not None:
            extra = {"seed": config.master_seed}
            if ledger is not None:
                extra.update({f"bytes_{k}": v for k, v in ledger.cumulative.items()})
            (out / f"{name}.manifest").write_text(format_config(config, extra), encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write results to {out}: {exc}") from exc
    return out


# -- comparison --------------------------------------------------------------

COMPARISON_COLUMNS = ("scheme", "gamma", "rounds", "clients", "seed", "total_bytes", "uplink_bytes",
                      "downlink_bytes", "final_accuracy", "best_accuracy")


@dataclass
class ComparisonTable:
    rows: list

    def row(self, scheme, gamma=None) -> dict:
        for r in self.rows:
            if r["scheme"] == scheme and (gamma is None or r["gamma"] == gamma):
                return r
        raise KeyError((scheme, gamma))

    def ratio(self, num="unidirectional-sample-baseline", den="pa-imfl", gamma=None) -> float:
        """Byte ratio between two schemes; by default how many times fewer PA-iMFL sends."""
        return self.row(num, gamma)["total_bytes"] / self.row(den, gamma)["total_bytes"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COMPARISON_COLUMNS)
        for r in self.rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in COMPARISON_COLUMNS])
        return buf.getvalue()


def scheme_comparison(configs, train=None, test=None, per_round=None) -> ComparisonTable:
    """Run every config; all must share rounds, clients and seed.

    ``per_round`` (optional dict) collects each run's RoundResults keyed by
    (scheme, gamma).
    """
    configs = list(configs)
    keys = {(c.rounds, c.clients, c.master_seed) for c in configs}
    if len(keys) > 1:
        raise ValueError(f"schemes must share rounds, clients and seed; got {sorted(keys)}")
    if configs and (train is None or test is None):
        train, test = load_datasets(configs[0])
    rows = []
    for cfg in configs:
        ledger = BytesLedger()
        res = run_experiment(cfg, train=train, test=test, ledger=ledger)
        cum = ledger.cumulative
        acc = [r.test_accuracy for r in res]
        rows.append(dict(
            scheme=cfg.scheme, gamma=cfg.gamma, rounds=cfg.rounds, clients=cfg.clients,
            seed=cfg.master_seed, total_bytes=ledger.total,
            uplink_bytes=cum["up_end_edge"] + cum["up_edge_cloud"],
            downlink_bytes=cum["down_cloud_edge"] + cum["down_edge_end"],
            final_accuracy=acc[-1] if acc else float("nan"),
            best_accuracy=max(acc) if acc else float("nan")))
        if per_round is not None:
            per_round[(cfg.scheme, cfg.gamma)] = res
    return ComparisonTable(rows)


def reserialized_bytes(update, dense=False) -> int:
    """Independent re-encode of an update; used to audit the ledger."""
    if not isinstance(update, SparseUpdate):
        update = sparsify(GradientVector(as_array(update)))
    return len(encode_update(update, dense_downlink=dense))
