"""Three-row fusion ablation: vision-only, +lqv, +lqv+vql, averaged over seeds."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .data import SampleRecord
from .metrics import MetricsReport, evaluate
from .model import SegModel
from .text import Vocab
from .train import build_vocab, fit, make_optimizer, predict

log = logging.getLogger(__name__)

VARIANTS = (
    ("vision-only", False, False),
    ("w/ lqv", True, False),
    ("w/ lqv + vql", True, True),
)


@dataclass
class AblationRow:
    name: str
    reports: list[MetricsReport] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)     # one message per diverged seed

    def mean(self) -> list[float] | None:
        if not self.reports:
            return None
        return list(np.mean([r.row() for r in self.reports], axis=0))

    def miou_std(self) -> float | None:
        if not self.reports:
            return None
        return float(np.std([r.mIoU for r in self.reports]))

    @property
    def mIoU(self) -> float:
        m = self.mean()
        return float("nan") if m is None else m[4]


@dataclass
class AblationTable:
    rows: list[AblationRow]
    seeds: list[int]

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def format(self) -> str:
        cols = MetricsReport.COLUMNS + ("mIoU std",)
        lines = [f"{'':<14}" + "".join(f"{c:>10}" for c in cols)]
        for r in self.rows:
            m = r.mean()
            if m is None:
                lines.append(f"{r.name:<14}" + f"{'diverged':>10}")
                continue
            vals = m + [r.miou_std()]
            note = f"  ({len(r.failures)} diverged)" if r.failures else ""
            lines.append(f"{r.name:<14}" + "".join(f"{100 * v:10.2f}" for v in vals) + note)
        lines.append(f"seeds: {self.seeds}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"seeds": self.seeds,
                "rows": [{"name": r.name, "mean": r.mean(), "miou_std": r.miou_std(),
                          "reports": [x.to_dict() for x in r.reports], "failures": r.failures}
                         for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def train_and_evaluate(cfg: RunConfig, train: Sequence[SampleRecord], test: Sequence[SampleRecord],
                       vocab: Vocab, seed: int, test_titles: Sequence[str] | None = None):
    """Train one model from ``seed`` and return ``(report, predictions)``."""
    dtype = np.float32 if cfg.precision == "float32" else np.float64
    o = cfg.optim
    with T.precision(dtype):
        model = SegModel(cfg.model_config(len(vocab)), seed=seed, dtype=dtype)
        opt = make_optimizer(model, o.lr, (o.beta1, o.beta2), o.eps, o.weight_decay)
        fit(model, opt, train, vocab, o.epochs, o.batch_size, seed=seed)
        preds = predict(model, test, vocab, titles=test_titles)
    return evaluate(zip(preds, [s.mask for s in test])), preds


def run_ablation(train: Sequence[SampleRecord], test: Sequence[SampleRecord], base: RunConfig,
                 seeds: Sequence[int], vocab: Vocab | None = None,
                 on_cell: Callable[[str, int, MetricsReport | None], None] | None = None) -> AblationTable:
    """Train every variant from each seed and evaluate on ``test``.

    A non-finite loss marks that cell as diverged; the rest of the table
    is still produced.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    if not test:
        raise ValueError("run_ablation needs a non-empty test split")
    vocab = vocab or build_vocab([s.title for s in train])
    rows = []
    for name, lqv, vql in VARIANTS:
        row = AblationRow(name)
        for seed in seeds:
            cfg = copy.deepcopy(base)
            cfg.model.use_lqv, cfg.model.use_vql = lqv, vql
            try:
                report, _ = train_and_evaluate(cfg, train, test, vocab, seed)
            except T.NonFiniteError as exc:
                row.failures.append(f"seed {seed}: {exc}")
                log.warning("%s seed %d diverged: %s", name, seed, exc)
                report = None
            else:
                row.reports.append(report)
            if on_cell is not None:
                on_cell(name, seed, report)
        rows.append(row)
    return AblationTable(rows, seeds)
