"""Component ablations over seeds, compared on TAIL-class mean recall."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import evalkit as ek
from . import synthdata as sd
from . import trainer as tr

# variant -> removed components; "baseline" drops everything, the
# mixture head included, leaving a plain encoder-decoder with a linear classifier
VARIANTS: Dict[str, Tuple[str, ...]] = {
    "full": (),
    "baseline": tr.ABLATABLE,
    "no_kmcl": ("kmcl",),
    "no_debias": ("debias",),
    "no_tfod": ("tfod",),
    "no_regularizer": ("regularizer",),
    "no_ema": ("ema",),
}
DIRECTIONAL = ("baseline", "no_kmcl", "no_debias", "no_tfod")


@dataclass
class AblationRun:
    variant: str
    seed: int
    report: ek.EvalReport
    seconds: float

    @property
    def tail(self) -> float:
        return self.report.buckets.get("TAIL", math.nan)


@dataclass
class AblationResult:
    runs: List[AblationRun] = field(default_factory=list)

    def mean(self, variant: str, metric: Callable[[AblationRun], float] = lambda r: r.tail) -> float:
        vals = [metric(r) for r in self.runs if r.variant == variant]
        vals = [v for v in vals if not math.isnan(v)]
        return float(np.mean(vals)) if vals else math.nan

    def variants(self) -> List[str]:
        seen = []
        for r in self.runs:
            if r.variant not in seen:
                seen.append(r.variant)
        return seen


def directional_check(result: AblationResult, against: Sequence[str] = DIRECTIONAL) -> Tuple[bool, List[str]]:
    """Full model must beat every listed variant on seed-mean TAIL mR@10."""
    full = result.mean("full")
    lines, ok = [], True
    for v in against:
        other = result.mean(v)
        passed = not math.isnan(full) and not math.isnan(other) and full > other
        ok &= passed
        lines.append(f"{'PASS' if passed else 'FAIL'} full {full:.4f} > {v} {other:.4f}")
    return ok, lines


def run_ablation(
    base: tr.TrainConfig,
    data: sd.GeneratorConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = ("full",) + DIRECTIONAL,
    n_train: int = 200,
    regime: Optional[str] = None,
    log: Optional[Callable[[str], None]] = None,
) -> AblationResult:
    """Train and test every variant on every seed.

    Each seed generates its own dataset (generator seed = model seed).
    """
    regime = base.regime if regime is None else regime
    result = AblationResult()
    for seed in seeds:
        videos = sd.generate(sd.GeneratorConfig(**{**data.to_dict(), "seed": seed}))
        train, test = sd.split(videos, n_train)
        if not test:
            raise ValueError("ablation needs held-out test videos (videos > n_train)")
        counts = sd.predicate_histogram(train, base.num_predicates)
        for name in variants:
            if name not in VARIANTS:
                raise ValueError(f"unknown variant {name!r}")
            cfg = tr.config_from_dict({**base.to_dict(), "seed": seed, "ablate": list(VARIANTS[name])})
            t0 = time.perf_counter()
            state = tr.train(train, cfg)
            report = tr.evaluate_state(state, test, counts, regime=regime)
            run = AblationRun(name, seed, report, time.perf_counter() - t0)
            result.runs.append(run)
            if log is not None:
                log(f"seed {seed} {name}: TAIL mR@10 {run.tail:.4f} mR@10 {report.mean_recall[10]:.4f} ({run.seconds:.0f}s)")
    return result


def write_ablation(result: AblationResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation_runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seed", "TAIL_mR@10", "BODY_mR@10", "HEAD_mR@10", "mR@10", "mR@20", "mR@50", "R@10", "R@20", "R@50"])
        for r in result.runs:
            rep = r.report
            w.writerow(
                [r.variant, r.seed]
                + [repr(rep.buckets.get(b, math.nan)) for b in ("TAIL", "BODY", "HEAD")]
                + [repr(rep.mean_recall[k]) for k in ek.DEFAULT_KS]
                + [repr(rep.recall[k]) for k in ek.DEFAULT_KS]
            )
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant", "seeds", "TAIL_mR@10", "mR@10", "R@10"])
        for v in result.variants():
            n = sum(r.variant == v for r in result.runs)
            w.writerow([v, n, repr(result.mean(v)), repr(result.mean(v, lambda r: r.report.mean_recall[10])), repr(result.mean(v, lambda r: r.report.recall[10]))])
    ok, lines = directional_check(result, [v for v in DIRECTIONAL if v in result.variants()])
    (out / "ablation_check.json").write_text(json.dumps({"passed": ok, "lines": lines}, indent=2))
