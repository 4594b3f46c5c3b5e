"""The 200-sample adaptation benchmark: synthesize, train all three stages, compare.

Each stage reads the dataset back from disk, exactly as the CLI does, so the
numbers here match a ``synth`` + ``train --stage 1..3`` run with the same seed.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

from .synthdata import SampleConfig, generate_dataset, read_dataset, write_dataset
from .trainer import TrainConfig, run_stage

MIN_STAGE2_GAIN = 0.20
TIME_BUDGET_S = 30 * 60


@dataclass
class BenchmarkResult:
    epe_stage1_on_night: float
    epe_stage2: float
    epe_stage3: float
    boundary_epe_stage2: float
    boundary_epe_stage3: float
    seconds: float

    @property
    def stage2_gain(self):
        return 1.0 - self.epe_stage2 / self.epe_stage1_on_night

    def checks(self):
        """Named pass/fail flags for the ordering, gain, boundary and runtime conditions."""
        return {
            "stage3 <= stage2 <= stage1-on-night": self.epe_stage3 <= self.epe_stage2 <= self.epe_stage1_on_night,
            f"stage2 gain >= {MIN_STAGE2_GAIN:.0%}": self.stage2_gain >= MIN_STAGE2_GAIN,
            "stage3 boundary EPE < stage2": self.boundary_epe_stage3 < self.boundary_epe_stage2,
            f"runtime <= {TIME_BUDGET_S // 60} min": self.seconds <= TIME_BUDGET_S,
        }

    def passed(self):
        return all(self.checks().values())

    def summary(self):
        lines = [
            f"night EPE  stage1-on-night {self.epe_stage1_on_night:.4f}  stage2 {self.epe_stage2:.4f}"
            f"  stage3 {self.epe_stage3:.4f}  (stage2 gain {self.stage2_gain:.1%})",
            f"boundary EPE  stage2 {self.boundary_epe_stage2:.4f}  stage3 {self.boundary_epe_stage3:.4f}",
            f"runtime {self.seconds:.0f} s",
        ]
        lines += [f"{'PASS' if ok else 'FAIL'}  {name}" for name, ok in self.checks().items()]
        return "\n".join(lines)


def run_benchmark(out_dir, n=200, seed=0, cfg: TrainConfig | None = None, sample_cfg: SampleConfig | None = None):
    """Run the full benchmark under ``out_dir`` and return a :class:`BenchmarkResult`."""
    cfg = cfg or TrainConfig(seed=seed)
    out_dir = Path(out_dir)
    data_dir, run_dir = out_dir / "data", out_dir / "run"
    start = time.perf_counter()
    write_dataset(generate_dataset(n, seed, sample_cfg or SampleConfig(C=cfg.C)), data_dir)
    samples = read_dataset(data_dir)
    reports = {stage: run_stage(stage, samples, cfg, run_dir)[1]["metrics"] for stage in (1, 2, 3)}
    seconds = time.perf_counter() - start
    result = BenchmarkResult(
        epe_stage1_on_night=reports[2]["epe_day_on_night"],
        epe_stage2=reports[3]["epe_night_before"],
        epe_stage3=reports[3]["epe_night"],
        boundary_epe_stage2=reports[3]["boundary_epe_before"],
        boundary_epe_stage3=reports[3]["boundary_epe"],
        seconds=seconds,
    )
    (out_dir / "benchmark.json").write_text(json.dumps({**result.__dict__, "checks": result.checks()}, indent=2))
    return result
