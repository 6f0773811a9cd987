#!/usr/bin/env python3
"""Run one acceptance scenario and cache its outcome under results/.

Usage: run_acceptance.py <name> [...]

Each <name> refers to configs/<name>.ini.  The run writes
results/<name>.csv (observer rows) and results/<name>.json (final
report, convergence state, timings, and the config checksum the numbers
belong to).  The acceptance test suite reads these files instead of
re-running the multi-hour scenarios; rerun this script after touching a
config.
"""

import gc
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))

from octoflow.fields import warmup_kernels            # noqa: E402
from octoflow.observe import run_to_steady            # noqa: E402
from octoflow.scenarios import load_config, setup_scenario  # noqa: E402


def run_one(name: str) -> dict:
    cfg_path = ROOT / "configs" / f"{name}.ini"
    cfg = load_config(cfg_path)
    scn = setup_scenario(cfg)
    levels = scn.forest.levels_in_use()
    fine_per_coarse = 1 << (levels[-1] - levels[0])
    print(f"[{name}] {cfg.scenario} refinement={cfg.refinement} "
          f"levels={levels} blocks={len(scn.forest.blocks)}", flush=True)

    stepper = scn.make_stepper()
    t0 = time.perf_counter()
    last_print = [t0]

    def progress(rep):
        now = time.perf_counter()
        if now - last_print[0] >= 60.0 or rep.t <= cfg.eval_interval:
            last_print[0] = now
            print(f"[{name}] t={rep.t} L2={rep.L2:.6e} Linf={rep.Linf:.6e} "
                  f"Qerr={rep.flow_rate_error:.4e} ({now - t0:.0f}s)",
                  flush=True)

    reports, steady = run_to_steady(
        scn, stepper, csv_path=ROOT / "results" / f"{name}.csv",
        progress=progress,
    )
    stepper.close()
    wall = time.perf_counter() - t0
    last = reports[-1]
    out = {
        "name": name,
        "config": f"configs/{name}.ini",
        "config_sha256": hashlib.sha256(cfg_path.read_bytes()).hexdigest(),
        "finished_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "scenario": cfg.scenario,
        "refinement": cfg.refinement,
        "steady": steady,
        "coarse_steps": stepper.coarse_steps_done,
        "fine_steps": last.t,
        "wall_seconds": round(wall, 1),
        "final": {
            "L1": last.L1, "L2": last.L2, "Linf": last.Linf,
            "flow_rate": last.flow_rate,
            "flow_rate_error": last.flow_rate_error,
            "mlups": last.mlups,
        },
        "level_seconds": {
            str(k): round(v, 1) for k, v in stepper.level_seconds.items()
        },
    }
    path = ROOT / "results" / f"{name}.json"
    path.write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    print(f"[{name}] done in {wall:.0f}s steady={steady} Linf={last.Linf:.6e} "
          f"Qerr={last.flow_rate_error:.4e} -> {path}", flush=True)
    return out


def main(argv):
    if len(argv) < 2:
        print(__doc__)
        return 2
    warmup_kernels()
    for name in argv[1:]:
        run_one(name)
        gc.collect()  # big scenarios; keep peak RSS to one run at a time
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
