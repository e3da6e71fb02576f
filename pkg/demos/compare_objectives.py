"""Pretrain with each objective on the same split and test the MRR differences.

Each experiment shares the mine/build/vocab settings, so all of them see the
same test bugs. Pairwise Mann-Whitney tests use per-bug reciprocal ranks and a
Bonferroni-corrected threshold.

    python demos/compare_objectives.py [workdir]
"""

import json
import sys
from pathlib import Path

from bugloc.pipeline import ExperimentManifest, Runner, compare, run
from bugloc.synthetic import FixtureConfig, generate_fixture

work = Path(sys.argv[1] if len(sys.argv) > 1 else "compare-run")
exports = work / "exports"
generate_fixture(exports, FixtureConfig(n_projects=4, bugs_per_project=15, seed=2))

manifests = []
for objective in ("mlm", "electra", "mlm_then_qa"):
    path = work / objective / "manifest.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({
        "experiment_id": objective,
        "seed": 2,
        "artifact_dir": "artifacts",
        "stages": {
            "mine": {"exports": str(exports.resolve())},
            "build": {"negatives_per_positive": 3, "pool_size": 10},
            "vocab": {"size": 256},
            "pretrain": {"objective": objective, "epochs": 2, "batch_size": 16,
                         "encoder": {"num_layers": 1, "hidden_dim": 32, "ffn_dim": 64}},
            "train_head": {"epochs": 3, "batch_size": 16},
        },
    }))
    manifest = ExperimentManifest.load(path)
    run(manifest)
    overall = json.loads(Runner(manifest).upstream("evaluate", "demo", "metrics").read_text())["overall"]
    print(f"{objective:>12}  MRR {overall['mrr']:.3f}  MAP {overall['map']:.3f}")
    manifests.append(manifest)

print()
for row in compare(manifests, metric="mrr", unit="bug"):
    verdict = "significant" if row.significant else "not significant"
    print(f"{row.pair[0]} vs {row.pair[1]}: p={row.p_value:.3f} ({row.method}), "
          f"alpha={row.alpha_corrected:.4f}, {verdict}")
