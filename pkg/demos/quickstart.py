"""End-to-end walk through the pipeline on a small synthetic corpus.

Generates issue, commit and snapshot exports, writes a manifest, runs every
stage and prints the evaluation and corpus analysis.

    python demos/quickstart.py [workdir]
"""

import json
import sys
from pathlib import Path

from bugloc.evaluation import random_rank_baseline
from bugloc.pipeline import ExperimentManifest, Runner, read_jsonl, run
from bugloc.synthetic import FixtureConfig, generate_fixture

work = Path(sys.argv[1] if len(sys.argv) > 1 else "quickstart-run")
exports = work / "exports"
generate_fixture(exports, FixtureConfig(n_projects=4, bugs_per_project=15, seed=1))

manifest_path = work / "manifest.json"
manifest_path.write_text(json.dumps({
    "experiment_id": "quickstart",
    "seed": 1,
    "artifact_dir": "artifacts",
    "stages": {
        "mine": {"exports": "exports"},
        "build": {"negatives_per_positive": 3, "pool_size": 10},
        "vocab": {"size": 256},
        "pretrain": {"objective": "electra", "epochs": 2, "batch_size": 16,
                     "encoder": {"num_layers": 1, "hidden_dim": 32, "ffn_dim": 64}},
        "train_head": {"epochs": 3, "batch_size": 16},
    },
}, indent=2))

manifest = ExperimentManifest.load(manifest_path)
for stage, status in run(manifest).items():
    print(f"{stage:>10}: {status}")

runner = Runner(manifest)
metrics = json.loads(runner.upstream("evaluate", "demo", "metrics").read_text())
pools = read_jsonl(runner.upstream("build", "demo", "pools"))
chance = sum(random_rank_baseline(len(p["candidates"]), len(p["relevant"])) for p in pools) / len(pools)
print(f"\nMRR {metrics['overall']['mrr']:.3f}  MAP {metrics['overall']['map']:.3f}  "
      f"(chance MRR {chance:.3f}, {metrics['overall']['n_bugs']} test bugs)")

divergence = json.loads(runner.upstream("analyze", "demo", "divergence").read_text())
print("\nKL divergence of each project's code from the training code:")
for project, value in sorted(divergence["per_project"].items()):
    print(f"  {project}  {value:.4f}")

# a second run reuses every artifact
print("\nrerun:", set(run(manifest).values()))
