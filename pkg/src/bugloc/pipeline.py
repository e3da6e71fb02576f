"""Declarative, resumable experiment pipeline.

An experiment manifest is one JSON document::

    {"experiment_id": "demo", "seed": 7, "artifact_dir": "artifacts",
     "stages": {"mine": {"exports": "data"}, "build": {...}, "vocab": {...},
                "pretrain": {...}, "train_head": {...}, "evaluate": {}, "analyze": {}}}

Relative paths resolve against the manifest's directory. Every stage writes
its outputs as ``<artifact_dir>/<experiment_id>/<stage>/<sha256>.<ext>`` plus a
``run.json`` record holding the config echo, input and output hashes and the
wall time. A stage whose record matches the current config and inputs is
skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import corpus, evaluation, localizer, pretrain as pretraining
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .tokenization import Vocabulary, token_frequency, train_vocabulary

logger = logging.getLogger(__name__)

STAGES = ("mine", "build", "vocab", "pretrain", "train_head", "evaluate", "analyze")


class PipelineError(Exception):
    """A manifest or artifact problem the user has to fix (exit status 1)."""


class MissingArtifactError(PipelineError):
    def __init__(self, stage: str, path):
        super().__init__(f"stage {stage!r}: missing input artifact {path}")
        self.stage, self.path = stage, Path(path)


class StaleArtifactError(PipelineError):
    def __init__(self, stage: str, path):
        super().__init__(f"stage {stage!r}: artifact {path} no longer matches its recorded hash")
        self.stage, self.path = stage, Path(path)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class ExperimentManifest:
    experiment_id: str
    seed: int
    artifact_dir: Path
    stages: dict[str, dict]
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def load(cls, path, seed: int | None = None, artifact_dir=None) -> "ExperimentManifest":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise PipelineError(f"manifest {path} not found") from None
        except json.JSONDecodeError as exc:
            raise PipelineError(f"manifest {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, path.parent, seed=seed, artifact_dir=artifact_dir)

    @classmethod
    def from_dict(cls, raw: dict, base_dir, seed=None, artifact_dir=None) -> "ExperimentManifest":
        base_dir = Path(base_dir).resolve()
        for key in ("experiment_id", "stages"):
            if key not in raw:
                raise PipelineError(f"manifest lacks {key!r}")
        unknown = set(raw["stages"]) - set(STAGES)
        if unknown:
            raise PipelineError(f"unknown stages {sorted(unknown)}")
        target = Path(artifact_dir) if artifact_dir is not None else Path(raw.get("artifact_dir", "artifacts"))
        manifest = cls(
            experiment_id=str(raw["experiment_id"]),
            seed=int(seed if seed is not None else raw.get("seed", 0)),
            artifact_dir=target if target.is_absolute() else base_dir / target,
            stages={s: dict(raw["stages"].get(s) or {}) for s in STAGES},
            base_dir=base_dir,
        )
        manifest.validate()
        return manifest

    def validate(self) -> None:
        if "exports" not in self.stages["mine"]:
            raise PipelineError("stage 'mine' needs an 'exports' directory")
        try:
            self.encoder_config(vocab_size=self.stages["vocab"].get("size", 512))
            self.pretrain_config()
            self.head_config()
        except (TypeError, ValueError) as exc:
            raise PipelineError(f"invalid stage config: {exc}") from None

    def stage_seed(self, stage: str) -> int:
        return int(self.stages[stage].get("seed", self.seed))

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        block = dict(self.stages["pretrain"].get("encoder", {}))
        block.setdefault("seed", self.stage_seed("pretrain"))
        block["vocab_size"] = vocab_size
        return EncoderConfig(**block)

    def pretrain_config(self) -> pretraining.PretrainConfig:
        block = {k: v for k, v in self.stages["pretrain"].items() if k != "encoder"}
        block.setdefault("seed", self.seed)
        return pretraining.PretrainConfig(**block)

    def head_config(self) -> localizer.HeadConfig:
        block = dict(self.stages["train_head"].get("head", {}))
        block.setdefault("seed", self.stage_seed("train_head"))
        return localizer.HeadConfig(**block)

    def stage_dir(self, stage: str) -> Path:
        return self.artifact_dir / self.experiment_id / stage


def _atomic_write(directory: Path, ext: str, writer: Callable[[Path], None]) -> tuple[Path, str]:
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    os.close(fd)
    tmp = Path(tmp)
    try:
        writer(tmp)
        digest = sha256_file(tmp)
        final = directory / f"{digest}.{ext}"
        os.replace(tmp, final)
    finally:
        if tmp.exists():
            tmp.unlink()
    return final, digest


def _write_text(text: str) -> Callable[[Path], None]:
    def writer(path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    return writer


class Runner:
    def __init__(self, manifest: ExperimentManifest):
        self.m = manifest
        self.stage_impl = {
            "mine": self._mine,
            "build": self._build,
            "vocab": self._vocab,
            "pretrain": self._pretrain,
            "train_head": self._train_head,
            "evaluate": self._evaluate,
            "analyze": self._analyze,
        }

    # run records -------------------------------------------------------
    def record_path(self, stage: str) -> Path:
        return self.m.stage_dir(stage) / "run.json"

    def load_record(self, stage: str, consumer: str) -> dict:
        path = self.record_path(stage)
        if not path.exists():
            raise MissingArtifactError(consumer, path)
        record = json.loads(path.read_text(encoding="utf-8"))
        for name, entry in record["outputs"].items():
            out = Path(entry["path"])
            if not out.exists():
                raise MissingArtifactError(consumer, out)
            if sha256_file(out) != entry["sha256"]:
                raise StaleArtifactError(consumer, out)
        return record

    def upstream(self, stage: str, consumer: str, name: str) -> Path:
        return Path(self.load_record(stage, consumer)["outputs"][name]["path"])

    def stage_config(self, stage: str) -> dict:
        return {"stage": stage, "seed": self.m.stage_seed(stage), "config": self.m.stages[stage]}

    def run(self, stage: str | None = None) -> dict[str, str]:
        """Run one stage or all of them in order; returns ``{stage: "ran"|"skipped"}``."""
        todo = STAGES if stage is None else (stage,)
        if stage is not None and stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        return {s: self._run_stage(s) for s in todo}

    def _run_stage(self, stage: str) -> str:
        inputs = self._inputs(stage)
        key = hashlib.sha256(
            _canonical({"config": self.stage_config(stage), "inputs": {k: v[1] for k, v in inputs.items()}}).encode()
        ).hexdigest()
        path = self.record_path(stage)
        if path.exists():
            previous = json.loads(path.read_text(encoding="utf-8"))
            if previous.get("key") == key:
                for entry in previous["outputs"].values():
                    out = Path(entry["path"])
                    if not out.exists():
                        break
                    if sha256_file(out) != entry["sha256"]:
                        raise StaleArtifactError(stage, out)
                else:
                    logger.info("%s: up to date, skipped", stage)
                    return "skipped"
        logger.info("%s: running", stage)
        started = time.perf_counter()
        outputs = self.stage_impl[stage]({k: v[0] for k, v in inputs.items()})
        record = {
            "stage": stage,
            "key": key,
            **self.stage_config(stage),
            "inputs": {k: {"path": str(p), "sha256": h} for k, (p, h) in sorted(inputs.items())},
            "outputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in sorted(outputs.items())},
            "wall_time_s": round(time.perf_counter() - started, 3),
        }
        _atomic_write_record(path, record)
        return "ran"

    def _inputs(self, stage: str) -> dict[str, tuple[Path, str]]:
        """``{name: (path, sha256)}`` for every artifact the stage reads."""
        needs = {
            "mine": [],
            "build": [("mine", "links"), ("mine", "snapshots")],
            "vocab": [("build", "train")],
            "pretrain": [("build", "train"), ("vocab", "vocab")],
            "train_head": [("build", "train"), ("vocab", "vocab"), ("pretrain", "encoder")],
            "evaluate": [("build", "pools"), ("vocab", "vocab"), ("pretrain", "encoder"), ("train_head", "head")],
            "analyze": [("build", "train"), ("build", "pools"), ("evaluate", "rankings")],
        }[stage]
        inputs = {}
        if stage == "mine":
            root = self._exports_dir()
            if not root.is_dir():
                raise MissingArtifactError(stage, root)
            for f in sorted(root.rglob("*.jsonl")):
                inputs[f"exports/{f.relative_to(root).as_posix()}"] = (f, sha256_file(f))
            if not inputs:
                raise MissingArtifactError(stage, root / "<project>/issues.jsonl")
        for upstream_stage, name in needs:
            record = self.load_record(upstream_stage, stage)
            entry = record["outputs"][name]
            inputs[f"{upstream_stage}.{name}"] = (Path(entry["path"]), entry["sha256"])
        return inputs

    def _exports_dir(self) -> Path:
        root = Path(self.m.stages["mine"]["exports"])
        return root if root.is_absolute() else self.m.base_dir / root

    def _emit(self, stage: str, ext: str, writer) -> Path:
        path, _ = _atomic_write(self.m.stage_dir(stage), ext, writer)
        return path

    # stages ------------------------------------------------------------
    def _mine(self, _inputs) -> dict[str, Path]:
        cfg = self.m.stages["mine"]
        kind = cfg.get("kind", "jira")
        root = self._exports_dir()
        per_project_links: dict[str, list[corpus.FixLink]] = {}
        snapshots: dict[str, list] = {}
        for project_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            bugs = corpus.parse_issue_export((project_dir / "issues.jsonl").read_text(encoding="utf-8"), kind)
            commits = corpus.parse_commit_export((project_dir / "commits.jsonl").read_text(encoding="utf-8"))
            snap_file = project_dir / "snapshots.jsonl"
            if snap_file.exists():
                snapshots.update(corpus.parse_snapshot_export(snap_file.read_text(encoding="utf-8")))
            by_project: dict[str, list[corpus.BugRecord]] = {}
            for bug in bugs:
                by_project.setdefault(bug.project_id, []).append(bug)
            for project_id, project_bugs in by_project.items():
                per_project_links[project_id] = corpus.link_project(project_bugs, commits)
        linked = {p: list({l.bug.key: l.bug for l in links}.values()) for p, links in per_project_links.items()}
        kept = corpus.filter_projects(linked)
        links = [l for p in sorted(kept) for l in per_project_links[p]]
        logger.info("mine: %d links over %d projects (%d dropped)", len(links), len(kept), len(linked) - len(kept))
        lines = "".join(_canonical(link_to_json(l)) + "\n" for l in links)
        snap = _canonical({sha: snapshots[sha] for sha in sorted({l.commit.commit_id for l in links}) if sha in snapshots})
        return {
            "links": self._emit("mine", "jsonl", _write_text(lines)),
            "snapshots": self._emit("mine", "json", _write_text(snap + "\n")),
        }

    def _build(self, inputs) -> dict[str, Path]:
        cfg = self.m.stages["build"]
        seed = self.m.stage_seed("build")
        links = [link_from_json(json.loads(l)) for l in inputs["mine.links"].read_text(encoding="utf-8").split("\n") if l]
        snapshots = {k: [tuple(f) for f in v] for k, v in json.loads(inputs["mine.snapshots"].read_text(encoding="utf-8")).items()}
        examples = corpus.build_examples(
            links, snapshots, cfg.get("negatives_per_positive", corpus.DEFAULT_NEGATIVES_PER_POSITIVE), seed
        )
        train, test = corpus.split_dataset(examples, cfg.get("test_fraction", 0.2), self.m.experiment_id, seed)
        if train.bug_keys() & test.bug_keys():
            raise RuntimeError("train/test bug leakage")
        pools = build_pools(links, snapshots, test.bug_keys(), cfg.get("pool_size", 20), seed)
        return {
            "train": self._emit("build", "jsonl", _write_text(train.dumps())),
            "test": self._emit("build", "jsonl", _write_text(test.dumps())),
            "pools": self._emit("build", "jsonl", _write_text("".join(_canonical(p) + "\n" for p in pools))),
        }

    def _vocab(self, inputs) -> dict[str, Path]:
        train = corpus.DatasetManifest.load(inputs["build.train"])
        vocab = train_vocabulary(manifest_texts(train), self.m.stages["vocab"].get("size", 512))
        return {"vocab": self._emit("vocab", "txt", vocab.save)}

    def _pretrain(self, inputs) -> dict[str, Path]:
        train = corpus.DatasetManifest.load(inputs["build.train"])
        vocab = Vocabulary.load(inputs["vocab.vocab"])
        enc_cfg = self.m.encoder_config(len(vocab))
        cfg = self.m.pretrain_config()
        state, log = pretraining.pretrain(cfg, enc_cfg, train, vocab)
        sidecar = _canonical({"pretrain": asdict(cfg), "encoder": asdict(enc_cfg)}) + "\n"
        return {
            "encoder": self._emit("pretrain", "ckpt", lambda p: save_checkpoint(state, p)),
            "log": self._emit("pretrain", "csv", _write_text(log.to_csv())),
            "config": self._emit("pretrain", "json", _write_text(sidecar)),
        }

    def _train_head(self, inputs) -> dict[str, Path]:
        cfg = self.m.stages["train_head"]
        train = corpus.DatasetManifest.load(inputs["build.train"])
        vocab = Vocabulary.load(inputs["vocab.vocab"])
        encoder = load_checkpoint(inputs["pretrain.encoder"])
        head, log = localizer.train_head(
            encoder, self.m.head_config(), train, vocab,
            epochs=cfg.get("epochs", 10), batch_size=cfg.get("batch_size", 32),
            learning_rate=cfg.get("learning_rate", 1e-3), seed=self.m.stage_seed("train_head"),
        )
        return {
            "head": self._emit("train_head", "ckpt", lambda p: localizer.save_head(head, p)),
            "log": self._emit("train_head", "csv", _write_text(log.to_csv())),
        }

    def _evaluate(self, inputs) -> dict[str, Path]:
        vocab = Vocabulary.load(inputs["vocab.vocab"])
        encoder = load_checkpoint(inputs["pretrain.encoder"])
        head = localizer.load_head(inputs["train_head.head"])
        results = []
        for pool in read_jsonl(inputs["build.pools"]):
            bug = corpus.BugRecord.from_json(pool["bug"])
            candidates = [(c["path"], c["content"]) for c in pool["candidates"]]
            results.append(localizer.rank_files(encoder, head, bug, candidates, vocab, set(pool["relevant"])))
        report = evaluation.metric_report(results)
        return {
            "rankings": self._emit("evaluate", "jsonl", _write_text(localizer.dump_results(results))),
            "metrics": self._emit("evaluate", "json", _write_text(report.to_json())),
            "metrics_csv": self._emit("evaluate", "csv", _write_text(report.to_csv())),
        }

    def _analyze(self, inputs) -> dict[str, Path]:
        train = corpus.DatasetManifest.load(inputs["build.train"])
        pools = read_jsonl(inputs["build.pools"])
        results = localizer.load_results(inputs["evaluate.rankings"].read_text(encoding="utf-8"))
        reference = token_frequency(sorted({r.file_content for r in train.records}))
        project_code: dict[str, set[str]] = {}
        bugs = {}
        for pool in pools:
            bug = corpus.BugRecord.from_json(pool["bug"])
            bugs[bug.bug_id] = bug
            project_code.setdefault(bug.project_id, set()).update(c["content"] for c in pool["candidates"])
        divergence = evaluation.divergence_report(
            {p: token_frequency(sorted(texts)) for p, texts in project_code.items()}, reference
        )
        difficulty = evaluation.difficulty_report({self.m.experiment_id: results}, bugs)
        return {
            "divergence": self._emit("analyze", "json", _write_text(divergence.to_json())),
            "difficulty": self._emit("analyze", "json", _write_text(difficulty.to_json())),
        }


def _atomic_write_record(path: Path, record: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").split("\n") if line.strip()]


def manifest_texts(manifest: corpus.DatasetManifest) -> list[str]:
    """Distinct bug texts and file contents, in first-seen order."""
    seen, texts = set(), []
    for r in manifest.records:
        for text in (r.bug.text, r.file_content):
            if text not in seen:
                seen.add(text)
                texts.append(text)
    return texts


def link_to_json(link: corpus.FixLink) -> dict:
    c = link.commit
    return {
        "bug": link.bug.to_json(),
        "commit": {
            "sha": c.commit_id,
            "message": c.message,
            "timestamp": corpus.format_timestamp(c.timestamp),
            "files": [{"path": f.path, "pre": f.pre_content, "post": f.post_content} for f in c.changed_files],
        },
        "matched_span": list(link.matched_span),
        "verified": link.verified,
    }


def link_from_json(obj: dict) -> corpus.FixLink:
    c = obj["commit"]
    commit = corpus.CommitMeta(
        c["sha"], c["message"],
        tuple(corpus.ChangedFile(f["path"], f["pre"], f["post"]) for f in c["files"]),
        corpus.parse_timestamp(c["timestamp"]),
    )
    return corpus.FixLink(corpus.BugRecord.from_json(obj["bug"]), commit, tuple(obj["matched_span"]), obj["verified"])


def build_pools(links, snapshots, test_keys, pool_size: int, seed: int) -> list[dict]:
    """Seeded fixed-size candidate pools (all relevant files plus sampled others) per test bug."""
    by_bug: dict[tuple[str, str], list[corpus.FixLink]] = {}
    for link in links:
        if link.bug.key in test_keys:
            by_bug.setdefault(link.bug.key, []).append(link)
    rng = np.random.default_rng([seed, 1])
    pools = []
    for key in sorted(by_bug, key=lambda k: (by_bug[k][0].bug.created_at, k)):
        bug_links = by_bug[key]
        relevant = {}
        for link in bug_links:
            for f in link.commit.changed_files:
                if f.pre_content:
                    relevant.setdefault(f.path, f.pre_content)
        if not relevant:
            continue
        universe = {p: c for p, c in snapshots.get(bug_links[0].commit.commit_id, ())
                    if p.endswith(corpus.SOURCE_EXTENSION) and c and p not in relevant}
        others = sorted(universe)
        k = max(0, min(len(others), pool_size - len(relevant)))
        picked = sorted(others[i] for i in rng.choice(len(others), size=k, replace=False)) if k else []
        candidates = [{"path": p, "content": relevant[p]} for p in sorted(relevant)]
        candidates += [{"path": p, "content": universe[p]} for p in picked]
        candidates.sort(key=lambda c: c["path"])
        pools.append({"bug": bug_links[0].bug.to_json(), "candidates": candidates, "relevant": sorted(relevant)})
    return pools


def run(manifest: ExperimentManifest, stage: str | None = None) -> dict[str, str]:
    return Runner(manifest).run(stage)


def compare(manifests, metric: str = "mrr", unit: str = "project", alpha: float = 0.05):
    """Pairwise Mann-Whitney tests across completed experiments sharing one test split."""
    if metric not in ("mrr", "map"):
        raise PipelineError(f"unknown metric {metric!r}")
    if unit not in ("project", "bug"):
        raise PipelineError(f"unknown sampling unit {unit!r}")
    if len(manifests) < 2:
        raise PipelineError("compare needs at least two experiments")
    samples, splits = {}, set()
    for m in manifests:
        runner = Runner(m)
        build = runner.load_record("build", "compare")
        splits.add(build["outputs"]["pools"]["sha256"])
        if unit == "project":
            report = json.loads(runner.upstream("evaluate", "compare", "metrics").read_text(encoding="utf-8"))
            values = [report["per_project"][p][metric] for p in sorted(report["per_project"])]
        else:
            results = localizer.load_results(runner.upstream("evaluate", "compare", "rankings").read_text(encoding="utf-8"))
            score = evaluation.reciprocal_rank if metric == "mrr" else evaluation.average_precision
            values = [score(r) for r in sorted(results, key=lambda r: (r.project_id, r.bug_id))]
        label = m.experiment_id
        while label in samples:
            label += "'"
        samples[label] = values
    if len(splits) != 1:
        raise PipelineError("experiments were evaluated on different test splits")
    return evaluation.pairwise_significance(samples, alpha)
