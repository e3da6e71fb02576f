"""Bug-report ingestion, fix-commit linking, filtering and dataset assembly.

Issue and commit exports are JSON-lines documents. Bug reports are linked to
commits whose message mentions the tracker key as a whole token, links that
touch too many files are discarded, and the surviving pairs are expanded into
binary (bug, file) localization examples.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_CHANGED_FILES = 10
MIN_PROJECT_BUGS = 10
SOURCE_EXTENSION = ".java"
DEFAULT_NEGATIVES_PER_POSITIVE = 5

FIXED = "fixed"
OTHER = "other"


class ExportParseError(ValueError):
    """Raised when an export line cannot be turned into a record."""

    def __init__(self, index: int, reason: str):
        super().__init__(f"record {index}: {reason}")
        self.index = index


class SplitError(ValueError):
    pass


def parse_timestamp(value: str | int | float) -> datetime:
    """Parse an ISO-8601 string or epoch seconds into an aware UTC datetime."""
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(value, tz=timezone.utc)
    text = value.strip()
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    stamp = datetime.fromisoformat(text)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=timezone.utc)
    return stamp.astimezone(timezone.utc)


def format_timestamp(stamp: datetime) -> str:
    return stamp.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class BugRecord:
    project_id: str
    bug_id: str
    title: str
    description: str
    created_at: datetime
    status: str = FIXED

    @property
    def key(self) -> tuple[str, str]:
        return (self.project_id, self.bug_id)

    @property
    def text(self) -> str:
        """Title and description joined, as fed to the encoder."""
        return f"{self.title}\n{self.description}" if self.description else self.title

    def to_json(self) -> dict:
        return {
            "project_id": self.project_id,
            "bug_id": self.bug_id,
            "title": self.title,
            "description": self.description,
            "created_at": format_timestamp(self.created_at),
            "status": self.status,
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "BugRecord":
        return cls(
            project_id=obj["project_id"],
            bug_id=obj["bug_id"],
            title=obj["title"],
            description=obj["description"],
            created_at=parse_timestamp(obj["created_at"]),
            status=obj.get("status", FIXED),
        )


@dataclass(frozen=True)
class ChangedFile:
    path: str
    pre_content: str | None
    post_content: str | None


@dataclass(frozen=True)
class CommitMeta:
    commit_id: str
    message: str
    changed_files: tuple[ChangedFile, ...]
    timestamp: datetime

    def __post_init__(self):
        if not self.changed_files:
            raise ValueError(f"commit {self.commit_id} has no changed files")
        for f in self.changed_files:
            if f.pre_content is None and f.post_content is None:
                raise ValueError(f"{self.commit_id}:{f.path} has neither pre nor post content")


@dataclass(frozen=True)
class FixLink:
    bug: BugRecord
    commit: CommitMeta
    matched_span: tuple[int, int]
    # set by a human after checking pull-request attachments; never automated
    verified: bool = False


@dataclass(frozen=True)
class LocalizationExample:
    bug: BugRecord
    file_path: str
    file_content: str
    label: int
    # post-fix version of a changed file; only positives carry it (used for QA targets)
    post_content: str | None = None

    def to_json(self) -> dict:
        obj = {
            "bug": self.bug.to_json(),
            "file_path": self.file_path,
            "file_content": self.file_content,
            "label": self.label,
        }
        if self.post_content is not None:
            obj["post_content"] = self.post_content
        return obj

    @classmethod
    def from_json(cls, obj: Mapping) -> "LocalizationExample":
        return cls(
            bug=BugRecord.from_json(obj["bug"]),
            file_path=obj["file_path"],
            file_content=obj["file_content"],
            label=int(obj["label"]),
            post_content=obj.get("post_content"),
        )


@dataclass
class DatasetManifest:
    name: str
    split: str
    records: list[LocalizationExample]
    seed: int = 0
    projects: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if not self.projects:
            self.projects = sorted({r.bug.project_id for r in self.records})

    def bug_keys(self) -> set[tuple[str, str]]:
        return {r.bug.key for r in self.records}

    def dumps(self) -> str:
        header = {"name": self.name, "split": self.split, "seed": self.seed, "count": len(self.records)}
        lines = [json.dumps(header, sort_keys=True)]
        lines.extend(json.dumps(r.to_json(), sort_keys=True, ensure_ascii=False) for r in self.records)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if not lines:
            raise ValueError("empty manifest")
        header = json.loads(lines[0])
        records = [LocalizationExample.from_json(json.loads(line)) for line in lines[1:]]
        if header["count"] != len(records):
            raise ValueError(f"manifest header announces {header['count']} records, found {len(records)}")
        return cls(name=header["name"], split=header["split"], records=records, seed=header["seed"])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def _json_lines(document: str) -> Iterable[tuple[int, dict]]:
    index = 0
    for line in document.split("\n"):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ExportParseError(index, f"invalid JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise ExportParseError(index, "expected a JSON object")
        yield index, obj
        index += 1


def parse_issue_export(document: str, kind: str = "jira") -> list[BugRecord]:
    """Parse a JSON-lines issue export into bug records.

    ``kind="jira"`` expects ``{project, key, title, description, status, created}``;
    ``kind="github"`` expects ``{repo, number, title, body, state, created_at}`` and
    uses ``"#<number>"`` as the bug id. Jira issues are fixed when their status
    is ``fixed``; GitHub issues when their state is ``closed`` or ``fixed``.
    """
    if kind not in ("jira", "github"):
        raise ValueError(f"unknown export kind {kind!r}")
    records: list[BugRecord] = []
    seen: set[tuple[str, str]] = set()
    for index, obj in _json_lines(document):
        try:
            if kind == "jira":
                project, bug_id = obj["project"], obj["key"]
                title, description = obj["title"], obj.get("description") or ""
                fixed = str(obj["status"]).strip().lower() == FIXED
                created = obj["created"]
            else:
                project, bug_id = obj["repo"], f"#{int(obj['number'])}"
                title, description = obj["title"], obj.get("body") or ""
                fixed = str(obj["state"]).strip().lower() in ("closed", FIXED)
                created = obj["created_at"]
            created_at = parse_timestamp(created)
        except KeyError as exc:
            raise ExportParseError(index, f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ExportParseError(index, str(exc)) from None
        if not bug_id:
            raise ExportParseError(index, "empty bug id")
        if (project, bug_id) in seen:
            raise ExportParseError(index, f"duplicate bug id {bug_id!r} in project {project!r}")
        seen.add((project, bug_id))
        records.append(BugRecord(project, bug_id, title, description, created_at, FIXED if fixed else OTHER))
    return records


def parse_commit_export(document: str) -> list[CommitMeta]:
    """Parse ``{sha, message, timestamp, files: [{path, pre, post}]}`` lines."""
    commits = []
    for index, obj in _json_lines(document):
        try:
            files = tuple(ChangedFile(f["path"], f.get("pre"), f.get("post")) for f in obj["files"])
            commits.append(CommitMeta(obj["sha"], obj["message"], files, parse_timestamp(obj["timestamp"])))
        except KeyError as exc:
            raise ExportParseError(index, f"missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            raise ExportParseError(index, str(exc)) from None
    return commits


def parse_snapshot_export(document: str) -> dict[str, list[tuple[str, str]]]:
    """Parse ``{sha, files: [{path, content}]}`` lines: the repository at each fix's parent."""
    snapshots = {}
    for index, obj in _json_lines(document):
        try:
            snapshots[obj["sha"]] = [(f["path"], f["content"]) for f in obj["files"]]
        except KeyError as exc:
            raise ExportParseError(index, f"missing field {exc.args[0]!r}") from None
    return snapshots


def bug_id_pattern(bug_id: str) -> re.Pattern:
    # identifier characters are letters, digits and hyphen
    return re.compile(r"(?<![^\W_])(?<!-)" + re.escape(bug_id) + r"(?![^\W_])(?!-)")


def link_bug_to_commits(bug: BugRecord, commits: Sequence[CommitMeta]) -> list[FixLink]:
    pattern = bug_id_pattern(bug.bug_id)
    links = []
    for commit in commits:
        match = pattern.search(commit.message)
        if match:
            links.append(FixLink(bug, commit, match.span()))
    return links


def filter_links(links: Iterable[FixLink]) -> list[FixLink]:
    """Drop tangled commits (> 10 files), keep only Java files, drop emptied links."""
    kept = []
    for link in links:
        if len(link.commit.changed_files) > MAX_CHANGED_FILES:
            continue
        java = tuple(f for f in link.commit.changed_files if f.path.endswith(SOURCE_EXTENSION))
        if not java:
            continue
        if len(java) != len(link.commit.changed_files):
            link = replace(link, commit=replace(link.commit, changed_files=java))
        kept.append(link)
    return kept


def filter_projects(projects: Mapping[str, Sequence[BugRecord]]) -> dict[str, list[BugRecord]]:
    """Keep projects with at least ten fixed (and linked) bug reports."""
    kept = {}
    for project_id, bugs in projects.items():
        fixed = {b.bug_id for b in bugs if b.status == FIXED}
        if len(fixed) >= MIN_PROJECT_BUGS:
            kept[project_id] = list(bugs)
    return kept


def build_examples(
    links: Sequence[FixLink],
    candidate_files: Mapping[str, Sequence[tuple[str, str]]],
    negatives_per_positive: int = DEFAULT_NEGATIVES_PER_POSITIVE,
    seed: int = 0,
) -> list[LocalizationExample]:
    """Expand fix links into labelled (bug, file) pairs.

    Every changed file with a pre-fix version becomes a positive. Negatives are
    drawn without replacement from the commit's unchanged candidate files, up to
    ``negatives_per_positive`` per positive.
    """
    if negatives_per_positive < 1:
        raise ValueError("negatives_per_positive must be >= 1")
    rng = np.random.default_rng(seed)
    examples: list[LocalizationExample] = []
    starved = 0
    for link in links:
        positives = [
            LocalizationExample(link.bug, f.path, f.pre_content, 1, f.post_content)
            for f in link.commit.changed_files
            if f.pre_content
        ]
        if not positives:
            continue
        examples.extend(positives)
        changed = {f.path for f in link.commit.changed_files}
        pool = sorted(
            (path, content)
            for path, content in candidate_files.get(link.commit.commit_id, ())
            if path not in changed and content and path.endswith(SOURCE_EXTENSION)
        )
        if not pool:
            starved += 1
            continue
        k = min(len(pool), negatives_per_positive * len(positives))
        for i in rng.choice(len(pool), size=k, replace=False):
            path, content = pool[i]
            examples.append(LocalizationExample(link.bug, path, content, 0))
    if starved:
        logger.warning("%d commit(s) had no unchanged candidate files; emitted positives only", starved)
    return examples


def split_dataset(
    examples: Sequence[LocalizationExample],
    test_fraction: float,
    name: str = "dataset",
    seed: int = 0,
) -> tuple[DatasetManifest, DatasetManifest]:
    """Chronological bug-level split: the newest bugs form the test set."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    if not examples:
        raise SplitError("no examples to split")
    created = {}
    for ex in examples:
        created.setdefault(ex.bug.key, ex.bug.created_at)
    if len(created) < 2:
        raise SplitError("need at least two distinct bugs to split")
    order = sorted(created, key=lambda k: (created[k], k))
    n_test = min(len(order) - 1, max(1, math.floor(test_fraction * len(order) + 0.5)))
    test_keys = set(order[len(order) - n_test:])
    train = [ex for ex in examples if ex.bug.key not in test_keys]
    test = [ex for ex in examples if ex.bug.key in test_keys]
    return (
        DatasetManifest(f"{name}-train", "train", train, seed),
        DatasetManifest(f"{name}-test", "test", test, seed),
    )


def link_project(bugs: Sequence[BugRecord], commits: Sequence[CommitMeta]) -> list[FixLink]:
    """Link every fixed bug of one project and apply the link filters."""
    links = []
    for bug in bugs:
        if bug.status == FIXED:
            links.extend(link_bug_to_commits(bug, commits))
    return filter_links(links)

