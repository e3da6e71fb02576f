from pathlib import Path

import pytest

from bugloc import corpus
from bugloc.pipeline import manifest_texts
from bugloc.synthetic import FixtureConfig, generate_fixture
from bugloc.tokenization import train_vocabulary


def synthetic_dataset(root: Path, n_projects: int = 2, bugs_per_project: int = 12, seed: int = 0):
    """Train split and vocabulary built from a freshly generated synthetic export."""
    generate_fixture(root, FixtureConfig(n_projects=n_projects, bugs_per_project=bugs_per_project, seed=seed))
    links, snapshots = [], {}
    for project in sorted(p for p in root.iterdir() if p.is_dir()):
        bugs = corpus.parse_issue_export((project / "issues.jsonl").read_text(encoding="utf-8"))
        commits = corpus.parse_commit_export((project / "commits.jsonl").read_text(encoding="utf-8"))
        snapshots.update(corpus.parse_snapshot_export((project / "snapshots.jsonl").read_text(encoding="utf-8")))
        links.extend(corpus.link_project(bugs, commits))
    examples = corpus.build_examples(links, snapshots, negatives_per_positive=2, seed=seed)
    train, _ = corpus.split_dataset(examples, 0.2, name="fixture", seed=seed)
    return train, train_vocabulary(manifest_texts(train), 128)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    return synthetic_dataset(tmp_path_factory.mktemp("fixture"))


# acceptance outcomes, printed as one line per criterion after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
