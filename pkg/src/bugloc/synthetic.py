"""Synthetic issue/commit/snapshot exports with a planted bug-to-file signal.

Each project owns a set of Java-like classes built from pseudo-word
identifiers. A bug report's description borrows a fixed share of its words
from the identifiers of the file that the fix touches; the rest is drawn
from a natural-language filler pool. Projects mix a shared token
distribution with a project-specific one, so their divergence from the
pooled corpus varies in a controlled way.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr", "pl"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou"]
_JAVA_TYPES = ["int", "long", "String", "boolean", "double", "List", "Map"]
_JAVA_KEYWORDS = {
    "abstract", "assert", "boolean", "break", "byte", "case", "catch", "char", "class", "const", "continue",
    "default", "do", "double", "else", "enum", "extends", "final", "finally", "float", "for", "goto", "if",
    "implements", "import", "instanceof", "int", "interface", "long", "native", "new", "package", "private",
    "protected", "public", "return", "short", "static", "strictfp", "super", "switch", "synchronized", "this",
    "throw", "throws", "transient", "try", "void", "volatile", "while", "at", "by", "java",
}


@dataclass(frozen=True)
class FixtureConfig:
    n_projects: int = 6
    bugs_per_project: int = 12
    files_per_project: int = 24
    identifiers_per_file: int = 12
    statements_per_file: int = 6
    description_words: int = 20
    shared_fraction: float = 0.3
    n_code_words: int = 420
    n_text_words: int = 120
    stack_trace_rate: float = 0.3
    seed: int = 0


def pseudo_words(n: int, rng: np.random.Generator, exclude: set[str] = frozenset()) -> list[str]:
    """``n`` distinct lowercase pronounceable words."""
    words: list[str] = []
    seen = set(exclude)
    while len(words) < n:
        syllables = rng.integers(2, 4)
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _zipf_weights(n: int, rng: np.random.Generator) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** 0.8
    return rng.permutation(w / w.sum())


def _render_class(name: str, package: str, idents: list[str], n_statements: int, rng) -> str:
    lines = [f"package {package};", "", f"/** {name} component. */", f"public class {name} {{"]
    fields = idents[: max(2, len(idents) // 3)]
    for f in fields:
        lines.append(f"    private {_JAVA_TYPES[rng.integers(len(_JAVA_TYPES))]} {f};")
    method = idents[-1]
    lines.append(f"    public void {method}() {{")
    for _ in range(n_statements):
        a, b, c = (idents[i] for i in rng.integers(len(idents), size=3))
        style = rng.integers(3)
        if style == 0:
            lines.append(f"        {a} = {b}.{c}();")
        elif style == 1:
            lines.append(f"        if ({a} != null) {{ {b}({c}); }}")
        else:
            lines.append(f"        {a}.{b}({c}); // {c} update")
    lines.append(f"        return;")
    lines.append("    }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _patch(content: str, rng, words: list[str]) -> str:
    """Post-fix version: rewrite one statement line."""
    lines = content.split("\n")
    body = [i for i, line in enumerate(lines) if line.startswith("        ") and "return" not in line]
    i = body[rng.integers(len(body))]
    lines[i] = f"        {words[0]}.{words[1]}({words[2]});"
    return "\n".join(lines)


def _stack_trace(package: str, cls: str, method: str, rng) -> str:
    frames = [f"java.lang.IllegalStateException: {method} failed"]
    for _ in range(int(rng.integers(2, 4))):
        frames.append(f"\tat {package}.{cls}.{method}({cls}.java:{int(rng.integers(10, 400))})")
    if rng.random() < 0.5:
        frames.append("Caused by: java.lang.NullPointerException")
    return "\n".join(frames)


def generate_fixture(root, config: FixtureConfig = FixtureConfig()) -> list[str]:
    """Write ``<root>/<project>/{issues,commits,snapshots}.jsonl``; return project ids."""
    rng = np.random.default_rng(config.seed)
    root = Path(root)
    code_words = pseudo_words(config.n_code_words, rng, _JAVA_KEYWORDS)
    text_words = pseudo_words(config.n_text_words, rng, _JAVA_KEYWORDS | set(code_words))
    shared_weights = _zipf_weights(len(code_words), rng)
    epoch = datetime(2020, 1, 1, tzinfo=timezone.utc)
    projects = []
    for p in range(config.n_projects):
        project = f"P{p:02d}"
        projects.append(project)
        package = f"org.{project.lower()}"
        # mixing weight of the project-specific distribution grows with the project index
        mix = 0.1 + 0.8 * p / max(1, config.n_projects - 1)
        weights = (1 - mix) * shared_weights + mix * _zipf_weights(len(code_words), rng)
        class_names = [w.capitalize() for w in pseudo_words(config.files_per_project, rng, _JAVA_KEYWORDS)]
        files = {}
        idents = {}
        for name in class_names:
            ids = list(rng.choice(code_words, size=config.identifiers_per_file, replace=False, p=weights))
            idents[name] = ids
            path = f"src/main/java/{package.replace('.', '/')}/{name}.java"
            files[path] = _render_class(name, package, ids, config.statements_per_file, rng)
        paths = sorted(files)

        issues, commits, snapshots = [], [], []
        for b in range(config.bugs_per_project):
            key = f"{project}-{b + 1}"
            created = epoch + timedelta(days=int(p * 3 + b * 7), hours=int(rng.integers(24)))
            n_buggy = 1 if rng.random() < 0.8 else 2
            buggy = sorted(rng.choice(len(paths), size=n_buggy, replace=False))
            buggy_paths = [paths[i] for i in buggy]
            main = buggy_paths[0]
            cls = Path(main).stem
            n_shared = round(config.shared_fraction * config.description_words)
            shared = list(rng.choice(idents[cls], size=n_shared, replace=True))
            filler = list(rng.choice(text_words, size=config.description_words - n_shared, replace=True))
            words = shared + filler
            rng.shuffle(words)
            description = " ".join(words) + "."
            if rng.random() < config.stack_trace_rate:
                description += "\n" + _stack_trace(package, cls, idents[cls][-1], rng)
            title = " ".join(rng.choice(text_words, size=4)) + f" in {cls}"
            status = "Fixed" if rng.random() > 0.05 else "Won't Fix"
            issues.append({"project": project, "key": key, "title": title, "description": description,
                           "status": status, "created": created.strftime("%Y-%m-%dT%H:%M:%SZ")})

            changed = []
            for path in buggy_paths:
                post = _patch(files[path], rng, list(rng.choice(idents[Path(path).stem], size=3)))
                changed.append({"path": path, "pre": files[path], "post": post})
            if rng.random() < 0.3:
                changed.append({"path": "README.md", "pre": "notes\n", "post": f"notes\n{key}\n"})
            sha = f"{p:04x}{b:04x}" + "".join(rng.choice(list("0123456789abcdef"), size=32))
            commits.append({"sha": sha, "message": f"{key} fix {' '.join(rng.choice(text_words, size=3))}",
                            "timestamp": (created + timedelta(days=2)).strftime("%Y-%m-%dT%H:%M:%SZ"),
                            "files": changed})
            snapshots.append({"sha": sha, "files": [{"path": q, "content": files[q]} for q in paths]})
            for entry in changed:
                if entry["path"] in files:
                    files[entry["path"]] = entry["post"]

        # a tangled refactoring commit that mentions a bug but touches too many files
        tangled = paths[: min(len(paths), 12)]
        commits.append({"sha": f"{p:04x}ffff" + "0" * 32, "message": f"{project}-1 reformat sources",
                        "timestamp": (epoch + timedelta(days=999)).strftime("%Y-%m-%dT%H:%M:%SZ"),
                        "files": [{"path": q, "pre": files[q], "post": files[q] + "\n"} for q in tangled]})

        out = root / project
        out.mkdir(parents=True, exist_ok=True)
        for name, rows in (("issues", issues), ("commits", commits), ("snapshots", snapshots)):
            with open(out / f"{name}.jsonl", "w", encoding="utf-8", newline="\n") as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
    return projects
