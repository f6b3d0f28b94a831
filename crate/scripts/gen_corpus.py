#!/usr/bin/env python3
"""Writes the gold request/plan corpora used by the evaluation tests.

Gold plans come from the templates below, written against the registry's
parameter types, never from running the parser.

    python3 scripts/gen_corpus.py crates/core/data/corpus
"""

import json
import random
import sys
from pathlib import Path

BASE_REGISTRY_VERSION = 20
EXT_REGISTRY_VERSION = 23

FILES = ["notes.txt", "report.md", "todo.txt", "config.json", "main.py", "app.log", "draft.md", "data.csv"]
DIRS = ["docs", "archive", "build", "photos", "backup", "assets", "tmp", "logs"]
EXTS = ["csv", "txt", "log", "json", "png", "pdf", "md", "zip"]
PROJECTS = ["HappyDog", "garden", "blog", "thesis", "catalog"]
REMOTES = ["origin", "github", "upstream"]
BRANCHES = ["main", "dev", "release", "feat/search"]
WORDS = ["hello", "draft one", "remember the milk", "version 2", "ship it"]
MESSAGES = ["fix typo", "update docs", "initial import", "bump version", "tidy up"]
LABELS = ["important", "family", "work", "media"]


def p(v):
    return {"path": v}


def s(v):
    return {"string": v}


def step(api, **args):
    return {"api": api, "args": args}


def with_cwd(st, cwd):
    if cwd is not None and "cwd" in CWD_APIS.get(st["api"], ()):
        st["args"]["cwd"] = p(cwd)
    return st


# APIs whose grammar rules thread the project into `cwd`
CWD_APIS = {
    api: ("cwd",)
    for api in [
        "fs.find", "fs.mkdir", "fs.write", "fs.copy", "fs.move", "fs.remove", "fs.rename_suffix",
        "git.status", "git.log", "git.undo_last_commit", "git.rm_cached", "git.ignore", "git.add",
        "git.commit", "git.commit_amend", "git.push", "fs.touch", "fs.append", "fs.truncate",
    ]
}


def clause(r, kind):
    """One clause and its gold step (before any project cwd is applied)."""
    f, d, e = r.choice(FILES), r.choice(DIRS), r.choice(EXTS)
    if kind == "list_dir":
        return f"list files in {d}", step("fs.list", path=p(d))
    if kind == "list_all":
        return "show all the files", step("fs.list", path=p("."))
    if kind == "find":
        n = r.choice([1, 5, 20])
        return f"find {e} files larger than {n} MB", step("fs.find", pattern=p(f"*.{e}"), min_size={"size-bytes": n * 1_000_000})
    if kind == "find_plain":
        return f"find all {e} files", step("fs.find", pattern=p(f"*.{e}"))
    if kind == "mkdir":
        return f"create a new folder called {d}", step("fs.mkdir", path=p(d))
    if kind == "write":
        w = r.choice(WORDS)
        return f'write "{w}" to {f}', step("fs.write", path=p(f), content=s(w))
    if kind == "copy":
        return f"copy {f} to {d}/", step("fs.copy", src=p(f), dst=p(f"{d}/"))
    if kind == "move":
        return f"move {f} to {d}/", step("fs.move", src=p(f), dst=p(f"{d}/"))
    if kind == "remove":
        a, b = r.sample(FILES, 2)
        return f"delete files {a} {b}", step("fs.remove", paths={"paths": [a, b]})
    if kind == "suffix":
        sfx = r.choice(["_old", "_v2", "_bak"])
        return f"add suffix {sfx} to *.{e}", step("fs.rename_suffix", pattern=p(f"*.{e}"), suffix=s(sfx))
    if kind == "status":
        return "show git status", step("git.status")
    if kind == "log":
        n = r.choice([3, 5, 10])
        return f"show the last {n} commits", step("git.log", count={"integer": n})
    if kind == "undo":
        return "undo the last commit", step("git.undo_last_commit")
    if kind == "rm_cached":
        return f"remove {f} from the git cache", step("git.rm_cached", pattern=p(f))
    if kind == "rm_cached_glob":
        return f"untrack *.{e} from the git index", step("git.rm_cached", pattern=p(f"*.{e}"))
    if kind == "rm_cached_sel":
        n = r.choice([5, 10, 50])
        return (
            f"remove all the {e.upper()} files larger than {n} MB from the git cache",
            step("git.rm_cached", pattern=p(f"*.{e}"), min_size={"size-bytes": n * 1_000_000}),
        )
    if kind == "ignore":
        return f"ignore {d} in git", step("git.ignore", path=p(d))
    if kind == "stage":
        return f"stage {f}", step("git.add", path=p(f))
    if kind == "commit":
        m = r.choice(MESSAGES)
        return f'commit with message "{m}"', step("git.commit", message=s(m))
    if kind == "amend":
        return "amend the last commit without a new message", step("git.commit_amend", no_edit={"flag": True})
    if kind == "push":
        rem, br = r.choice(REMOTES), r.choice(BRANCHES)
        return f"push to {rem} {br}", step("git.push", remote=s(rem), branch=s(br))
    if kind == "force_push":
        rem, br = r.choice(REMOTES), r.choice(BRANCHES)
        return f"force push to {rem} {br}", step("git.push", remote=s(rem), branch=s(br), force={"flag": True})
    if kind == "backup_add":
        lab = r.choice(LABELS)
        return f"add {d} to the backup list labeled {lab}", step("backup.add", path=p(d), label=s(lab))
    if kind == "backup_schedule":
        fr = r.choice(["daily", "weekly", "monthly"])
        if r.random() < 0.5:
            return f"back up {d} {fr}", step("backup.schedule", path=p(d), frequency={"enum": fr})
        return f"schedule {fr} backups for {d}", step("backup.schedule", path=p(d), frequency={"enum": fr})
    if kind == "pin":
        dev = r.choice(["ssd", "hdd"])
        return f"keep {d} on local {dev}", step("storage.pin_local", path=p(d), device={"enum": dev})
    raise ValueError(kind)


KINDS = [
    "list_dir", "list_all", "find", "find_plain", "mkdir", "write", "copy", "move", "remove", "suffix",
    "status", "log", "undo", "rm_cached", "rm_cached_glob", "rm_cached_sel", "ignore", "stage", "commit",
    "amend", "push", "force_push", "backup_add", "backup_schedule", "pin",
]


def listing_variant(r, project, n_mb):
    """The multi-step cleanup workflow with an explicit push target."""
    rem, br = r.choice(REMOTES), r.choice(BRANCHES)
    size = n_mb * 1_000_000
    text = (
        f"undo the most recent commit for my {project} project, remove all the CSV files larger than {n_mb} MB "
        "from the git cache, move those files to a new directory called data at the project root, "
        "ignore this folder in git, add a suffix _large to all their names, "
        f"augment the previous commit without a new message, and force push to {rem} {br}"
    )
    cwd = {"cwd": p(project)}
    plan = [
        step("git.undo_last_commit", **cwd),
        step("git.rm_cached", pattern=p("*.csv"), min_size={"size-bytes": size}, **cwd),
        step("fs.move", src=p("*.csv"), min_size={"size-bytes": size}, dst=p("data/"), **cwd),
        step("git.ignore", path=p("data/"), **cwd),
        step("fs.rename_suffix", pattern=p("data/*.csv"), min_size={"size-bytes": size}, suffix=s("_large"), **cwd),
        step("git.commit_amend", no_edit={"flag": True}, **cwd),
        step("git.push", remote=s(rem), branch=s(br), force={"flag": True}, **cwd),
    ]
    return text, plan


def base_corpus(r):
    out = []
    for i in range(100):
        if i % 20 == 0:
            text, plan = listing_variant(r, r.choice(PROJECTS), r.choice([5, 10, 25]))
        else:
            n = r.choice([1, 1, 2, 2, 3])
            kinds = [KINDS[(i * 7 + k * 3) % len(KINDS)] if k == 0 else r.choice(KINDS) for k in range(n)]
            project = r.choice(PROJECTS) if r.random() < 0.3 else None
            parts, plan = [], []
            for k in kinds:
                t, st = clause(r, k)
                parts.append(t)
                plan.append(with_cwd(st, project))
            text = ", ".join(parts[:-1]) + (" and " if len(parts) > 1 else "") + parts[-1]
            if project is not None:
                text = f"in the {project} repo, {text}"
        out.append({"id": f"base-{i:03}", "request": text, "context": [], "registry_version": BASE_REGISTRY_VERSION, "plan": plan})
    return out


def ext_corpus(r):
    out = []
    for i in range(15):
        f = r.choice(FILES)
        w = r.choice(WORDS)
        kb = r.choice([1, 4, 64])
        parts = [f"touch {f}", f'append "{w}" to {f}', f"truncate {f} to {kb} KB"]
        plan = [
            step("fs.touch", path=p(f)),
            step("fs.append", path=p(f), text=s(w)),
            step("fs.truncate", path=p(f), size={"size-bytes": kb * 1000}),
        ]
        if i % 3 == 1:
            parts, plan = parts[:2], plan[:2]
        out.append({
            "id": f"ext-{i:03}",
            "request": ", ".join(parts[:-1]) + " and " + parts[-1],
            "context": [],
            "registry_version": EXT_REGISTRY_VERSION,
            "plan": plan,
        })
    return out


def write(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def main():
    out = Path(sys.argv[1] if len(sys.argv) > 1 else "crates/core/data/corpus")
    out.mkdir(parents=True, exist_ok=True)
    write(out / "base.ndjson", base_corpus(random.Random(20)))
    write(out / "ext.ndjson", ext_corpus(random.Random(23)))


if __name__ == "__main__":
    main()
