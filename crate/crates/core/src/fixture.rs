//! Reproducible workspaces for demos, tests and benchmarks.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::director::{insert_checkpoints, CheckpointPolicy};
use crate::git::{self, GitError, DEFAULT_TIMEOUT};
use crate::model::{ApiRegistry, ArgValue, Args, OperationPlan, PlanStep};

/// The multi-step request used throughout the examples, typo included.
pub const HAPPYDOG_REQUEST: &str = "now, undo the most resent commit for my HappyDog project, remove all the CSV files larger than 10 MB from the git cache, move those files to a new directory called data at the project root, ignore this folder in git, add a suffix _large to all their names, augment the previous commit without a new message, and force push to my remote repo";

pub const HAPPYDOG_CSV_BYTES: u64 = 12_000_000;

pub const GITHUB_BRANCHES: [&str; 3] = ["main", "dev", "feat/chihuahua"];
pub const BITBUCKET_BRANCHES: [&str; 1] = ["master"];

fn g(dir: &Path, root: &Path, args: &[&str]) -> Result<String, GitError> {
    git::run(dir, root, args, DEFAULT_TIMEOUT)
}

/// Writes a CSV of exactly `bytes` bytes with deterministic rows.
pub fn write_dog_csv(path: &Path, bytes: u64) -> io::Result<()> {
    const BREEDS: [&str; 6] = ["beagle", "chihuahua", "husky", "poodle", "corgi", "whippet"];
    let mut out = BufWriter::new(fs::File::create(path)?);
    let header = "id,name,breed,weight_kg\n";
    let mut written = 0u64;
    let emit = |out: &mut BufWriter<fs::File>, s: &str, written: &mut u64| -> io::Result<()> {
        let take = (bytes - *written).min(s.len() as u64) as usize;
        out.write_all(&s.as_bytes()[..take])?;
        *written += take as u64;
        Ok(())
    };
    emit(&mut out, header, &mut written)?;
    let mut i = 0u64;
    while written < bytes {
        let row = format!("{i},dog{i},{},{}.{}\n", BREEDS[(i % 6) as usize], 3 + i % 40, i % 10);
        emit(&mut out, &row, &mut written)?;
        i += 1;
    }
    out.flush()
}

/// Builds the HappyDog workspace under `root`:
///
/// - `HappyDog/`: a repository with a base commit and a second commit that
///   adds `dogs.csv` of `csv_bytes` bytes;
/// - `remotes/github.git` (main, dev, feat/chihuahua) and
///   `remotes/bitbucket.git` (master), bare repositories holding the base
///   commit, wired up as remotes `github` and `bitbucket`.
pub fn build_happydog(root: &Path, csv_bytes: u64) -> Result<(), GitError> {
    let project = root.join("HappyDog");
    fs::create_dir_all(project.join("src"))?;
    g(&project, root, &["init", "-q"])?;
    fs::write(project.join("README.md"), "# HappyDog\n\nA small app that tracks dogs.\n")?;
    fs::write(
        project.join("src/app.py"),
        "import csv\n\n\ndef load(path):\n    with open(path) as f:\n        return list(csv.DictReader(f))\n",
    )?;
    g(&project, root, &["add", "-A"])?;
    g(&project, root, &["commit", "-q", "-m", "Initial commit"])?;
    let base = g(&project, root, &["rev-parse", "HEAD"])?.trim().to_string();
    write_dog_csv(&project.join("dogs.csv"), csv_bytes)?;
    g(&project, root, &["add", "dogs.csv"])?;
    g(&project, root, &["commit", "-q", "-m", "Add dog dataset"])?;

    let remotes = root.join("remotes");
    for (name, branches) in [("github", &GITHUB_BRANCHES[..]), ("bitbucket", &BITBUCKET_BRANCHES[..])] {
        let bare = remotes.join(format!("{name}.git"));
        fs::create_dir_all(&bare)?;
        g(&bare, root, &["init", "-q", "--bare"])?;
        g(&project, root, &["remote", "add", name, &format!("../remotes/{name}.git")])?;
        for branch in branches {
            g(&project, root, &["push", "-q", name, &format!("{base}:refs/heads/{branch}")])?;
        }
        g(&bare, root, &["symbolic-ref", "HEAD", &format!("refs/heads/{}", branches[0])])?;
    }
    Ok(())
}

/// A small repository plus loose files, used for randomized plans.
pub fn build_small(root: &Path) -> Result<(), GitError> {
    let project = root.join("proj");
    fs::create_dir_all(project.join("docs"))?;
    g(&project, root, &["init", "-q"])?;
    fs::write(project.join("a.txt"), "alpha\n")?;
    fs::write(project.join("b.csv"), "x,y\n1,2\n")?;
    fs::write(project.join("docs/notes.md"), "# notes\n")?;
    g(&project, root, &["add", "-A"])?;
    g(&project, root, &["commit", "-q", "-m", "one"])?;
    fs::write(project.join("c.log"), "log line\n".repeat(50))?;
    g(&project, root, &["add", "c.log"])?;
    g(&project, root, &["commit", "-q", "-m", "two"])?;
    fs::create_dir_all(root.join("loose"))?;
    fs::write(root.join("loose/keep.txt"), "keep\n")?;
    Ok(())
}

/// Creates `n` small files under `root/dir`.
pub fn create_burst(root: &Path, dir: &str, n: usize) -> io::Result<Vec<String>> {
    fs::create_dir_all(root.join(dir))?;
    (0..n)
        .map(|i| {
            let rel = format!("{dir}/record_{i:02}.txt");
            fs::write(root.join(&rel), format!("record {i}\n"))?;
            Ok(rel)
        })
        .collect()
}

const SMALL_PATHS: [&str; 9] =
    ["a.txt", "b.csv", "c.log", "docs", "docs/notes.md", "new.txt", "out", "out/x.md", "missing.bin"];
const SMALL_EXISTING: [&str; 5] = ["a.txt", "b.csv", "c.log", "docs/notes.md", "docs"];

/// A validated plan of one to six mutating operations (a commit brings its
/// own staging step) over the [`build_small`]
/// layout. Steps may fail at run time (a missing source, an empty commit);
/// that is part of what they exercise.
pub fn random_mutation_plan(seed: u64, registry: &ApiRegistry) -> OperationPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let path = |rng: &mut ChaCha8Rng| ArgValue::Path((*SMALL_PATHS.choose(rng).expect("non-empty")).to_string());
    // mostly paths the layout starts with, so most plans get several steps in
    let source = |rng: &mut ChaCha8Rng| {
        let pool: &[&str] = if rng.gen_bool(0.8) { &SMALL_EXISTING } else { &SMALL_PATHS };
        (*pool.choose(rng).expect("non-empty")).to_string()
    };
    let pattern = |rng: &mut ChaCha8Rng| {
        ArgValue::Path((*["*.csv", "*.txt", "*.log", "*"].choose(rng).expect("non-empty")).to_string())
    };
    let n = rng.gen_range(1..=6);
    let mut plan = OperationPlan::new(format!("random-{seed}"), format!("random plan {seed}"), registry.version());
    for _ in 0..n {
        let mut args = Args::new();
        let api = match rng.gen_range(0..15) {
            0 => {
                args.insert("path".into(), path(&mut rng));
                "fs.mkdir"
            }
            1 => {
                args.insert("path".into(), path(&mut rng));
                args.insert("content".into(), ArgValue::String(format!("v{}\n", rng.gen::<u16>())));
                "fs.write"
            }
            2 => {
                args.insert("src".into(), ArgValue::Path(source(&mut rng)));
                args.insert("dst".into(), path(&mut rng));
                "fs.copy"
            }
            3 => {
                args.insert("src".into(), ArgValue::Path(source(&mut rng)));
                args.insert("dst".into(), path(&mut rng));
                "fs.move"
            }
            4 => {
                let k = rng.gen_range(1..=2);
                let paths = (0..k).map(|_| source(&mut rng)).collect();
                args.insert("paths".into(), ArgValue::Paths(paths));
                "fs.remove"
            }
            5 => {
                args.insert("pattern".into(), pattern(&mut rng));
                args.insert("suffix".into(), ArgValue::String("_old".into()));
                if rng.gen_bool(0.5) {
                    args.insert("min_size".into(), ArgValue::SizeBytes(rng.gen_range(0..400)));
                }
                "fs.rename_suffix"
            }
            6 => "git.undo_last_commit",
            7 => {
                args.insert("pattern".into(), pattern(&mut rng));
                "git.rm_cached"
            }
            8 => {
                args.insert("path".into(), path(&mut rng));
                "git.ignore"
            }
            9 => {
                args.insert("path".into(), ArgValue::Path(".".into()));
                "git.add"
            }
            10 => {
                // stage everything first so the commit usually has content
                args.insert("message".into(), ArgValue::String(format!("change {}", plan.steps.len() + 1)));
                plan.steps.push(PlanStep {
                    index: plan.steps.len() + 1,
                    api: "git.add".into(),
                    args: [
                        ("path".to_string(), ArgValue::Path(".".into())),
                        ("cwd".to_string(), ArgValue::Path("proj".into())),
                    ]
                    .into(),
                    depends_on: plan.steps.last().map(|s| vec![s.index]).unwrap_or_default(),
                    checkpoint: false,
                });
                "git.commit"
            }
            11 => {
                args.insert("no_edit".into(), ArgValue::Flag(true));
                "git.commit_amend"
            }
            12 => {
                args.insert("path".into(), ArgValue::Path(format!("proj/{}", source(&mut rng))));
                args.insert("label".into(), ArgValue::String("important".into()));
                "backup.add"
            }
            13 => {
                args.insert("path".into(), ArgValue::Path(format!("proj/{}", source(&mut rng))));
                let f = *["daily", "weekly", "monthly"].choose(&mut rng).expect("non-empty");
                args.insert("frequency".into(), ArgValue::Enum(f.into()));
                "backup.schedule"
            }
            _ => {
                args.insert("path".into(), ArgValue::Path(format!("proj/{}", source(&mut rng))));
                let d = *["ssd", "hdd"].choose(&mut rng).expect("non-empty");
                args.insert("device".into(), ArgValue::Enum(d.into()));
                "storage.pin_local"
            }
        };
        if registry.get(api).is_ok_and(|spec| spec.param("cwd").is_some()) {
            args.insert("cwd".into(), ArgValue::Path("proj".into()));
        }
        let index = plan.steps.len() + 1;
        plan.steps.push(PlanStep {
            index,
            api: api.into(),
            args,
            depends_on: if index > 1 { vec![index - 1] } else { vec![] },
            checkpoint: false,
        });
    }
    insert_checkpoints(plan, registry, &CheckpointPolicy::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_has_exact_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        write_dog_csv(&p, 1234).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 1234);
    }

    #[test]
    fn happydog_layout() {
        let dir = tempfile::tempdir().unwrap();
        build_happydog(dir.path(), 20_000).unwrap();
        let project = dir.path().join("HappyDog");
        let log = g(&project, dir.path(), &["log", "--format=%s"]).unwrap();
        assert_eq!(log.lines().collect::<Vec<_>>(), ["Add dog dataset", "Initial commit"]);
        let heads = g(&project, dir.path(), &["ls-remote", "--heads", "github"]).unwrap();
        for b in GITHUB_BRANCHES {
            assert!(heads.contains(&format!("refs/heads/{b}")));
        }
    }

    #[test]
    fn random_plans_validate() {
        let reg = ApiRegistry::builtin();
        for seed in 0..300 {
            let p = random_mutation_plan(seed, &reg);
            let report = crate::model::validate_plan(&p, &reg);
            assert!(report.ok, "{seed}: {report:?}");
            assert!(p.steps.last().unwrap().checkpoint);
        }
    }
}
