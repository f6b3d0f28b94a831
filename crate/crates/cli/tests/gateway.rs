use std::path::Path;

use peros_cli::session::FeedBody;
use peros_cli::{Config, Decision, Gateway, GatewayError, NewSession};
use peros_core::fixture::{build_happydog, create_burst, HAPPYDOG_CSV_BYTES, HAPPYDOG_REQUEST};

fn gateway(dir: &Path) -> Gateway {
    let cfg =
        Config { state_dir: dir.join("state"), sandbox_parent: dir.join("sandbox"), poll_ms: 20, ..Config::default() };
    std::fs::create_dir_all(&cfg.sandbox_parent).unwrap();
    Gateway::local(cfg).unwrap()
}

fn session(gw: &Gateway, ws: &str) -> String {
    gw.create_session(&NewSession { workspace: ws.into(), ..Default::default() }).unwrap().id
}

fn happydog(dir: &Path) -> (Gateway, String) {
    let gw = gateway(dir);
    build_happydog(&dir.join("sandbox/ws"), HAPPYDOG_CSV_BYTES).unwrap();
    let id = session(&gw, "ws");
    (gw, id)
}

fn branch_head(bare: &Path, branch: &str) -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "--verify", "-q", &format!("refs/heads/{branch}")])
        .current_dir(bare)
        .output()
        .unwrap();
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[test]
fn happydog_dialogue_runs_to_a_push() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, id) = happydog(dir.path());
    let remote = dir.path().join("sandbox/ws/remotes/github.git");
    let dev_before = branch_head(&remote, "dev");

    let first = gw.post_message(&id, HAPPYDOG_REQUEST).unwrap();
    let pending = first.pending.clone().expect("checkpoint");
    assert_eq!(pending.index, 6);
    assert!(first.text.contains("Is the result correct? Otherwise, I can revert the changes."), "{}", first.text);
    let diff = first.diff.expect("diff");
    assert!(diff.contains("data/dogs_large.csv"), "{diff}");
    assert!(dir.path().join("sandbox/ws/HappyDog/data/dogs_large.csv").exists());

    let second = gw.post_message(&id, "y").unwrap();
    assert_eq!(second.text, "To which branch do you want to push the changes?");
    let clar = second.clarification.expect("clarification");
    let branches: usize = clar.candidates.iter().map(|g| g.values.len()).sum();
    assert_eq!(branches, 4);

    let help = gw.post_message(&id, "i forgot the remote branches").unwrap();
    assert!(help.text.contains("main, dev, and feat/chihuahua"), "{}", help.text);
    assert!(help.text.contains("master"), "{}", help.text);

    let done = gw.post_message(&id, "dev github").unwrap();
    assert_eq!(done.text, "I've pushed the changes to github/dev (../remotes/github.git).");
    assert_ne!(branch_head(&remote, "dev"), dev_before);
    assert!(gw.session(&id).unwrap().pending.is_none());

    let feed = gw.events(&id, 0).unwrap();
    let messages = feed.iter().filter(|i| matches!(i.body, FeedBody::Message(_))).count();
    assert_eq!(messages, 8);
    assert!(feed.windows(2).all(|w| w[1].seq == w[0].seq + 1));
}

#[test]
fn rejecting_the_checkpoint_reverts() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, id) = happydog(dir.path());
    let project = dir.path().join("sandbox/ws/HappyDog");
    let first = gw.post_message(&id, HAPPYDOG_REQUEST).unwrap();
    let p = first.pending.unwrap();
    let reply = gw.decide_checkpoint(&id, &p.plan, p.index, Decision::Reject).unwrap();
    assert!(reply.text.contains("reverted"), "{}", reply.text);
    assert!(project.join("dogs.csv").exists());
    assert!(!project.join("data").exists());

    let again = gw.decide_checkpoint(&id, &p.plan, p.index, Decision::Approve);
    assert!(matches!(again, Err(GatewayError::NoPendingCheckpoint { .. })), "{again:?}");
}

#[test]
fn deciding_twice_is_a_conflict() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, id) = happydog(dir.path());
    let p = gw.post_message(&id, HAPPYDOG_REQUEST).unwrap().pending.unwrap();
    gw.decide_checkpoint(&id, &p.plan, p.index, Decision::Approve).unwrap();
    let again = gw.decide_checkpoint(&id, &p.plan, p.index, Decision::Approve);
    assert!(matches!(again, Err(GatewayError::NoPendingCheckpoint { .. })), "{again:?}");
    let wrong = gw.decide_checkpoint(&id, "other-plan", 1, Decision::Approve);
    assert!(matches!(wrong, Err(GatewayError::NoPendingCheckpoint { .. })));
}

#[test]
fn unknown_session_and_bad_workspaces() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path());
    assert!(matches!(gw.post_message("nope", "hi"), Err(GatewayError::SessionNotFound(_))));
    assert!(matches!(gw.events("../x", 0), Err(GatewayError::SessionNotFound(_))));
    for bad in ["../escape", "/etc", "", "a/../../b"] {
        let r = gw.create_session(&NewSession { workspace: bad.into(), ..Default::default() });
        assert!(matches!(r, Err(GatewayError::WorkspaceUnavailable(_))), "{bad}: {r:?}");
    }
    assert!(!dir.path().join("escape").exists());
}

#[test]
fn burst_yields_events_then_one_recommendation() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path());
    let id = session(&gw, "ws");
    create_burst(&dir.path().join("sandbox/ws"), "inbox", 12).unwrap();
    let feed = gw.events(&id, 0).unwrap();
    let events = feed.iter().filter(|i| matches!(i.body, FeedBody::Event { .. })).count();
    assert_eq!(events, 12);
    let recs: Vec<_> = feed.iter().filter(|i| matches!(i.body, FeedBody::Recommendation { .. })).collect();
    assert_eq!(recs.len(), 1);
    assert!(
        recs[0].seq > feed.iter().filter(|i| matches!(i.body, FeedBody::Event { .. })).map(|i| i.seq).max().unwrap()
    );

    // more files in the same directory do not repeat the suggestion
    std::fs::write(dir.path().join("sandbox/ws/inbox/extra.txt"), "x").unwrap();
    let more = gw.events(&id, feed.last().unwrap().seq).unwrap();
    assert!(more.iter().all(|i| !matches!(i.body, FeedBody::Recommendation { .. })));
    assert!(!more.is_empty());
}

#[test]
fn accepting_a_recommendation_runs_it() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path());
    let id = session(&gw, "ws");
    create_burst(&dir.path().join("sandbox/ws"), "inbox", 12).unwrap();
    gw.events(&id, 0).unwrap();
    let s = gw.session(&id).unwrap();
    assert!(s.offered.is_some());
    let reply = gw.post_message(&id, "yes").unwrap();
    assert!(!reply.text.starts_with("Sorry"), "{}", reply.text);
    assert!(gw.session(&id).unwrap().offered.is_none());
}

#[test]
fn reconnecting_with_a_cursor_skips_seen_items() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path());
    let id = session(&gw, "ws");
    gw.post_message(&id, "hello there").unwrap();
    let all = gw.events(&id, 0).unwrap();
    let cursor = all.last().unwrap().seq;
    std::fs::write(dir.path().join("sandbox/ws/new.txt"), "x").unwrap();
    let fresh = gw.events(&id, cursor).unwrap();
    assert!(fresh.iter().all(|i| i.seq > cursor));
    assert!(!fresh.is_empty());
    assert_eq!(gw.events(&id, 0).unwrap().len(), all.len() + fresh.len());
}

#[test]
fn two_sessions_share_a_workspace() {
    let dir = tempfile::tempdir().unwrap();
    let gw = gateway(dir.path());
    let a = session(&gw, "ws");
    let b = session(&gw, "ws");
    assert_ne!(a, b);
    std::fs::write(dir.path().join("sandbox/ws/f.txt"), "x").unwrap();
    let ea = gw.events(&a, 0).unwrap();
    let eb = gw.events(&b, 0).unwrap();
    assert_eq!(ea.len(), 1);
    assert_eq!(eb.len(), 1);
    gw.post_message(&a, "hi").unwrap();
    assert_eq!(gw.events(&b, 0).unwrap().len(), 1);
}

#[test]
fn state_survives_a_new_gateway() {
    let dir = tempfile::tempdir().unwrap();
    let (gw, id) = happydog(dir.path());
    let p = gw.post_message(&id, HAPPYDOG_REQUEST).unwrap().pending.unwrap();
    let seq = gw.events(&id, 0).unwrap().last().unwrap().seq;
    drop(gw);
    let gw = gateway(dir.path());
    let s = gw.session(&id).unwrap();
    assert_eq!(s.pending.as_ref().unwrap().plan.id, p.plan);
    let reply = gw.decide_checkpoint(&id, &p.plan, p.index, Decision::Approve).unwrap();
    assert!(reply.clarification.is_some());
    let feed = gw.events(&id, seq).unwrap();
    assert_eq!(feed.first().unwrap().seq, seq + 1);
}
