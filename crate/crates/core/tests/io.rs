mod common;

use common::random_log;
use ilsa_core::io::*;
use ilsa_core::nn::checkpoint;
use ilsa_core::task::cereal_pour;
use ilsa_core::trajgen::{generate_task_trajectories, GenConfig};
use ilsa_core::types::{Provenance, Trajectory};
use ilsa_core::IlsaError;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn parse(text: &str) -> ilsa_core::Result<Vec<Trajectory>> {
    read_trajectories(text.as_bytes())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn jsonl_round_trips_byte_for_byte(seed in 0u64..100_000, len in 1usize..40, aborted: bool) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = random_log(&mut rng, len, 0.5);
        t.aborted = aborted;
        t.seed = seed;
        let text = trajectories_to_string(std::slice::from_ref(&t)).unwrap();
        let back = parse(&text).unwrap();
        prop_assert_eq!(&back[0], &t);
        prop_assert_eq!(trajectories_to_string(&back).unwrap(), text);
    }
}

#[test]
fn header_and_step_layout() {
    let data = generate_task_trajectories(
        &cereal_pour().without_obstacles(),
        &GenConfig {
            trajectories_per_task: 2,
            ..GenConfig::default()
        },
    )
    .unwrap();
    let text = trajectories_to_string(&data).unwrap();
    let mut lines = text.lines();
    let head: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(head["task"], "cereal_pour");
    assert_eq!(head["provenance"], "kinematic");
    assert!(head.get("aborted").is_none());
    let step: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(step["t"], 0);
    assert_eq!(step["state"]["ee"].as_array().unwrap().len(), 6);
    assert_eq!(step["state"]["objects"].as_array().unwrap().len(), 2);
    assert_eq!(step["robot"].as_array().unwrap().len(), 6);
    assert_eq!(step["source"], "synthetic");
    assert!(step["cos"].is_null());
    let back = parse(&text).unwrap();
    assert_eq!(back, data);
    assert!(back.iter().all(|t| t.provenance == Provenance::Kinematic));
}

#[test]
fn malformed_input_reports_the_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let text = trajectories_to_string(&[random_log(&mut rng, 3, 0.5)]).unwrap();
    let lines: Vec<&str> = text.lines().collect();

    let truncated = format!("{}\n{}\n{{\"t\":2", lines[0], lines[1]);
    match parse(&truncated) {
        Err(IlsaError::Format(m)) => assert!(m.starts_with("line 3"), "{m}"),
        other => panic!("{other:?}"),
    }
    let orphan = lines[1].to_string();
    assert!(matches!(parse(&orphan), Err(IlsaError::Format(m)) if m.contains("before any header")));
    let skipped = format!("{}\n{}\n{}", lines[0], lines[1], lines[3]);
    assert!(matches!(parse(&skipped), Err(IlsaError::Format(m)) if m.contains("out of sequence")));
    let extra = lines[1].replacen("{", "{\"bogus\":1,", 1);
    let with_extra = format!("{}\n{}", lines[0], extra);
    assert!(matches!(parse(&with_extra), Err(IlsaError::Format(_))));
    assert_eq!(parse("\n\n").unwrap(), vec![]);
}

#[test]
fn files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trajs = vec![random_log(&mut rng, 10, 0.5), random_log(&mut rng, 7, 0.5)];
    save_trajectories(&path, &trajs).unwrap();
    assert_eq!(load_trajectories(&path).unwrap(), trajs);
    assert!(matches!(load_trajectories(&dir.path().join("missing")), Err(IlsaError::Io(_))));

    let cfg_path = dir.path().join("cfg.json");
    save_json(&cfg_path, &GenConfig::default()).unwrap();
    let back: GenConfig = load_json(&cfg_path).unwrap();
    assert_eq!(back, GenConfig::default());
    std::fs::write(&cfg_path, "{\"step_norm\": \"x\"}").unwrap();
    assert!(matches!(load_json::<GenConfig>(&cfg_path), Err(IlsaError::Format(_))));
}

#[test]
fn policy_checkpoint_without_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bare.ckpt");
    let p = ilsa_core::policy::Policy::new(common::small_cfg(0)).unwrap();
    checkpoint::save(&path, &p.params, &serde_json::json!({})).unwrap();
    assert!(matches!(ilsa_core::policy::Policy::load(&path), Err(IlsaError::Format(_))));
}
