//! The server side can only ever see input summaries and global parameters.


use std::net::TcpListener;

use super::toy_units;
use fedmgp::fedrun::wire::{read_frame, write_frame, Frame, FrameKind, InputSummary, FRAME_MAGIC, HEADER_LEN};
use fedmgp::fedrun::{self, init_global, FedConfig};
use fedmgp::objective::ModelKind;
use fedmgp::params::{PriorHypers, RoundMessage, UnitDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SERVER_SOURCES: [(&str, &str); 2] = [
    ("server.rs", include_str!("../../src/fedrun/server.rs")),
    ("wire.rs", include_str!("../../src/fedrun/wire.rs")),
];

/// Strips the `#[cfg(test)]` module and comments so only shipped code is scanned.
fn shipped_code(src: &str) -> String {
    let body = src.split("#[cfg(test)]").next().unwrap();
    body.lines()
        .map(|l| l.split("//").next().unwrap())
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn server_code_never_names_unit_side_types() {
    for (name, src) in SERVER_SOURCES {
        let code = shipped_code(src);
        for forbidden in ["UnitDataset", "PersonalParams", "UnitState", "unit::", "mu_w", "outputs()"] {
            assert!(!code.contains(forbidden), "{name} refers to {forbidden}");
        }
    }
}

pub fn frame_grammar_admits_two_payload_shapes() {
    let prior = PriorHypers {
        num_latents: 2,
        num_inducing: 3,
        ..PriorHypers::default()
    };
    let summary = InputSummary {
        unit_id: 4,
        count: 9,
        lo: vec![-1.0],
        hi: vec![2.0],
    };
    let g = init_global(std::slice::from_ref(&summary), &prior, ModelKind::SpikeSlab).unwrap();
    let msg = RoundMessage::new(3, 9.0, &g);
    for frame in [
        Frame::Hello(summary),
        Frame::Round(FrameKind::Broadcast, msg.clone()),
        Frame::Round(FrameKind::Uplink, msg.clone()),
        Frame::Round(FrameKind::Done, msg),
    ] {
        let decoded = Frame::decode(&frame.encode()).unwrap();
        assert_eq!(decoded, frame);
        if let Frame::Round(_, m) = decoded {
            assert_eq!(m.global().unwrap(), g);
        }
    }

    // random payloads under every header either fail or decode to a valid shape
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..2000 {
        let len = rng.random_range(0..200usize);
        let mut bytes = FRAME_MAGIC.to_vec();
        bytes.push(rng.random_range(0..6u8));
        bytes.extend_from_slice(&(len as u32).to_le_bytes());
        bytes.extend((0..len).map(|_| rng.random::<u8>()));
        assert_eq!(bytes.len(), HEADER_LEN + len);
        match Frame::decode(&bytes) {
            Err(_) => {}
            Ok(Frame::Hello(s)) => assert!(s.count > 0),
            Ok(Frame::Round(_, m)) => assert!(m.global().is_ok()),
        }
    }
}

/// Plays the server by hand and checks that no observation or personal
/// value of the unit appears anywhere in what it sends.
pub fn unit_uplink_carries_no_private_values() {
    // offset so that no observation is a value like 0.0 that payloads carry anyway
    let base = toy_units(2, 15).remove(1);
    let unit = UnitDataset::new(1, base.inputs().clone(), base.outputs().map(|y| y + 0.1234567)).unwrap();
    let prior = PriorHypers {
        num_latents: 2,
        num_inducing: 4,
        ..PriorHypers::default()
    };
    let cfg = FedConfig {
        rounds: 2,
        local_steps: 3,
        ..FedConfig::default()
    };
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let handle = fedrun::join(listener.local_addr().unwrap(), unit.clone(), prior, cfg.clone()).unwrap();
    let (mut stream, _) = listener.accept().unwrap();

    let mut sent = Vec::new();
    let hello = read_frame(&mut stream).unwrap();
    sent.extend(hello.encode());
    let Frame::Hello(summary) = hello else { panic!("expected HELLO") };
    assert_eq!(summary.count, unit.len() as u64);
    let mut global = init_global(&[summary], &prior, cfg.model).unwrap();
    for round in 1..=2u64 {
        let down = RoundMessage::new(round, unit.len() as f64, &global);
        write_frame(&mut stream, &Frame::Round(FrameKind::Broadcast, down)).unwrap();
        let up = read_frame(&mut stream).unwrap();
        sent.extend(up.encode());
        match up {
            Frame::Round(FrameKind::Uplink, m) => global = m.global().unwrap(),
            other => panic!("unexpected {:?}", other.kind()),
        }
    }
    let done = RoundMessage::new(2, unit.len() as f64, &global);
    write_frame(&mut stream, &Frame::Round(FrameKind::Done, done)).unwrap();
    let outcome = handle.wait().unwrap();

    let contains = |v: f64| sent.windows(8).any(|w| w == v.to_le_bytes());
    for &y in unit.outputs().iter() {
        assert!(!contains(y), "observation {y} leaked");
    }
    let p = &outcome.personal;
    for &v in p.mu_w.iter().chain(&p.log_sigma_w).chain([&p.log_noise]) {
        assert!(!contains(v), "personal value {v} leaked");
    }
}
