use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use coldfuse::{
    cohort_for, contribute_local, finetune, generate_family, init_model, run_iteration, Activation, Model, ModelArch,
    ParameterVector, RepositoryState, TaskDataset, TaskFamilySpec, TaskRegistry, TrainConfig,
};
use coldfuse_hub::wire::msg;
use coldfuse_hub::*;

fn arch() -> ModelArch {
    ModelArch {
        input_dim: 6,
        hidden_dims: vec![5],
        activation: Activation::Tanh,
    }
}

fn tasks(n: usize) -> Vec<TaskDataset> {
    generate_family(&TaskFamilySpec {
        n_tasks: n,
        input_dim: 6,
        shared_rank: 3,
        examples_per_task: 200,
        seed: 11,
        ..TaskFamilySpec::default()
    })
    .unwrap()
}

fn theta0() -> ParameterVector {
    init_model(&arch(), 2, 3).unwrap().into_parts().0
}

fn cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        max_examples: 256,
        seed,
        ..TrainConfig::default()
    }
}

fn start(cohort_size: usize) -> HubHandle {
    start_with(HubConfig {
        cohort_size,
        ..HubConfig::default()
    })
}

fn start_with(config: HubConfig) -> HubHandle {
    Hub::bind(config, theta0()).unwrap().spawn()
}

fn client(h: &HubHandle) -> HubClient {
    HubClient::new(h.addr().to_string(), ClientOptions::default())
}

fn bits(p: &ParameterVector) -> Vec<u64> {
    p.values().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn first_fetch_returns_initial_base() {
    let hub = start(2);
    let (iteration, base) = client(&hub).fetch_base("r", "a", 0).unwrap();
    assert_eq!(iteration, 0);
    assert_eq!(bits(&base), bits(&theta0()));
}

#[test]
fn stale_submission_is_rejected_without_mutation() {
    let hub = start(1);
    let t = tasks(1);
    let mut c = client(&hub);
    let (i, base) = c.fetch_base("r", "a", 0).unwrap();
    let first = contribute_local(&base, &arch(), &t[0], &cfg(1), "a", i).unwrap();
    c.submit("r", &first).unwrap();
    c.fetch_base("r", "a", 0).unwrap();
    let before = hub.state("r").unwrap();
    assert_eq!(before.iteration(), 1);

    let mut stale = contribute_local(&base, &arch(), &t[0], &cfg(2), "a", 0).unwrap();
    stale.iteration = 0;
    let err = c.submit("r", &stale).unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::Stale));
    assert_eq!(hub.state("r").unwrap(), before);
}

#[test]
fn three_zero_rate_clients_fuse_to_the_initial_base() {
    let hub = start(3);
    let t = tasks(3);
    let addr = hub.addr().to_string();
    let zero = TrainConfig {
        learning_rate: 0.0,
        ..cfg(0)
    };
    let fused: Vec<ParameterVector> = thread::scope(|s| {
        let handles: Vec<_> = t
            .iter()
            .enumerate()
            .map(|(i, task)| {
                let addr = addr.clone();
                let zero = zero.clone();
                s.spawn(move || {
                    let id = format!("c{i}");
                    let arch = arch();
                    let req = ContributeRequest {
                        run_key: "zero",
                        contributor_id: &id,
                        task,
                        cfg: &zero,
                        arch: &arch,
                        cohort_size: 0,
                    };
                    contribute(&addr, &req, &ClientOptions::default()).unwrap().fused
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for f in fused {
        assert_eq!(bits(&f), bits(&theta0()));
    }
}

#[test]
fn identical_resubmission_is_acknowledged_once() {
    let hub = start(2);
    let t = tasks(1);
    let mut c = client(&hub);
    let (i, base) = c.fetch_base("r", "a", 0).unwrap();
    let contribution = contribute_local(&base, &arch(), &t[0], &cfg(1), "a", i).unwrap();
    let first = c.submit("r", &contribution).unwrap();
    let second = c.submit("r", &contribution).unwrap();
    assert!(!first.already_recorded);
    assert!(second.already_recorded);
    assert_eq!(hub.state("r").unwrap().received().len(), 1);

    let mut different = contribution.clone();
    different.body.values_mut()[0] += 1.0;
    assert_eq!(c.submit("r", &different).unwrap_err().code(), Some(ErrorCode::Duplicate));
    assert_eq!(hub.state("r").unwrap().received().len(), 1);
}

#[test]
fn retry_after_fusion_is_acknowledged() {
    let hub = start(1);
    let t = tasks(1);
    let mut c = client(&hub);
    let (i, base) = c.fetch_base("r", "a", 0).unwrap();
    let contribution = contribute_local(&base, &arch(), &t[0], &cfg(1), "a", i).unwrap();
    assert!(!c.submit("r", &contribution).unwrap().already_recorded);
    assert!(c.submit("r", &contribution).unwrap().already_recorded);
    assert_eq!(hub.state("r").unwrap().history().len(), 1);
}

#[test]
fn cohort_of_one_returns_the_local_finetune() {
    let hub = start(1);
    let t = tasks(1);
    let a = arch();
    let c = cfg(5);
    let req = ContributeRequest {
        run_key: "one",
        contributor_id: "solo",
        task: &t[0],
        cfg: &c,
        arch: &a,
        cohort_size: 0,
    };
    let out = contribute(&hub.addr().to_string(), &req, &ClientOptions::default()).unwrap();
    let local = finetune(&Model::with_fresh_head(&a, theta0(), t[0].n_classes()).unwrap(), &t[0], &c).unwrap();
    assert_eq!(bits(&out.fused), bits(local.body()));
}

#[test]
fn networked_iteration_matches_in_process() {
    let hub = start(2);
    let t = tasks(2);
    let registry = TaskRegistry::from_tasks(t.iter().cloned());
    let ids = registry.ids();
    let cohort = cohort_for(&ids, &cfg(0), 77, 0);
    let state = RepositoryState::new(theta0());
    let local = run_iteration(&state, &cohort, &registry, &arch()).unwrap();
    let driver = HubDriver::new(hub.addr().to_string());
    let remote = coldfuse::IterationDriver::run_iteration(&driver, "net", &state, &cohort, &registry, &arch()).unwrap();
    assert_eq!(bits(remote.base()), bits(local.base()));
    assert_eq!(remote.history(), local.history());
    assert_eq!(bits(hub.state("net").unwrap().base()), bits(local.base()));
}

#[test]
fn fused_iterations_are_logged_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("history.jsonl");
    let hub = start_with(HubConfig {
        cohort_size: 1,
        history_log: Some(log.clone()),
        ..HubConfig::default()
    });
    let t = tasks(1);
    let mut c = client(&hub);
    for _ in 0..2 {
        let (i, base) = c.fetch_base("r", "a", 0).unwrap();
        let contribution = contribute_local(&base, &arch(), &t[0], &cfg(i), "a", i).unwrap();
        c.submit("r", &contribution).unwrap();
    }
    let history = hub.state("r").unwrap().history().to_vec();
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for (line, record) in lines.iter().zip(&history) {
        assert_eq!(line["run_key"], "r");
        assert_eq!(line["iteration"], record.iteration);
        assert_eq!(line["fused_hash"], record.fused_hash.as_str());
        assert_eq!(line["chain_hash"], record.chain_hash.as_str());
    }
}

#[test]
fn fusion_waits_for_the_full_cohort() {
    let hub = start(2);
    let t = tasks(2);
    let mut a = client(&hub);
    let mut b = client(&hub);
    let (i, base) = a.fetch_base("r", "a", 0).unwrap();
    b.fetch_base("r", "b", 0).unwrap();
    a.submit("r", &contribute_local(&base, &arch(), &t[0], &cfg(1), "a", i).unwrap())
        .unwrap();

    let (tx, rx) = mpsc::channel();
    let addr = hub.addr().to_string();
    let waiter = thread::spawn(move || {
        let mut w = HubClient::new(addr, ClientOptions::default());
        tx.send(w.await_fusion("r", 0)).unwrap();
    });
    assert!(rx.recv_timeout(Duration::from_millis(300)).is_err(), "fused before cohort completed");
    assert_eq!(hub.state("r").unwrap().iteration(), 0);
    b.submit("r", &contribute_local(&base, &arch(), &t[1], &cfg(2), "b", i).unwrap())
        .unwrap();
    let (next, fused) = rx.recv_timeout(Duration::from_secs(10)).unwrap().unwrap();
    waiter.join().unwrap();
    assert_eq!(next, 1);
    assert_eq!(bits(&fused), bits(hub.state("r").unwrap().base()));
}

#[test]
fn full_cohort_rejects_extra_contributors() {
    let hub = start(1);
    let mut c = client(&hub);
    c.fetch_base("r", "a", 0).unwrap();
    c.fetch_base("r", "a", 0).unwrap();
    assert_eq!(c.fetch_base("r", "b", 0).unwrap_err().code(), Some(ErrorCode::NotInCohort));
    assert_eq!(c.fetch_base("r", "a", 3).unwrap_err().code(), Some(ErrorCode::CohortMismatch));
}

#[test]
fn manifest_mismatch_is_a_shape_error() {
    let hub = start(1);
    let t = tasks(1);
    let mut c = client(&hub);
    let (i, _) = c.fetch_base("r", "a", 0).unwrap();
    let wider = ModelArch {
        hidden_dims: vec![7],
        ..arch()
    };
    let body = init_model(&wider, 2, 1).unwrap().into_parts().0;
    let bad = contribute_local(&body, &wider, &t[0], &cfg(1), "a", i).unwrap();
    assert_eq!(c.submit("r", &bad).unwrap_err().code(), Some(ErrorCode::Shape));
    assert!(hub.state("r").unwrap().received().is_empty());
}

#[test]
fn missed_deadline_aborts_the_iteration() {
    let hub = start_with(HubConfig {
        cohort_size: 2,
        deadline_ms: 100,
        ..HubConfig::default()
    });
    let t = tasks(1);
    let mut c = client(&hub);
    let (i, base) = c.fetch_base("r", "a", 0).unwrap();
    c.submit("r", &contribute_local(&base, &arch(), &t[0], &cfg(1), "a", i).unwrap())
        .unwrap();
    let err = c.await_fusion("r", 0).unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::Aborted));
    let state = hub.state("r").unwrap();
    assert_eq!(state.iteration(), 0);
    assert!(state.received().is_empty());
    assert_eq!(bits(state.base()), bits(&theta0()));
}

fn raw_exchange(h: &HubHandle, bytes: &[u8]) -> Vec<u8> {
    let mut s = TcpStream::connect(h.addr()).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    s.write_all(bytes).unwrap();
    s.shutdown(std::net::Shutdown::Write).unwrap();
    let mut out = Vec::new();
    let _ = s.read_to_end(&mut out);
    out
}

#[test]
fn bad_frames_never_mutate_state() {
    let hub = start(2);
    let mut c = client(&hub);
    c.fetch_base("r", "a", 0).unwrap();
    let before = hub.state("r").unwrap();

    let fetch = Message::FetchBase {
        run_key: "r".into(),
        contributor_id: "b".into(),
        cohort_size: 0,
    }
    .to_wire()
    .encode();

    // Truncated payload: connection closes without a reply.
    assert!(raw_exchange(&hub, &fetch[..fetch.len() - 2]).is_empty());
    // Bad magic: ERROR reply, then close.
    let mut corrupt = fetch.clone();
    corrupt[1] = b'X';
    let reply = raw_exchange(&hub, &corrupt);
    let (m, _) = WireMessage::decode(&reply, 1 << 20).unwrap();
    assert!(matches!(Message::from_wire(&m).unwrap(), Message::Error { code: ErrorCode::Malformed, .. }));
    // Unknown type: ERROR reply with its own code.
    let reply = raw_exchange(&hub, &WireMessage::new(99, vec![1, 2, 3]).encode());
    let (m, _) = WireMessage::decode(&reply, 1 << 20).unwrap();
    assert!(matches!(Message::from_wire(&m).unwrap(), Message::Error { code: ErrorCode::UnknownType, .. }));
    // A reply type sent as a request.
    let reply = raw_exchange(&hub, &WireMessage::new(msg::ACK, vec![0; 17]).encode());
    let (m, _) = WireMessage::decode(&reply, 1 << 20).unwrap();
    assert!(matches!(Message::from_wire(&m).unwrap(), Message::Error { .. }));
    // Garbled payload inside a valid frame.
    let reply = raw_exchange(&hub, &WireMessage::new(msg::SUBMIT, vec![0xff; 7]).encode());
    let (m, _) = WireMessage::decode(&reply, 1 << 20).unwrap();
    assert!(matches!(Message::from_wire(&m).unwrap(), Message::Error { code: ErrorCode::Malformed, .. }));

    assert_eq!(hub.state("r").unwrap(), before);
}

#[test]
fn oversized_frames_are_refused() {
    let hub = start_with(HubConfig {
        max_payload: 64,
        ..HubConfig::default()
    });
    let reply = raw_exchange(&hub, &WireMessage::new(msg::SUBMIT, vec![0; 65]).encode());
    let (m, _) = WireMessage::decode(&reply, 1 << 20).unwrap();
    assert!(matches!(Message::from_wire(&m).unwrap(), Message::Error { code: ErrorCode::TooLarge, .. }));
}

#[test]
fn unreachable_hub_is_a_transport_error() {
    let addr = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let mut c = HubClient::new(
        addr.to_string(),
        ClientOptions {
            retries: 1,
            backoff: Duration::from_millis(1),
            ..ClientOptions::default()
        },
    );
    assert!(matches!(c.fetch_base("r", "a", 0), Err(HubError::Transport(_))));
}
