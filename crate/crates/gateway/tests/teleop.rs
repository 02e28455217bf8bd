use std::path::Path;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

use imlw_core::data::{write_episode_to, Dataset};
use imlw_core::expert::{plan, Expert, ProficiencyProfile};
use imlw_core::rng::stream;
use imlw_core::sim::{success, TaskLibrary, CONTROL_DT};
use imlw_core::{ActionRecord, ArmCommand, CameraConfig, Episode, Observation, StepRecord, WorldState};
use imlw_gateway::{serve, ClientMessage, ServerMessage, SessionConfig, WIRE_SCHEMA};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

const SEED: u64 = 11;

fn config(dir: &Path, lockstep: bool) -> SessionConfig {
    let mut c = SessionConfig::new(TaskLibrary::builtin(), dir.to_path_buf());
    c.lockstep = lockstep;
    c.created_at = Some(1_700_000_000_000);
    c
}

async fn send(ws: &mut Ws, m: &ClientMessage) {
    ws.send(Message::text(m.to_text())).await.unwrap();
}

async fn recv(ws: &mut Ws) -> ServerMessage {
    let frame = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("server reply").unwrap().unwrap();
    serde_json::from_str(frame.to_text().unwrap()).unwrap()
}

/// Reads until the reply to `seq`, returning it with every state seen first.
async fn reply(ws: &mut Ws, seq: u64) -> (ServerMessage, Vec<ServerMessage>) {
    let mut states = Vec::new();
    loop {
        let m = recv(ws).await;
        match &m {
            ServerMessage::State { .. } => states.push(m),
            ServerMessage::Ack { reply_to, .. } if *reply_to == seq => return (m, states),
            ServerMessage::Error { reply_to: Some(r), .. } if *r == seq => return (m, states),
            ServerMessage::Hello { .. } => return (m, states),
            _ => {}
        }
    }
}

fn hello(seq: u64) -> ClientMessage {
    ClientMessage::Hello {
        seq,
        schema: Some(WIRE_SCHEMA.into()),
        collector: Some("bo".into()),
        task: Some("PickPlace".into()),
        case: Some("c2".into()),
        seed: Some(SEED),
    }
}

#[tokio::test]
async fn hello_and_second_client_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve("127.0.0.1:0", config(dir.path(), false)).await.unwrap();
    let url = format!("ws://{}", server.addr);
    let (mut a, _) = connect_async(&url).await.unwrap();
    send(&mut a, &hello(1)).await;
    let ServerMessage::Hello { schema, task, .. } = recv(&mut a).await else { panic!("expected hello") };
    assert_eq!(schema, WIRE_SCHEMA);
    assert_eq!(task.as_deref(), Some("PickPlace"));
    let (mut b, _) = connect_async(&url).await.unwrap();
    assert!(matches!(recv(&mut b).await, ServerMessage::Error { message, .. } if message.contains("already connected")));

    // Without controls the arm stays put across realtime state broadcasts.
    let mut arms = Vec::new();
    while arms.len() < 5 {
        if let ServerMessage::State { arm, time, .. } = recv(&mut a).await {
            arms.push((arm, time));
        }
    }
    assert!(arms.windows(2).all(|w| w[0].0 == w[1].0 && w[1].1 > w[0].1));
    a.close(None).await.unwrap();
    server.shutdown().await;
}

/// Perfect-expert velocity commands for the bound case, with clutch
/// released for a stretch at the start and in the middle.
fn command_log() -> Vec<(ArmCommand, bool)> {
    let lib = TaskLibrary::builtin();
    let task = lib.task("PickPlace").unwrap();
    let mut world = WorldState::init(task, task.case("c2").unwrap(), SEED).unwrap();
    let mut expert = Expert::new(plan(task, &world).unwrap());
    let profile = ProficiencyProfile::perfect("perfect");
    let mut rng = stream(0, &[]);
    let mut log = vec![(ArmCommand { vx: 0.5, vy: 0.5, vyaw: 0.0, pwm_target: 0.0 }, false); 6];
    while !success(task, &world).unwrap() {
        let cmd = expert.act(&world, &profile, &mut rng);
        world = world.step(&cmd, CONTROL_DT).unwrap();
        log.push((cmd, true));
        if log.len() == 30 {
            log.extend(vec![(ArmCommand { vx: -0.3, vy: 0.2, vyaw: 1.0, pwm_target: cmd.pwm_target }, false); 5]);
        }
        assert!(log.len() < 1000, "expert did not finish");
    }
    log
}

/// What the gateway should record for the log, built without the server.
fn oracle(log: &[(ArmCommand, bool)]) -> (Episode, bool) {
    let lib = TaskLibrary::builtin();
    let task = lib.task("PickPlace").unwrap();
    let cams = CameraConfig::default_pair(16);
    let mut world = WorldState::init(task, task.case("c2").unwrap(), SEED).unwrap();
    let mut held = ArmCommand::hold(world.gripper.pwm);
    let mut steps = Vec::new();
    for (cmd, clutch) in log {
        held = if *clutch { cmd.clamped() } else { ArmCommand::hold(held.pwm_target) };
        let next = world.step(&held, CONTROL_DT).unwrap();
        steps.push(StepRecord { t: world.time, observation: Observation::capture(&world, &cams), action: ActionRecord { target: next.arm, pwm_target: held.pwm_target } });
        world = next;
    }
    let ep = Episode {
        episode_id: "PickPlace-c2-bo-h000".into(),
        task_name: "PickPlace".into(),
        case_id: "c2".into(),
        collector: "bo".into(),
        created_at: 1_700_000_000_000,
        control_dt: CONTROL_DT,
        camera_configs: cams,
        steps,
        outcome: true,
    };
    (ep, success(task, &world).unwrap())
}

fn bytes(ep: &Episode) -> (Vec<u8>, Vec<u8>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    write_episode_to(ep, &mut a, &mut b).unwrap();
    (a, b)
}

/// Replays the log over a fresh lockstep server; returns the saved episode
/// and every state message received while the clutch was released.
async fn replay(log: &[(ArmCommand, bool)], dir: &Path) -> (Episode, Vec<Vec<ServerMessage>>) {
    let server = serve("127.0.0.1:0", config(dir, true)).await.unwrap();
    let (mut ws, _) = connect_async(format!("ws://{}", server.addr)).await.unwrap();
    send(&mut ws, &hello(1)).await;
    reply(&mut ws, 1).await;
    send(&mut ws, &ClientMessage::RecordStart { seq: 2 }).await;
    assert!(matches!(reply(&mut ws, 2).await.0, ServerMessage::Ack { .. }));
    let mut seq = 2;
    let mut released = Vec::new();
    let mut current: Option<Vec<ServerMessage>> = None;
    for (cmd, clutch) in log {
        seq += 1;
        send(&mut ws, &ClientMessage::Control { seq, vx: cmd.vx, vy: cmd.vy, vyaw: cmd.vyaw, pwm_target: cmd.pwm_target, clutch: *clutch }).await;
        let (ack, states) = reply(&mut ws, seq).await;
        assert!(matches!(ack, ServerMessage::Ack { .. }), "{ack:?}");
        if !clutch {
            current.get_or_insert_with(Vec::new).extend(states);
        } else if let Some(block) = current.take() {
            released.push(block);
        }
    }
    send(&mut ws, &ClientMessage::RecordStop { seq: seq + 1 }).await;
    reply(&mut ws, seq + 1).await;
    send(&mut ws, &ClientMessage::Save { seq: seq + 2, outcome: true }).await;
    let (ack, _) = reply(&mut ws, seq + 2).await;
    let ServerMessage::Ack { episode_id: Some(id), steps: Some(n), .. } = ack else { panic!("save failed: {ack:?}") };
    assert_eq!(n, log.len());
    ws.close(None).await.unwrap();
    server.shutdown().await;
    let ds = Dataset::load(dir).unwrap();
    let ep = ds.episodes.iter().find(|e| e.episode_id == id).unwrap();
    ((**ep).clone(), released)
}

#[tokio::test]
async fn expert_log_replay_matches_oracle_and_clutch_holds() {
    let log = command_log();
    let (expected, succeeded) = oracle(&log);
    assert!(succeeded);
    let d1 = tempfile::tempdir().unwrap();
    let (ep, released) = replay(&log, d1.path()).await;
    assert!(imlw_core::data::validate_episode(&ep).is_empty());
    assert_eq!(bytes(&ep), bytes(&expected));

    // Clutch safety: states during released stretches never move the arm.
    assert_eq!(released.len(), 2);
    for block in &released {
        assert!(!block.is_empty());
        let arms: Vec<_> = block.iter().map(|m| match m {
            ServerMessage::State { arm, clutch, .. } => {
                assert!(!clutch);
                *arm
            }
            _ => unreachable!(),
        }).collect();
        assert!(arms.windows(2).all(|w| w[0] == w[1]));
    }

    // A fresh server fed the same log writes identical bytes.
    let d2 = tempfile::tempdir().unwrap();
    let (again, _) = replay(&log, d2.path()).await;
    assert_eq!(bytes(&again), bytes(&ep));
}

#[tokio::test]
async fn unknown_and_malformed_messages_get_errors() {
    let dir = tempfile::tempdir().unwrap();
    let server = serve("127.0.0.1:0", config(dir.path(), true)).await.unwrap();
    let (mut ws, _) = connect_async(format!("ws://{}", server.addr)).await.unwrap();
    ws.send(Message::text(r#"{"type":"warp","seq":5}"#)).await.unwrap();
    assert!(matches!(recv(&mut ws).await, ServerMessage::Error { reply_to: Some(5), .. }));
    ws.send(Message::text(r#"{"type":"list_tasks","seq":6}"#)).await.unwrap();
    let ServerMessage::Ack { tasks: Some(tasks), .. } = recv(&mut ws).await else { panic!("expected task list") };
    assert!(tasks.iter().any(|t| t.name == "PickPlace" && t.cases.len() == 10));
    ws.send(Message::text(r#"{"type":"control","seq":7,"vx":0.1,"vy":0,"vyaw":0,"pwm_target":0,"clutch":true}"#)).await.unwrap();
    assert!(matches!(recv(&mut ws).await, ServerMessage::Error { reply_to: Some(7), .. }));
    ws.close(None).await.unwrap();
    server.shutdown().await;
}
