use std::net::TcpStream;
use std::sync::Arc;
use std::time::{Duration, Instant};

use teleop_core::controller::ControllerConfig;
use teleop_core::geometry::Pose;
use teleop_core::model::sampler::{CommandModel, ConstantModel, ModelOutput};
use teleop_core::operator::Mood;
use teleop_core::service::{serve, MoodModels, ServeConfig, SessionMessage, SCHEMA_VERSION};
use teleop_core::sim::{BehaviorEvent, NUM_CHANNELS};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

fn stub(v: f64) -> Arc<dyn CommandModel> {
    Arc::new(ConstantModel {
        history: 15,
        output: ModelOutput { x0: vec![v; 25 * NUM_CHANNELS], behavior_logits: vec![0.0; BehaviorEvent::COUNT], mode_logits: vec![1.0, 0.0] },
    })
}

fn start(resume: Duration) -> teleop_core::service::ServerHandle {
    let models = MoodModels { name: "stub".into(), models: [(Mood::Default, stub(0.3)), (Mood::Happy, stub(0.6))].into_iter().collect() };
    let cfg = ServeConfig { bind: "127.0.0.1:0".into(), resume_timeout: resume, controller: ControllerConfig::default(), ..ServeConfig::default() };
    serve(cfg, models).unwrap()
}

fn connect(addr: std::net::SocketAddr) -> Client {
    let (ws, _) = tungstenite::connect(format!("ws://{addr}")).unwrap();
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    }
    ws
}

fn next(ws: &mut Client) -> SessionMessage {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return SessionMessage::parse(t.as_str()).unwrap(),
            _ => continue,
        }
    }
}

fn wait_for(ws: &mut Client, tag: &str) -> SessionMessage {
    let deadline = Instant::now() + Duration::from_secs(5);
    while Instant::now() < deadline {
        let m = next(ws);
        if m.tag() == tag {
            return m;
        }
    }
    panic!("no {tag} message");
}

#[test]
fn loopback_session() {
    let server = start(Duration::from_secs(30));
    let mut ws = connect(server.addr);
    match next(&mut ws) {
        SessionMessage::Hello { schema_version, resumed, .. } => {
            assert_eq!(schema_version, SCHEMA_VERSION);
            assert!(!resumed);
        }
        m => panic!("expected hello, got {}", m.tag()),
    }

    // world and commands arrive every tick with monotone t
    let mut last = f64::NEG_INFINITY;
    let (mut worlds, mut cmds) = (0, 0);
    let start = Instant::now();
    while worlds < 50 || cmds < 50 {
        let m = next(&mut ws);
        assert!(m.t() >= last, "t went backwards");
        last = m.t();
        match m.tag() {
            "world" => worlds += 1,
            "commands" => cmds += 1,
            _ => {}
        }
        let p = Pose::planar(1.5, 0.3, 1.7, 3.0);
        ws.send(Message::text(SessionMessage::human_pose(last, &p).to_line())).unwrap();
    }
    assert!(start.elapsed() > Duration::from_millis(600));

    // malformed input gets an error and the session keeps running
    ws.send(Message::text("{\"type\":\"teleport\",\"t\":1.0}")).unwrap();
    wait_for(&mut ws, "error");
    ws.send(Message::text("not json")).unwrap();
    wait_for(&mut ws, "error");
    wait_for(&mut ws, "world");

    // a second client is turned away
    let mut other = connect(server.addr);
    assert_eq!(next(&mut other).tag(), "error");

    ws.send(Message::text(SessionMessage::SetMood { t: last, mood: "happy".into() }.to_line())).unwrap();
    match wait_for(&mut ws, "hello") {
        SessionMessage::Hello { mood, resumed, .. } => {
            assert_eq!(mood, "happy");
            assert!(resumed);
        }
        _ => unreachable!(),
    }

    // disconnect pauses the world; reconnecting resumes it
    let paused_at = match wait_for(&mut ws, "world") {
        SessionMessage::World { t, .. } => t,
        _ => unreachable!(),
    };
    ws.close(None).unwrap();
    let _ = ws.flush();
    drop(ws);
    std::thread::sleep(Duration::from_millis(400));
    let mut ws = connect(server.addr);
    match next(&mut ws) {
        SessionMessage::Hello { resumed, mood, t, .. } => {
            assert!(resumed);
            assert_eq!(mood, "happy");
            assert!(t >= paused_at && t < paused_at + 0.3, "world kept running while disconnected: {t} vs {paused_at}");
        }
        m => panic!("expected hello, got {}", m.tag()),
    }
    wait_for(&mut ws, "commands");
    server.stop().unwrap();
}

#[test]
fn session_expires_after_resume_window() {
    let server = start(Duration::from_millis(100));
    let mut ws = connect(server.addr);
    next(&mut ws);
    wait_for(&mut ws, "world");
    ws.close(None).unwrap();
    let _ = ws.flush();
    drop(ws);
    std::thread::sleep(Duration::from_millis(300));
    let mut ws = connect(server.addr);
    match next(&mut ws) {
        SessionMessage::Hello { resumed, .. } => assert!(!resumed),
        m => panic!("expected hello, got {}", m.tag()),
    }
    server.stop().unwrap();
}

#[test]
fn pose_round_trip_median_under_100ms() {
    let server = start(Duration::from_secs(30));
    let mut ws = connect(server.addr);
    if let MaybeTlsStream::Plain(s) = ws.get_ref() {
        s.set_read_timeout(Some(Duration::from_millis(2))).unwrap();
    }
    let mut sent: Vec<(f64, Instant)> = Vec::new();
    let mut latencies = Vec::new();
    let mut matched = 0;
    let begin = Instant::now();
    let mut next_send = begin;
    while begin.elapsed() < Duration::from_secs(4) {
        if Instant::now() >= next_send {
            // a unique x marks each pose so its echo in `world` can be found
            let x = 1.0 + sent.len() as f64 * 1e-3;
            ws.send(Message::text(SessionMessage::human_pose(0.0, &Pose::planar(x, 0.5, 1.7, 3.0)).to_line())).unwrap();
            sent.push((x, Instant::now()));
            next_send += Duration::from_millis(20);
        }
        match ws.read() {
            Ok(Message::Text(t)) => {
                if let SessionMessage::World { human, .. } = SessionMessage::parse(t.as_str()).unwrap() {
                    while matched < sent.len() && sent[matched].0 <= human.x + 1e-9 {
                        if (sent[matched].0 - human.x).abs() < 1e-9 {
                            latencies.push(sent[matched].1.elapsed().as_secs_f64() * 1e3);
                        }
                        matched += 1;
                    }
                }
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => panic!("read failed: {e}"),
        }
    }
    assert!(latencies.len() >= 50, "only {} poses echoed", latencies.len());
    latencies.sort_by(f64::total_cmp);
    let median = latencies[latencies.len() / 2];
    assert!(median < 100.0, "median round trip {median:.1} ms");
    server.stop().unwrap();
}
