//! Protocol round trips against a headless service on a free port.

use std::net::TcpStream;
use std::time::Duration;

use scenedyn::motionfield::TrainOptions;
use scenedyn::pipeline::service::{spawn_service, ServerMessage, ServiceConfig, SynthSpec};
use scenedyn::pipeline::{PipelineConfig, WorldState};
use scenedyn::propagation::{FrameRecord, PropagationConfig};
use serde_json::json;
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

type Client = WebSocket<MaybeTlsStream<TcpStream>>;

const HORIZON: usize = 12;

fn start() -> (scenedyn::pipeline::service::ServiceHandle, Client) {
    let scene = SynthSpec { seed: 5, n_views: 2, points_per_view: 400 }.scene();
    let config = PipelineConfig {
        train: TrainOptions { iterations: 20, ..Default::default() },
        propagation: PropagationConfig { horizon: HORIZON, ..Default::default() },
        ..Default::default()
    };
    let world = WorldState::new(config, &scene.initial).unwrap();
    let service =
        spawn_service(world, scene, ServiceConfig { bind: "127.0.0.1:0".parse().unwrap(), fps: 60.0 })
            .unwrap();
    let (client, _) = tungstenite::connect(format!("ws://{}", service.addr())).unwrap();
    if let MaybeTlsStream::Plain(s) = client.get_ref() {
        s.set_read_timeout(Some(Duration::from_secs(60))).unwrap();
    }
    (service, client)
}

fn send(ws: &mut Client, v: serde_json::Value) {
    ws.send(Message::text(v.to_string())).unwrap();
}

/// Next control message, skipping frames.
fn next_text(ws: &mut Client) -> ServerMessage {
    loop {
        match ws.read().unwrap() {
            Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
            Message::Binary(_) => continue,
            other => panic!("unexpected {other:?}"),
        }
    }
}

/// Next frame, skipping control messages.
fn next_frame(ws: &mut Client) -> FrameRecord {
    loop {
        match ws.read().unwrap() {
            Message::Binary(b) => return FrameRecord::decode(&b).unwrap(),
            Message::Text(_) => continue,
            other => panic!("unexpected {other:?}"),
        }
    }
}

#[test]
fn connect_sends_meta_then_first_frame() {
    let (_service, mut ws) = start();
    let ServerMessage::WorldMeta(meta) = next_text(&mut ws) else { panic!("expected world_meta") };
    assert_eq!(meta.horizon, HORIZON);
    assert_eq!(meta.views_total, 2);
    assert_eq!(meta.step_counter, 0);
    let frame = next_frame(&mut ws);
    assert_eq!(frame.frame_index, 0);
    assert_eq!(frame.len(), meta.gaussians);
}

#[test]
fn seeds_expand_scrub_and_play() {
    let (_service, mut ws) = start();
    next_text(&mut ws);
    next_frame(&mut ws);

    for view in 0..2 {
        send(&mut ws, json!({"type": "expand"}));
        let ServerMessage::StepReport { report } = next_text(&mut ws) else { panic!("expected step_report") };
        assert_eq!(report["view_id"], view);
        let ServerMessage::WorldMeta(meta) = next_text(&mut ws) else { panic!("expected world_meta") };
        assert_eq!(meta.next_view, view + 1);
        assert_eq!(meta.field_version, view as u64 + 1);
    }

    let anchors = [[4.0, 0.0, 0.0], [5.0, 0.5, 0.0], [3.0, -0.5, 0.0]];
    let mut ids = Vec::new();
    for a in anchors {
        send(&mut ws, json!({"type": "add_seed", "anchor": a, "radius": 1.5}));
        let ServerMessage::SeedAck { id, removed, seeds } = next_text(&mut ws) else {
            panic!("expected seed_ack")
        };
        assert!(!removed);
        let entry = seeds.iter().find(|s| s.id == id).unwrap();
        assert_eq!(entry.seed.anchor, a);
        ids.push(id);
    }
    assert!(ids.windows(2).all(|w| w[0] < w[1]), "{ids:?}");
    send(&mut ws, json!({"type": "remove_seed", "id": ids[1]}));
    let ServerMessage::SeedAck { id, removed, seeds } = next_text(&mut ws) else {
        panic!("expected seed_ack")
    };
    assert!(removed && id == ids[1]);
    assert_eq!(seeds.iter().map(|s| s.id).collect::<Vec<_>>(), vec![ids[0], ids[2]]);
    send(&mut ws, json!({"type": "add_seed", "anchor": [4.2, 0.1, 0.0], "radius": 1.0}));
    let ServerMessage::SeedAck { id, .. } = next_text(&mut ws) else { panic!("expected seed_ack") };
    assert!(id > ids[2], "ids are never reused");

    send(&mut ws, json!({"type": "scrub", "t": 0}));
    let first = next_frame(&mut ws);
    send(&mut ws, json!({"type": "scrub", "t": HORIZON}));
    let last = next_frame(&mut ws);
    assert_eq!((first.frame_index, last.frame_index), (0, HORIZON as u32));
    assert!(first.bidirectional && last.bidirectional);
    let s = first.static_count as usize;
    let d = (first.len() - s) / 2;
    assert!(d > 0, "seeds produced a dynamic layer");
    assert_eq!(first.positions[..s], last.positions[..s]);
    // Visible dynamic copies: forward at t = 0, backward at t = T.
    assert_eq!(first.positions[s..s + d], last.positions[s + d..]);
    assert_eq!(first.opacities[s..s + d], last.opacities[s + d..]);
    assert!(first.opacities[s + d..].iter().chain(&last.opacities[s..s + d]).all(|&a| a == 0.0));

    send(&mut ws, json!({"type": "play"}));
    let frames: Vec<FrameRecord> = (0..2 * HORIZON).map(|_| next_frame(&mut ws)).collect();
    assert!(frames.windows(2).all(|w| w[1].sequence > w[0].sequence));
    assert!(frames.windows(2).any(|w| w[1].frame_index < w[0].frame_index), "playback wraps at T");
    send(&mut ws, json!({"type": "pause"}));
}

#[test]
fn set_config_and_errors() {
    let (_service, mut ws) = start();
    next_text(&mut ws);
    send(
        &mut ws,
        json!({"type": "set_config", "horizon": 30, "step": [0.5, 0.5, 0.0], "mode": "forward_only"}),
    );
    let ServerMessage::WorldMeta(meta) = next_text(&mut ws) else { panic!("expected world_meta") };
    assert_eq!(meta.horizon, 30);
    assert_eq!(meta.step, [0.5, 0.5, 0.0]);

    send(&mut ws, json!({"type": "remove_seed", "id": 99}));
    assert!(matches!(next_text(&mut ws), ServerMessage::Error { .. }));
    send(&mut ws, json!({"type": "add_seed", "anchor": [0, 0, 0], "radius": -1.0}));
    assert!(matches!(next_text(&mut ws), ServerMessage::Error { .. }));
    send(&mut ws, json!({"type": "expand", "view": 7}));
    assert!(matches!(next_text(&mut ws), ServerMessage::Error { .. }));
    ws.send(Message::text("not json")).unwrap();
    assert!(matches!(next_text(&mut ws), ServerMessage::Error { .. }));

    send(&mut ws, json!({"type": "load_scene", "synth": {"seed": 2, "n_views": 1, "points_per_view": 100}}));
    let ServerMessage::WorldMeta(meta) = next_text(&mut ws) else { panic!("expected world_meta") };
    assert_eq!((meta.views_total, meta.step_counter, meta.horizon), (1, 0, 30));
}
