//! Duplex streaming service.
//!
//! One WebSocket per viewer. Control messages are JSON text frames tagged by
//! `type`; rendered frames are binary [`FrameRecord`]s. Commands that change
//! the world go to the single update thread, which publishes a new snapshot
//! and replies; playback commands are handled by the client's own thread.
//!
//! Client → server:
//! `load_scene {path? | synth?}`, `add_seed {anchor, radius, hint?}`,
//! `remove_seed {id}`, `set_config {step?, horizon?, schedule?, mode?}`,
//! `expand {view?, synth?}`, `play`, `pause`, `scrub {t}`.
//!
//! Server → client:
//! `world_meta`, `seed_ack`, `step_report`, `error` (text) and frames (binary).

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use super::render::{RenderLoop, SnapshotCell};
use super::scenefile::SceneFile;
use super::world::{SeedEntry, WorldState};
use crate::geometry::Vec3;
use crate::propagation::{BlendSchedule, MotionSeed, PropagationMode};
use crate::synthscene::{generate_expanding_scene, SynthConfig};

/// Parameters of a generated synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default = "default_synth_seed")]
    pub seed: u64,
    #[serde(default = "default_views")]
    pub n_views: usize,
    #[serde(default = "default_points")]
    pub points_per_view: usize,
}

fn default_synth_seed() -> u64 {
    SynthConfig::default().seed
}
fn default_views() -> usize {
    SynthConfig::default().n_views
}
fn default_points() -> usize {
    SynthConfig::default().points_per_view
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { seed: default_synth_seed(), n_views: default_views(), points_per_view: default_points() }
    }
}

impl SynthSpec {
    pub fn scene(&self) -> SceneFile {
        let config = SynthConfig {
            seed: self.seed,
            n_views: self.n_views,
            points_per_view: self.points_per_view,
            ..Default::default()
        };
        SceneFile::from_synthetic(&generate_expanding_scene(&config))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    LoadScene {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        synth: Option<SynthSpec>,
    },
    AddSeed {
        anchor: [f64; 3],
        radius: f64,
        #[serde(default)]
        hint: Option<[f64; 3]>,
    },
    RemoveSeed {
        id: u64,
    },
    SetConfig {
        #[serde(default)]
        step: Option<[f64; 3]>,
        #[serde(default)]
        horizon: Option<usize>,
        #[serde(default)]
        schedule: Option<BlendSchedule>,
        #[serde(default)]
        mode: Option<PropagationMode>,
    },
    /// Ingests view `view` of the loaded scene (default: the next pending one),
    /// or of a freshly generated scene when `synth` is given.
    Expand {
        #[serde(default)]
        view: Option<usize>,
        #[serde(default)]
        synth: Option<SynthSpec>,
    },
    Play,
    Pause,
    Scrub {
        t: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldMeta {
    pub snapshot_id: u64,
    pub field_version: u64,
    pub step_counter: u64,
    pub gaussians: usize,
    pub dynamic: usize,
    pub accumulated: usize,
    pub step: [f64; 3],
    pub horizon: usize,
    pub schedule: BlendSchedule,
    pub mode: PropagationMode,
    pub seeds: Vec<SeedEntry>,
    pub views_total: usize,
    pub next_view: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    WorldMeta(WorldMeta),
    SeedAck { id: u64, removed: bool, seeds: Vec<SeedEntry> },
    StepReport { report: serde_json::Value },
    Error { message: String },
}

impl ServerMessage {
    pub fn to_message(&self) -> Message {
        Message::text(serde_json::to_string(self).expect("server messages serialize"))
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    /// Playback rate per client.
    pub fps: f64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { bind: SocketAddr::from(([127, 0, 0, 1], 8765)), fps: 30.0 }
    }
}

struct Command {
    message: ClientMessage,
    reply: mpsc::Sender<Vec<ServerMessage>>,
}

/// The update role: sole owner of the world.
struct Updater {
    world: WorldState,
    scene: SceneFile,
    next_view: usize,
    cell: Arc<SnapshotCell>,
    snapshot_id: u64,
}

impl Updater {
    fn meta(&self) -> WorldMeta {
        let p = self.world.config.propagation;
        WorldMeta {
            snapshot_id: self.snapshot_id,
            field_version: self.world.field.version(),
            step_counter: self.world.step_counter,
            gaussians: self.world.gaussians.len(),
            dynamic: self.world.trajectories.dynamic_count(),
            accumulated: self.world.accumulated_flows.len(),
            step: p.step,
            horizon: p.horizon,
            schedule: p.schedule,
            mode: p.mode,
            seeds: self.world.seeds.clone(),
            views_total: self.scene.views.len(),
            next_view: self.next_view,
        }
    }

    fn commit(&mut self, world: WorldState) {
        self.world = world;
        self.snapshot_id = self.cell.publish(&self.world);
    }

    fn handle(&mut self, message: ClientMessage) -> Result<Vec<ServerMessage>, String> {
        match message {
            ClientMessage::LoadScene { path, synth } => {
                let scene = match (path, synth) {
                    (Some(p), None) => SceneFile::load(&p).map_err(|e| e.to_string())?,
                    (None, Some(s)) => s.scene(),
                    (None, None) => SynthSpec::default().scene(),
                    (Some(_), Some(_)) => return Err("load_scene takes either path or synth".into()),
                };
                let world = WorldState::new(self.world.config, &scene.initial).map_err(|e| e.to_string())?;
                self.scene = scene;
                self.next_view = 0;
                self.commit(world);
                Ok(vec![ServerMessage::WorldMeta(self.meta())])
            }
            ClientMessage::AddSeed { anchor, radius, hint } => {
                let seed = MotionSeed::new(Vec3::from(anchor), radius, hint.map(Vec3::from))
                    .map_err(|e| e.to_string())?;
                let (world, id) = self.world.with_seed(seed).map_err(|e| e.to_string())?;
                self.commit(world);
                Ok(vec![ServerMessage::SeedAck { id, removed: false, seeds: self.world.seeds.clone() }])
            }
            ClientMessage::RemoveSeed { id } => {
                let world = self.world.without_seed(id).map_err(|e| e.to_string())?;
                self.commit(world);
                Ok(vec![ServerMessage::SeedAck { id, removed: true, seeds: self.world.seeds.clone() }])
            }
            ClientMessage::SetConfig { step, horizon, schedule, mode } => {
                let mut p = self.world.config.propagation;
                if let Some(s) = step {
                    p.step = s;
                }
                if let Some(h) = horizon {
                    p.horizon = h;
                }
                if let Some(s) = schedule {
                    p.schedule = s;
                }
                if let Some(m) = mode {
                    p.mode = m;
                }
                let world = self.world.with_propagation(p).map_err(|e| e.to_string())?;
                self.commit(world);
                Ok(vec![ServerMessage::WorldMeta(self.meta())])
            }
            ClientMessage::Expand { view, synth } => {
                let generated;
                let scene = match synth {
                    Some(s) => {
                        generated = s.scene();
                        &generated
                    }
                    None => &self.scene,
                };
                let index = view.unwrap_or(if synth.is_some() {
                    self.world.step_counter as usize
                } else {
                    self.next_view
                });
                let record = scene
                    .views
                    .get(index)
                    .ok_or_else(|| format!("no view {index} (scene has {})", scene.views.len()))?
                    .clone();
                let (world, step) = self.world.expand_step(&record).map_err(|e| e.to_string())?;
                if synth.is_none() {
                    self.next_view = index + 1;
                }
                self.commit(world);
                Ok(vec![
                    ServerMessage::StepReport { report: step.to_json() },
                    ServerMessage::WorldMeta(self.meta()),
                ])
            }
            ClientMessage::Play | ClientMessage::Pause | ClientMessage::Scrub { .. } => {
                Err("playback commands are handled per client".into())
            }
        }
    }

    fn run(mut self, rx: mpsc::Receiver<Command>) {
        for cmd in rx {
            let out = match cmd.message {
                // A no-op used by fresh connections to read the current meta.
                ClientMessage::Pause => vec![ServerMessage::WorldMeta(self.meta())],
                message => {
                    self.handle(message).unwrap_or_else(|message| vec![ServerMessage::Error { message }])
                }
            };
            let _ = cmd.reply.send(out);
        }
    }
}

pub struct ServiceHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting and waits for the accept loop; clients close on their
    /// next poll.
    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until the service stops.
    pub fn join(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Starts the service on `config.bind` (port 0 picks a free port).
pub fn spawn_service(
    world: WorldState,
    scene: SceneFile,
    config: ServiceConfig,
) -> std::io::Result<ServiceHandle> {
    let listener = TcpListener::bind(config.bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let cell = Arc::new(SnapshotCell::new(&world));
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Command>();
    let updater = Updater { world, scene, next_view: 0, cell: cell.clone(), snapshot_id: 0 };
    std::thread::spawn(move || updater.run(rx));

    let stop = shutdown.clone();
    let fps = config.fps;
    let accept = std::thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let (cell, tx, stop) = (cell.clone(), tx.clone(), stop.clone());
                    std::thread::spawn(move || {
                        if let Err(e) = serve_client(stream, cell, tx, stop, fps) {
                            eprintln!("client closed: {e}");
                        }
                    });
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    eprintln!("accept failed: {e}");
                    std::thread::sleep(Duration::from_millis(50));
                }
            }
        }
    });
    Ok(ServiceHandle { addr, shutdown, accept: Some(accept) })
}

fn request(tx: &mpsc::Sender<Command>, message: ClientMessage) -> Vec<ServerMessage> {
    let (reply, rx) = mpsc::channel();
    if tx.send(Command { message, reply }).is_err() {
        return vec![ServerMessage::Error { message: "update role stopped".into() }];
    }
    rx.recv().unwrap_or_else(|_| vec![ServerMessage::Error { message: "update role stopped".into() }])
}

fn send_frame(ws: &mut WebSocket<TcpStream>, render: &mut RenderLoop) -> tungstenite::Result<()> {
    let frame = render.next_frame();
    ws.send(Message::binary(frame.record().encode()))
}

fn serve_client(
    stream: TcpStream,
    cell: Arc<SnapshotCell>,
    tx: mpsc::Sender<Command>,
    stop: Arc<AtomicBool>,
    fps: f64,
) -> tungstenite::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    let mut render = RenderLoop::new(cell);
    render.pause();
    for m in request(&tx, ClientMessage::Pause) {
        ws.send(m.to_message())?;
    }
    send_frame(&mut ws, &mut render)?;

    let period = Duration::from_secs_f64(1.0 / fps.max(1e-3));
    let mut deadline = Instant::now() + period;
    loop {
        if stop.load(Ordering::SeqCst) {
            let _ = ws.close(None);
            let _ = ws.flush();
            return Ok(());
        }
        let now = Instant::now();
        if render.playing() && now >= deadline {
            send_frame(&mut ws, &mut render)?;
            deadline = if now > deadline + period {
                render.dropped_frames += 1;
                now + period
            } else {
                deadline + period
            };
        }
        let wait = if render.playing() { deadline.saturating_duration_since(Instant::now()) } else { period };
        ws.get_mut().set_read_timeout(Some(wait.max(Duration::from_millis(1))))?;
        match ws.read() {
            Ok(Message::Text(text)) => {
                let replies = match serde_json::from_str::<ClientMessage>(text.as_str()) {
                    Err(e) => vec![ServerMessage::Error { message: format!("bad message: {e}") }],
                    Ok(ClientMessage::Play) => {
                        render.play();
                        deadline = Instant::now();
                        Vec::new()
                    }
                    Ok(ClientMessage::Pause) => {
                        render.pause();
                        Vec::new()
                    }
                    Ok(ClientMessage::Scrub { t }) => {
                        render.scrub(t);
                        send_frame(&mut ws, &mut render)?;
                        Vec::new()
                    }
                    Ok(other) => request(&tx, other),
                };
                for m in replies {
                    ws.send(m.to_message())?;
                }
            }
            Ok(Message::Binary(_)) => {
                ws.send(
                    ServerMessage::Error { message: "binary messages are not accepted".into() }.to_message(),
                )?;
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                return Ok(());
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
            Err(tungstenite::Error::ConnectionClosed) | Err(tungstenite::Error::AlreadyClosed) => {
                return Ok(())
            }
            Err(e) => return Err(e),
        }
    }
}
