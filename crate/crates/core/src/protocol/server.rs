use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::topics::{self, CommandOutcome, JointStates, PhaseStatus, SessionCommand};
use super::{chunk_scene, decode_frame, encode_depth, encode_frame, encode_video, Decoded, Frame, Hub, Kind, ProtocolError, QueuePolicy, SubscriberId};
use crate::session::{FeedbackPacket, IkStatus, OperatorCommand, Session, SessionEvent};
use crate::splat::encode_splat_binary;

/// How the session loop advances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    /// Ticks at the session's tick rate against the wall clock.
    #[default]
    Realtime,
    /// Ticks only on `advance` commands, for reproducible scripted runs.
    Stepped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    /// TCP endpoint for framed streams.
    pub listen: String,
    /// Optional web-socket endpoint carrying one frame per binary message.
    pub ws_listen: Option<String>,
    pub clock: Clock,
    /// Per-topic queue length for each network subscriber.
    pub subscriber_buffer: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { listen: "127.0.0.1:7400".into(), ws_listen: None, clock: Clock::Realtime, subscriber_buffer: 64 }
    }
}

struct Inbound {
    topic: String,
    payload: Vec<u8>,
}

/// A running server. Dropping it shuts everything down.
pub struct ServerHandle {
    addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    hub: Arc<Hub>,
    commands: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
    session: Arc<Mutex<Option<Session>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    /// The hub, for in-process subscribers.
    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Enqueues a command as if a client had published it.
    pub fn inject(&self, topic: &str, payload: Vec<u8>) -> Result<(), ProtocolError> {
        topics::validate_payload(topic, &payload)?;
        self.commands.send(Inbound { topic: topic.into(), payload }).map_err(|_| ProtocolError::Closed)
    }

    /// Stops all threads and returns the session in its final state.
    pub fn shutdown(mut self) -> Option<Session> {
        self.stop_threads();
        self.session.lock().unwrap_or_else(|p| p.into_inner()).take()
    }

    fn stop_threads(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for s in self.streams.lock().unwrap_or_else(|p| p.into_inner()).drain(..) {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

fn bind(addr: &str) -> Result<TcpListener, ProtocolError> {
    let l = TcpListener::bind(addr).map_err(|e| ProtocolError::Io(format!("cannot listen on {addr}: {e}")))?;
    l.set_nonblocking(true)?;
    Ok(l)
}

/// Binds the endpoints and starts the session loop, the acceptors and one
/// reader and one writer per client.
pub fn serve(cfg: &ServerConfig, session: Session) -> Result<ServerHandle, ProtocolError> {
    let tcp = bind(&cfg.listen)?;
    let ws = cfg.ws_listen.as_deref().map(bind).transpose()?;
    let addr = tcp.local_addr()?;
    let ws_addr = ws.as_ref().map(|l| l.local_addr()).transpose()?;
    let hub = Arc::new(Hub::new());
    let stop = Arc::new(AtomicBool::new(false));
    let streams = Arc::new(Mutex::new(Vec::new()));
    let (tx, rx) = mpsc::channel();

    let mut threads = Vec::new();
    let mut actor = Actor::new(session, hub.clone(), cfg.clock);
    let stop_actor = stop.clone();
    let slot = actor.slot.clone();
    threads.push(std::thread::spawn(move || actor.run(rx, &stop_actor)));

    let ctx = Ctx { hub: hub.clone(), commands: tx.clone(), stop: stop.clone(), streams: streams.clone(), buffer: cfg.subscriber_buffer };
    let c = ctx.clone();
    threads.push(std::thread::spawn(move || accept_loop(tcp, c, false)));
    if let Some(ws) = ws {
        let c = ctx.clone();
        threads.push(std::thread::spawn(move || accept_loop(ws, c, true)));
    }
    log::info!("serving on {addr}{}", ws_addr.map(|a| format!(", web socket on {a}")).unwrap_or_default());
    Ok(ServerHandle { addr, ws_addr, hub, commands: tx, stop, streams, threads, session: slot })
}

struct Actor {
    session: Option<Session>,
    slot: Arc<Mutex<Option<Session>>>,
    hub: Arc<Hub>,
    clock: Clock,
    commands: u64,
    last_command: Option<CommandOutcome>,
    last_reconstruction: Option<SessionEvent>,
    ik_status: IkStatus,
    published: Option<PhaseStatus>,
    scene_version: Option<u64>,
}

impl Actor {
    fn new(session: Session, hub: Arc<Hub>, clock: Clock) -> Self {
        Self {
            session: Some(session),
            slot: Arc::new(Mutex::new(None)),
            hub,
            clock,
            commands: 0,
            last_command: None,
            last_reconstruction: None,
            ik_status: IkStatus::Idle,
            published: None,
            scene_version: None,
        }
    }

    fn session(&mut self) -> &mut Session {
        self.session.as_mut().expect("session present while running")
    }

    fn run(&mut self, rx: Receiver<Inbound>, stop: &AtomicBool) {
        self.publish_scene_if_changed();
        self.publish_status(true);
        let period = Duration::from_secs_f64(self.session().period());
        let mut next_tick = Instant::now() + period;
        while !stop.load(Ordering::SeqCst) {
            let wait = match self.clock {
                Clock::Realtime => next_tick.saturating_duration_since(Instant::now()),
                Clock::Stepped => Duration::from_millis(50),
            };
            match rx.recv_timeout(wait) {
                Ok(msg) => self.handle(msg),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            if self.clock == Clock::Realtime && Instant::now() >= next_tick {
                self.step();
                next_tick += period;
                // Fall behind gracefully instead of bursting.
                if Instant::now() > next_tick + period * 10 {
                    next_tick = Instant::now() + period;
                }
            }
        }
        *self.slot.lock().unwrap_or_else(|p| p.into_inner()) = self.session.take();
    }

    fn handle(&mut self, msg: Inbound) {
        let parsed = match msg.topic.as_str() {
            topics::BASE_CMD_VEL => topics::parse_cmd_vel(&msg.payload).map(|c| Some(OperatorCommand::Drive(c.into()))),
            topics::ARM_TARGET_POSE => topics::parse_target_pose(&msg.payload).map(|t| Some(OperatorCommand::DragTarget(t))),
            topics::SESSION_COMMAND => match topics::parse_session_command(&msg.payload) {
                Ok(SessionCommand::Advance { ticks }) => {
                    self.advance(ticks);
                    return;
                }
                Ok(c) => Ok(c.operator_command()),
                Err(e) => Err(e),
            },
            _ => Ok(None),
        };
        let outcome = match parsed {
            Ok(Some(cmd)) => {
                let name = cmd.name().to_string();
                match self.session().handle_command(cmd) {
                    Ok(effects) => {
                        for e in effects {
                            if let crate::session::Effect::JointCommand { status, .. } = e {
                                self.ik_status = status;
                            }
                        }
                        CommandOutcome { command: name, accepted: true, reason: None }
                    }
                    Err(r) => CommandOutcome { command: name, accepted: false, reason: Some(r.to_string()) },
                }
            }
            Ok(None) => return,
            Err(e) => CommandOutcome { command: msg.topic, accepted: false, reason: Some(e.to_string()) },
        };
        self.commands += 1;
        self.last_command = Some(outcome);
        self.publish_status(true);
    }

    fn advance(&mut self, ticks: u32) {
        if self.clock != Clock::Stepped {
            self.last_command = Some(CommandOutcome {
                command: "advance".into(),
                accepted: false,
                reason: Some("advance needs the stepped clock".into()),
            });
        } else {
            for _ in 0..ticks {
                self.step();
            }
            self.last_command = Some(CommandOutcome { command: "advance".into(), accepted: true, reason: None });
        }
        self.commands += 1;
        self.publish_status(true);
    }

    fn step(&mut self) {
        let packet = self.session().tick();
        self.publish_packet(&packet);
    }

    fn publish_packet(&mut self, p: &FeedbackPacket) {
        self.ik_status = p.ik_status;
        if let Some(e) = p.events.last() {
            self.last_reconstruction = Some(e.clone());
        }
        self.hub.publish_latched(Frame::publish(topics::ARM_JOINT_STATES, topics::to_json(&JointStates::from_packet(p))));
        for f in &p.frames {
            let topic = match f.camera {
                crate::session::CameraId::Base => topics::BASE_CAMERA,
                crate::session::CameraId::Ee => topics::EE_CAMERA,
            };
            match encode_video(&f.image, f.seq, f.camera as u8) {
                Ok(bytes) => {
                    self.hub.publish(Frame::publish(topic, bytes));
                }
                Err(e) => log::warn!("dropping {topic} frame: {e}"),
            }
        }
        if let Some(d) = &p.ee_depth {
            match encode_depth(&d.depth, d.seq, crate::session::CameraId::Ee as u8) {
                Ok(bytes) => {
                    self.hub.publish(Frame::publish(topics::EE_DEPTH, bytes));
                }
                Err(e) => log::warn!("dropping depth frame: {e}"),
            }
        }
        self.publish_scene_if_changed();
        self.publish_status(false);
    }

    fn publish_scene_if_changed(&mut self) {
        let session = self.session.as_ref().expect("session present while running");
        let version = session.splat_version();
        if self.scene_version == Some(version) {
            return;
        }
        self.scene_version = Some(version);
        let bytes = session.splat().map(encode_splat_binary).unwrap_or_default();
        let frames = chunk_scene(&bytes).into_iter().map(|c| Frame::publish(topics::SPLAT_SCENE, c)).collect();
        self.hub.publish_latched_set(frames);
    }

    /// Publishes the status when forced or when anything but the tick
    /// changed since the last publication.
    fn publish_status(&mut self, force: bool) {
        let s = self.session.as_ref().expect("session present while running");
        let status = PhaseStatus {
            phase: s.phase(),
            tick: s.tick_count(),
            splat_version: s.splat_version(),
            splat_stale: s.splat_stale(),
            ik_status: self.ik_status,
            commands: self.commands,
            last_command: self.last_command.clone(),
            last_reconstruction: self.last_reconstruction.clone(),
            dropped: self.hub.dropped_total(),
        };
        let changed = match &self.published {
            None => true,
            Some(old) => PhaseStatus { tick: status.tick, dropped: status.dropped, ..old.clone() } != status,
        };
        if force || changed {
            self.hub.publish_latched(Frame::publish(topics::SESSION_PHASE, topics::to_json(&status)));
            self.published = Some(status);
        }
    }
}

#[derive(Clone)]
struct Ctx {
    hub: Arc<Hub>,
    commands: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    streams: Arc<Mutex<Vec<TcpStream>>>,
    buffer: usize,
}

impl Ctx {
    fn register(&self, s: &TcpStream) {
        if let Ok(c) = s.try_clone() {
            let mut all = self.streams.lock().unwrap_or_else(|p| p.into_inner());
            all.retain(|s| s.peer_addr().is_ok());
            all.push(c);
        }
    }

    fn diagnostic(&self, id: SubscriberId, msg: String) {
        log::warn!("client {id}: {msg}");
        self.hub.send_to(id, Frame::publish(topics::PROTOCOL_ERROR, msg.into_bytes()));
    }

    /// Handles one decoded client frame.
    fn on_frame(&self, id: SubscriberId, f: Frame) {
        match f.kind {
            Kind::Subscribe => self.hub.subscribe(id, &f.topic),
            Kind::Unsubscribe => self.hub.unsubscribe(id, &f.topic),
            Kind::Ping => self.hub.send_to(id, Frame::pong()),
            Kind::Pong => {}
            Kind::Publish => {
                if topics::SERVER_TOPICS.contains(&f.topic.as_str()) {
                    return self.diagnostic(id, format!("{} is published by the server only", f.topic));
                }
                if let Err(e) = topics::validate_payload(&f.topic, &f.payload) {
                    return self.diagnostic(id, e.to_string());
                }
                if topics::COMMAND_TOPICS.contains(&f.topic.as_str()) {
                    let _ = self.commands.send(Inbound { topic: f.topic.clone(), payload: f.payload.clone() });
                }
                self.hub.publish(f);
            }
        }
    }

    /// A framing error ends the connection after the diagnostic is sent.
    fn on_fatal(&self, id: SubscriberId, e: ProtocolError) {
        self.diagnostic(id, format!("disconnecting: {e}"));
        self.hub.close(id);
    }
}

fn accept_loop(listener: TcpListener, ctx: Ctx, websocket: bool) {
    while !ctx.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                ctx.register(&stream);
                let id = ctx.hub.add_subscriber(QueuePolicy::DropOldest(ctx.buffer));
                log::info!("client {id} connected from {peer}");
                let c = ctx.clone();
                if websocket {
                    std::thread::spawn(move || ws_connection(stream, id, c));
                } else {
                    tcp_connection(stream, id, c);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                std::thread::sleep(Duration::from_millis(5));
            }
        }
    }
}

fn tcp_connection(stream: TcpStream, id: SubscriberId, ctx: Ctx) {
    let Ok(mut reader) = stream.try_clone() else {
        ctx.hub.remove_subscriber(id);
        return;
    };
    let c = ctx.clone();
    std::thread::spawn(move || {
        let mut dec = super::FrameDecoder::new();
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            let n = match reader.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            dec.push(&buf[..n]);
            loop {
                match dec.next_frame() {
                    Ok(Some(f)) => c.on_frame(id, f),
                    Ok(None) => break,
                    Err(e) => return c.on_fatal(id, e),
                }
            }
        }
        c.hub.close(id);
    });
    std::thread::spawn(move || {
        let mut writer = stream;
        let mut out = Vec::new();
        loop {
            if ctx.stop.load(Ordering::SeqCst) {
                break;
            }
            match ctx.hub.recv(id, Duration::from_millis(100)) {
                Ok(Some(f)) => {
                    out.clear();
                    super::frame::encode_into(&f, &mut out);
                    // Batch whatever else is already queued into one write.
                    while out.len() < 1 << 20 {
                        match ctx.hub.try_recv(id) {
                            Ok(Some(f)) => super::frame::encode_into(&f, &mut out),
                            _ => break,
                        }
                    }
                    if writer.write_all(&out).is_err() {
                        break;
                    }
                }
                Ok(None) => {}
                Err(_) => break,
            }
        }
        let _ = writer.flush();
        let _ = writer.shutdown(std::net::Shutdown::Both);
        ctx.hub.remove_subscriber(id);
        log::info!("client {id} disconnected");
    });
}

fn ws_connection(stream: TcpStream, id: SubscriberId, ctx: Ctx) {
    use tungstenite::{Error as WsError, Message};
    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("web-socket handshake failed: {e}");
            ctx.hub.remove_subscriber(id);
            return;
        }
    };
    let _ = ws.get_mut().set_read_timeout(Some(Duration::from_millis(5)));
    let mut closing = false;
    'conn: while !ctx.stop.load(Ordering::SeqCst) {
        if !closing {
            match ws.read() {
                Ok(Message::Binary(bytes)) => match decode_frame(&bytes) {
                    Ok(Decoded::Frame { frame, consumed }) if consumed == bytes.len() => ctx.on_frame(id, frame),
                    Ok(_) => {
                        ctx.on_fatal(id, ProtocolError::Malformed("message is not exactly one frame"));
                        closing = true;
                    }
                    Err(e) => {
                        ctx.on_fatal(id, e);
                        closing = true;
                    }
                },
                Ok(Message::Text(_)) => {
                    ctx.on_fatal(id, ProtocolError::Malformed("text message"));
                    closing = true;
                }
                Ok(Message::Close(_)) => break,
                Ok(_) => {}
                Err(WsError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
        loop {
            match ctx.hub.recv(id, if closing { Duration::from_millis(5) } else { Duration::ZERO }) {
                Ok(Some(f)) => {
                    if let Ok(bytes) = encode_frame(&f) {
                        if ws.send(Message::Binary(bytes)).is_err() {
                            break 'conn;
                        }
                    }
                }
                Ok(None) => break,
                Err(_) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    break 'conn;
                }
            }
        }
    }
    let _ = ws.get_mut().shutdown(std::net::Shutdown::Both);
    ctx.hub.remove_subscriber(id);
    log::info!("web-socket client {id} disconnected");
}
